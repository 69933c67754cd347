"""Slow, independent reference computations used as test oracles.

Nothing here imports the package under test.
"""

import math


def triple_loop_matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def jacobi_eigenvalues(sym, tol=1e-14, max_sweeps=100):
    """Classical cyclic two-sided Jacobi on a symmetric matrix (lists of floats)."""
    a = [list(map(float, row)) for row in sym]
    n = len(a)
    for _ in range(max_sweeps):
        off = sum(a[i][j] ** 2 for i in range(n) for j in range(n) if i != j)
        scale = sum(a[i][i] ** 2 for i in range(n)) or 1.0
        if off <= tol * tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p][q] == 0.0:
                    continue
                theta = (a[q][q] - a[p][p]) / (2 * a[p][q])
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
    return sorted((a[i][i] for i in range(n)), reverse=True)


def gram(a):
    """a^T a for a list-of-rows matrix."""
    rows, cols = len(a), len(a[0])
    return [[sum(a[r][i] * a[r][j] for r in range(rows)) for j in range(cols)] for i in range(cols)]


def singular_values_via_jacobi(a):
    if len(a) < len(a[0]):
        a = [list(col) for col in zip(*a)]
    return [math.sqrt(max(v, 0.0)) for v in jacobi_eigenvalues(gram(a))]


def effective_rank_oracle(sigmas):
    total = math.fsum(sigmas)
    ent = 0.0
    for s in sigmas:
        p = s / total
        if p > 0:
            ent -= p * math.log(p)
    return math.exp(ent)


def scan_recall(ranked, target, k):
    for i in range(min(k, len(ranked))):
        if ranked[i] == target:
            return 1
    return 0


def scan_ndcg(ranked, target, k):
    for i in range(min(k, len(ranked))):
        if ranked[i] == target:
            return 1.0 / math.log2(i + 2)
    return 0.0


def brute_rrf(lists, k0=50):
    items = sorted({i for lst in lists for i in lst})
    scored = []
    for item in items:
        s = 0.0
        for lst in lists:
            if item in lst:
                s += 1.0 / (k0 + lst.index(item) + 1)
        scored.append((s, item))
    # bubble the order out explicitly: higher score first, lower id on ties
    out = []
    remaining = scored[:]
    while remaining:
        best = remaining[0]
        for cand in remaining[1:]:
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
        out.append(best[1])
        remaining.remove(best)
    return out


def naive_five_core(raw, min_count=5):
    """Remove one offending user or item at a time until none remain."""
    seqs = {u: list(items) for u, items in raw}
    while True:
        counts = {}
        for items in seqs.values():
            for i in items:
                counts[i] = counts.get(i, 0) + 1
        bad_item = next((i for i in sorted(counts) if counts[i] < min_count), None)
        if bad_item is not None:
            for u in seqs:
                seqs[u] = [i for i in seqs[u] if i != bad_item]
            continue
        bad_user = next((u for u in sorted(seqs) if len(seqs[u]) < min_count), None)
        if bad_user is not None:
            del seqs[bad_user]
            continue
        break
    return sorted(seqs.items())
