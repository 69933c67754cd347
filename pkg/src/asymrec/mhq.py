"""Multi-faceted hierarchical quantization.

Embeddings are linearly projected, cut into ``M`` contiguous subspaces, and
each subspace is encoded by ``L`` levels of greedy residual quantization over
``K``-entry codebooks. Codebooks are maintained by exponential moving averages;
only the projection is trained by gradient descent.

Array layout: indices ``(n, M, L)``, centroids ``(M, L, K, d_sub)``. A flat
semantic code is ``indices.reshape(n, M * L)`` (m major, l minor).
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, f64_bytes, split_checksum, with_checksum
from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .numerics import Tape, ad, backward, matmul

log = logging.getLogger(__name__)

EPS = 1e-6
MHQ_MAGIC = b"MHQ1"


@dataclass
class MhqConfig:
    D: int = 512
    M: int = 32
    L: int = 2
    K: int = 256
    lambda_bal: float = 0.01
    lambda_reg: float = 0.01
    gamma: float = 0.99
    lr: float = 0.001
    epochs: int = 50
    batch: int = 256
    seed: int = 0
    dead_fraction: float = 0.01

    def __post_init__(self):
        if self.M < 1 or self.L < 1 or self.D < 1:
            raise ConfigError("D, M and L must be positive")
        if self.D % self.M:
            raise ConfigError(f"D={self.D} is not divisible by M={self.M}")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be positive and epochs nonnegative")

    @property
    def d_sub(self) -> int:
        return self.D // self.M


@dataclass
class CodebookSet:
    W_P: np.ndarray  # (D, d)
    centroids: np.ndarray  # (M, L, K, d_sub)
    ema_count: np.ndarray  # (M, L, K)
    ema_sum: np.ndarray  # (M, L, K, d_sub)

    @property
    def D(self):
        return self.W_P.shape[0]

    @property
    def d(self):
        return self.W_P.shape[1]

    @property
    def M(self):
        return self.centroids.shape[0]

    @property
    def L(self):
        return self.centroids.shape[1]

    @property
    def K(self):
        return self.centroids.shape[2]

    @property
    def d_sub(self):
        return self.centroids.shape[3]

    def copy(self) -> "CodebookSet":
        return CodebookSet(self.W_P.copy(), self.centroids.copy(), self.ema_count.copy(), self.ema_sum.copy())

    def sync_centroids(self, eps: float = EPS) -> None:
        self.centroids = self.ema_sum / (self.ema_count[..., None] + eps)


@dataclass
class Quantized:
    indices: np.ndarray  # (n, M, L)
    z_hat: np.ndarray  # (n, M, d_sub)
    residuals: np.ndarray  # (n, M, L + 1, d_sub); [:, :, 0] is z, [:, :, L] is z - z_hat

    @property
    def codes(self) -> np.ndarray:
        n, M, L = self.indices.shape
        return self.indices.reshape(n, M * L)


@dataclass
class LossTerms:
    rec: float
    bal: float
    reg: float
    total: float


def project(cb: CodebookSet, x) -> np.ndarray:
    """``W_P x`` for one embedding (1-d) or a batch of rows (2-d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cb.d:
        raise DimensionError(f"embedding has length {x.shape[-1]}, projection expects {cb.d}")
    out = matmul(x.reshape(-1, cb.d), cb.W_P.T)
    return out[0] if x.ndim == 1 else out


def split_subspaces(tilde_x, M: int) -> list:
    tilde_x = np.asarray(tilde_x, dtype=np.float64)
    if M < 1 or tilde_x.shape[-1] % M:
        raise DimensionError(f"length {tilde_x.shape[-1]} cannot be split into {M} equal subspaces")
    return np.split(tilde_x, M, axis=-1)


def _nearest(r: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Index of the closest codeword per (row, subspace); lowest index wins ties.

    r: (n, M, d_sub), codebooks: (M, K, d_sub). Distances come from the expanded
    form; any (row, subspace) whose best candidates are within rounding error
    of each other is rescanned with explicit differences, so the result agrees
    with a direct scan.
    """
    n, M, d_sub = r.shape
    rt = np.ascontiguousarray(r.transpose(1, 0, 2))  # (M, n, d_sub)
    r2 = np.einsum("mnd,mnd->mn", rt, rt)[..., None]
    c2 = np.einsum("mkd,mkd->mk", codebooks, codebooks)[:, None, :]
    # ||r||^2 is constant per row and left out of the ranking
    dist = c2 - 2.0 * (rt @ codebooks.transpose(0, 2, 1))  # (M, n, K)
    best = dist.min(axis=-1, keepdims=True)
    slack = 64 * np.finfo(np.float64).eps * (r2 + c2.max(axis=-1, keepdims=True)) + 1e-300
    out = np.argmin(dist, axis=-1)  # (M, n)
    close = (dist <= best + slack).sum(axis=-1) > 1
    for m, i in zip(*np.nonzero(close)):
        diff = rt[m, i][None, :] - codebooks[m]
        out[m, i] = np.argmin(np.einsum("kd,kd->k", diff, diff))
    return np.ascontiguousarray(out.T)


def quantize_projected(cb: CodebookSet, tilde: np.ndarray) -> Quantized:
    tilde = np.atleast_2d(tilde)
    n = tilde.shape[0]
    z = tilde.reshape(n, cb.M, cb.d_sub)
    residuals = np.empty((n, cb.M, cb.L + 1, cb.d_sub))
    residuals[:, :, 0] = z
    indices = np.empty((n, cb.M, cb.L), dtype=np.int64)
    m_idx = np.arange(cb.M)[None, :]
    for level in range(cb.L):
        r = residuals[:, :, level]
        idx = _nearest(r, cb.centroids[:, level])
        indices[:, :, level] = idx
        residuals[:, :, level + 1] = r - cb.centroids[m_idx, level, idx]
    chosen = cb.centroids[np.arange(cb.M)[None, :, None], np.arange(cb.L)[None, None, :], indices]
    z_hat = chosen.sum(axis=2)
    return Quantized(indices, z_hat, residuals)


def quantize(cb: CodebookSet, X) -> Quantized:
    return quantize_projected(cb, project(cb, np.atleast_2d(X)))


def quantize_subspace(cb: CodebookSet, m: int, z) -> tuple:
    """Greedy residual encoding of one subspace vector.

    Returns ``(indices, z_hat, trace)`` where ``trace`` has ``L + 1`` rows,
    ``trace[0] == z`` and ``trace[L] == z - z_hat``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cb.d_sub,):
        raise DimensionError(f"subspace vector must have length {cb.d_sub}")
    trace = [z]
    z_hat = np.zeros_like(z)
    indices = []
    for level in range(cb.L):
        book = cb.centroids[m, level]
        k = int(np.argmin(((trace[-1][None, :] - book) ** 2).sum(axis=1)))
        indices.append(k)
        z_hat = z_hat + book[k]
        trace.append(trace[-1] - book[k])
    return indices, z_hat, np.array(trace)


def assign_codes(cb: CodebookSet, X) -> np.ndarray:
    """Flat semantic codes, shape ``(n, M * L)``."""
    return quantize(cb, X).codes


def assign_code(cb: CodebookSet, x) -> tuple:
    return tuple(int(i) for i in assign_codes(cb, np.asarray(x, dtype=np.float64)[None, :])[0])


def _objective(W, X: np.ndarray, z_hat: np.ndarray, cfg: MhqConfig):
    """Tape-compatible loss terms; ``z_hat`` is held constant."""
    n = X.shape[0]
    tilde = ad.matmul(X, ad.swap_last(W))
    diff = tilde - z_hat.reshape(n, -1)
    rec = (diff * diff).sum() * (1.0 / n)
    z = tilde.reshape(n, cfg.M, cfg.d_sub)
    energy = (z * z).sum(axis=2).mean(axis=0)
    bal = ad.abs_(energy - energy.mean()).mean()
    gram = ad.matmul(W, ad.swap_last(W)) - np.eye(W.shape[0])
    reg = ad.frobenius(gram)
    total = rec + cfg.lambda_bal * bal + cfg.lambda_reg * reg
    return total, rec, bal, reg


def losses(cb: CodebookSet, X, cfg: MhqConfig) -> LossTerms:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DimensionError("losses need a non-empty batch")
    q = quantize(cb, X)
    tilde = project(cb, X)
    n = X.shape[0]
    rec = float(((tilde - q.z_hat.reshape(n, -1)) ** 2).sum(axis=1).mean())
    z = tilde.reshape(n, cb.M, cb.d_sub)
    energy = (z * z).sum(axis=2).mean(axis=0)
    bal = float(np.abs(energy - energy.mean()).mean())
    reg = float(np.linalg.norm(cb.W_P @ cb.W_P.T - np.eye(cb.D)))
    return LossTerms(rec, bal, reg, rec + cfg.lambda_bal * bal + cfg.lambda_reg * reg)


def projection_gradient(cb: CodebookSet, X: np.ndarray, z_hat: np.ndarray, cfg: MhqConfig):
    tape = Tape()
    W = tape.param(cb.W_P, "W_P")
    total, rec, bal, reg = _objective(W, X, z_hat, cfg)
    grads = backward(tape, total)
    terms = LossTerms(float(rec.value), float(bal.value), float(reg.value), float(total.value))
    return grads["W_P"], terms


def ema_update(cb: CodebookSet, q: Quantized, gamma: float, eps: float = EPS) -> None:
    """Decay every accumulator, add this batch's per-code counts and residual sums."""
    n = q.indices.shape[0]
    M, L, K, d_sub = cb.centroids.shape
    flat = (np.arange(M)[None, :, None] * L + np.arange(L)[None, None, :]) * K + q.indices
    flat = flat.reshape(-1)
    size = M * L * K
    counts = np.bincount(flat, minlength=size).reshape(M, L, K).astype(np.float64)
    # residual feeding level l is residuals[:, :, l]
    feed = q.residuals[:, :, :L, :].reshape(n * M * L, d_sub)
    sums = np.stack([np.bincount(flat, weights=feed[:, j], minlength=size) for j in range(d_sub)], axis=-1)
    cb.ema_count = gamma * cb.ema_count + (1.0 - gamma) * counts
    cb.ema_sum = gamma * cb.ema_sum + (1.0 - gamma) * sums.reshape(M, L, K, d_sub)
    cb.sync_centroids(eps)


def init_projection(D: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if D <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, D)))
        return q.T.copy()
    q, _ = np.linalg.qr(rng.normal(size=(D, d)))
    return q.copy()


def _residual_stream_init(cb: CodebookSet, tilde: np.ndarray, mass: float, rng) -> None:
    n = tilde.shape[0]
    r = tilde.reshape(n, cb.M, cb.d_sub).copy()
    scale = float(np.std(r)) if n > 1 else 1.0
    for level in range(cb.L):
        for m in range(cb.M):
            if n >= cb.K:
                pick = rng.choice(n, size=cb.K, replace=False)
                cb.centroids[m, level] = r[pick, m]
            else:
                cb.centroids[m, level, :n] = r[rng.permutation(n), m]
                cb.centroids[m, level, n:] = 1e-3 * scale * rng.normal(size=(cb.K - n, cb.d_sub))
        idx = _nearest(r, cb.centroids[:, level])
        r = r - cb.centroids[np.arange(cb.M)[None, :], level, idx]
    cb.ema_count[:] = mass
    cb.ema_sum[:] = cb.centroids * mass
    cb.sync_centroids()


def reseed_dead_codes(cb: CodebookSet, q: Quantized, threshold: float, rng) -> int:
    """Reset rarely used codes to random current residuals; returns how many were reset."""
    n = q.indices.shape[0]
    dead = np.argwhere(cb.ema_count < threshold)
    for m, level, k in dead:
        r = q.residuals[int(rng.integers(n)), m, level]
        cb.ema_count[m, level, k] = 1.0
        cb.ema_sum[m, level, k] = r
        cb.centroids[m, level, k] = r / (1.0 + EPS)
    return len(dead)


def new_codebooks(cfg: MhqConfig, d: int, rng) -> CodebookSet:
    shape = (cfg.M, cfg.L, cfg.K)
    return CodebookSet(
        init_projection(cfg.D, d, rng),
        np.zeros(shape + (cfg.d_sub,)),
        np.zeros(shape),
        np.zeros(shape + (cfg.d_sub,)),
    )


@dataclass
class MhqTrainResult:
    codebooks: CodebookSet
    history: list = field(default_factory=list)  # one dict per epoch


def train(cfg: MhqConfig, table, init: CodebookSet | None = None, on_step=None) -> MhqTrainResult:
    """Fit the projection by gradient descent and the codebooks by EMA.

    ``table`` is an :class:`~asymrec.data.EmbeddingTable` or an ``(n, d)`` array.
    ``init`` skips the data-sampled initialisation and starts from a copy of the
    given codebooks. ``on_step(epoch, step, cb)`` is called after every EMA
    update, and once more per epoch with ``step=None`` after dead-code reseeding.
    """
    X = np.asarray(getattr(table, "matrix", table), dtype=np.float64)
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch, n)
    mass = batch / cfg.K
    if init is None:
        cb = new_codebooks(cfg, d, rng)
        _residual_stream_init(cb, project(cb, X), mass, rng)
    else:
        if (init.D, init.M, init.L, init.K, init.d) != (cfg.D, cfg.M, cfg.L, cfg.K, d):
            raise ConfigError("initial codebooks do not match the configuration")
        cb = init.copy()

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for step, start in enumerate(range(0, n, batch)):
            xb = X[order[start : start + batch]]
            q = quantize(cb, xb)
            grad, terms = projection_gradient(cb, xb, q.z_hat, cfg)
            if not (np.isfinite(terms.total) and np.all(np.isfinite(grad))):
                raise DivergenceError(
                    f"MHQ diverged at epoch {epoch} step {step}: "
                    f"rec={terms.rec} bal={terms.bal} reg={terms.reg}"
                )
            cb.W_P = cb.W_P - cfg.lr * grad
            if not np.all(np.isfinite(cb.W_P)):
                raise DivergenceError(f"MHQ projection overflowed at epoch {epoch} step {step}")
            ema_update(cb, q, cfg.gamma)
            if on_step is not None:
                on_step(epoch, step, cb)
            sums += (terms.rec, terms.bal, terms.reg, terms.total)
            steps += 1
        full = quantize(cb, X)
        reseeded = reseed_dead_codes(cb, full, cfg.dead_fraction * mass, rng)
        if on_step is not None:
            on_step(epoch, None, cb)
        rec, bal, reg, total = sums / max(steps, 1)
        history.append({"epoch": epoch, "rec": rec, "bal": bal, "reg": reg, "total": total, "reseeded": reseeded})
        log.debug("mhq epoch %d rec=%.6g bal=%.6g reg=%.6g reseeded=%d", epoch, rec, bal, reg, reseeded)
    return MhqTrainResult(cb, history)


def reconstruction_mse(cb: CodebookSet, X) -> float:
    """Mean squared error per projected coordinate."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    tilde = project(cb, X)
    q = quantize_projected(cb, tilde)
    return float(((tilde - q.z_hat.reshape(X.shape[0], -1)) ** 2).mean())


def codebook_utilization(cb: CodebookSet, X) -> np.ndarray:
    """Fraction of each codebook's entries selected at least once, shape ``(M, L)``."""
    idx = quantize(cb, X).indices
    used = np.zeros((cb.M, cb.L))
    for m in range(cb.M):
        for level in range(cb.L):
            used[m, level] = np.unique(idx[:, m, level]).size / cb.K
    return used


@dataclass
class CollisionReport:
    n_items: int
    unique_items: int  # items whose code no other item shares
    distinct_codes: int
    groups: list  # sorted item-id lists, one per shared code

    @property
    def unique_fraction(self) -> float:
        return self.unique_items / self.n_items if self.n_items else 1.0


def collision_report(codes) -> CollisionReport:
    codes = np.asarray(codes)
    by_code = {}
    for item, row in enumerate(codes):
        by_code.setdefault(row.tobytes(), []).append(item)
    groups = sorted(g for g in by_code.values() if len(g) > 1)
    shared = sum(len(g) for g in groups)
    return CollisionReport(len(codes), len(codes) - shared, len(by_code), groups)


def save_codebooks(cb: CodebookSet, path) -> None:
    header = MHQ_MAGIC + struct.pack("<5I", cb.D, cb.M, cb.L, cb.K, cb.d)
    parts = [f64_bytes(cb.W_P)]
    for m in range(cb.M):
        for level in range(cb.L):
            parts.append(f64_bytes(cb.centroids[m, level]))
            parts.append(f64_bytes(cb.ema_count[m, level]))
            parts.append(f64_bytes(cb.ema_sum[m, level]))
    Path(path).write_bytes(header + with_checksum(b"".join(parts)))


def load_codebooks(path) -> CodebookSet:
    blob = Path(path).read_bytes()
    if blob[:4] != MHQ_MAGIC:
        raise FormatError("bad MHQ1 magic", offset=0)
    head = Reader(blob, 4)
    D, M, L, K, d = (head.u32(name) for name in ("D", "M", "L", "K", "d"))
    if M == 0 or D % M:
        raise FormatError("inconsistent MHQ1 config block", offset=4)
    d_sub = D // M
    expected = 24 + 8 * (D * d + M * L * (K * d_sub * 2 + K)) + 8
    if len(blob) != expected:
        raise FormatError(f"MHQ1 size {len(blob)} does not match config (expected {expected})", offset=min(len(blob), expected))
    payload = split_checksum(blob, 24)
    r = Reader(payload)
    W_P = r.f64((D, d), "W_P")
    centroids = np.empty((M, L, K, d_sub))
    count = np.empty((M, L, K))
    ema_sum = np.empty((M, L, K, d_sub))
    for m in range(M):
        for level in range(L):
            centroids[m, level] = r.f64((K, d_sub), "centroids")
            count[m, level] = r.f64((K,), "ema_count")
            ema_sum[m, level] = r.f64((K, d_sub), "ema_sum")
    return CodebookSet(W_P, centroids, count, ema_sum)


def save_codes(codes, path) -> None:
    codes = np.asarray(codes)
    lines = [f"{i}\t{' '.join(map(str, row))}\n" for i, row in enumerate(codes.tolist())]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_codes(path) -> np.ndarray:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            item, _, rest = line.rstrip("\n").partition("\t")
            try:
                rows[int(item)] = [int(t) for t in rest.split()]
            except ValueError:
                raise FormatError(f"codes file line {lineno} is malformed") from None
    if sorted(rows) != list(range(len(rows))):
        raise FormatError("codes file must list items 0..n-1")
    widths = {len(r) for r in rows.values()}
    if len(widths) > 1:
        raise FormatError("codes file has rows of different length")
    return np.array([rows[i] for i in range(len(rows))], dtype=np.int64)
