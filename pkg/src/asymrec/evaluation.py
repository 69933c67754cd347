"""Ranking metrics, frequency-binned diagnostics, effective rank and rank fusion.

Ties are always broken by ascending item id.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FrequencyBins, InteractionDataset, frequency_bin_assign
from .errors import FormatError, NumericError, UsageError
from .numerics import svd_values

log = logging.getLogger(__name__)


def rank_items(scores) -> np.ndarray:
    """Item ids sorted by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def target_ranks(scores: np.ndarray, targets) -> np.ndarray:
    """1-based rank of each row's target under :func:`rank_items` ordering."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    own = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (ids < targets[:, None]))
    return ahead.sum(axis=1) + 1


def _rank_of(ranked, target):
    for pos, item in enumerate(ranked):
        if item == target:
            return pos + 1
    return None


def recall_at_k(ranked, target, k: int) -> int:
    if k < 1:
        raise UsageError("k must be at least 1")
    rank = _rank_of(ranked[:k], target)
    return int(rank is not None)


def ndcg_at_k(ranked, target, k: int) -> float:
    """Single-target NDCG: ``1 / log2(1 + rank)`` inside the cutoff, else 0."""
    if k < 1:
        raise UsageError("k must be at least 1")
    rank = _rank_of(ranked[:k], target)
    return 0.0 if rank is None else 1.0 / math.log2(1 + rank)


@dataclass
class MetricReport:
    recall5: float
    recall10: float
    ndcg5: float
    ndcg10: float
    n_users: int
    bin_recall10: list = field(default_factory=list)  # per frequency bin, NaN when empty
    bin_users: list = field(default_factory=list)

    def as_rows(self) -> list:
        return [
            ("recall@5", self.recall5),
            ("recall@10", self.recall10),
            ("ndcg@5", self.ndcg5),
            ("ndcg@10", self.ndcg10),
            ("users", self.n_users),
        ]


def report_from_ranks(ranks, target_bins=None, n_bins: int = 0) -> MetricReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        return MetricReport(0.0, 0.0, 0.0, 0.0, 0, [float("nan")] * n_bins, [0] * n_bins)
    gain = 1.0 / np.log2(1.0 + ranks)
    # sorting before summing makes the aggregate independent of user order
    def avg(values):
        return float(np.sort(values).sum() / ranks.size)

    bin_recall, bin_users = [], []
    if target_bins is not None:
        target_bins = np.asarray(target_bins)
        for b in range(n_bins):
            sel = target_bins == b
            bin_users.append(int(sel.sum()))
            bin_recall.append(float((ranks[sel] <= 10).mean()) if sel.any() else float("nan"))
    return MetricReport(
        avg((ranks <= 5).astype(float)),
        avg((ranks <= 10).astype(float)),
        avg(np.where(ranks <= 5, gain, 0.0)),
        avg(np.where(ranks <= 10, gain, 0.0)),
        int(ranks.size),
        bin_recall,
        bin_users,
    )


def evaluate(scorer, dataset: InteractionDataset, split: str = "test", bins: FrequencyBins | None = None) -> MetricReport:
    """Full-catalog metrics for one split.

    ``scorer`` maps a list of context item sequences to a ``(n_contexts, n_items)``
    score matrix.
    """
    rows = dataset.contexts(split)
    if not rows:
        return report_from_ranks([], None, len(bins) if bins else 0)
    contexts = [ctx for _, ctx, _ in rows]
    targets = np.array([t for _, _, t in rows])
    ranks = target_ranks(scorer(contexts), targets)
    if bins is None:
        return report_from_ranks(ranks)
    item_bin = frequency_bin_assign(dataset, bins)
    return report_from_ranks(ranks, item_bin[targets], len(bins))


def top_k(scorer, contexts: list, k: int = 10) -> list:
    scores = np.atleast_2d(scorer(contexts))
    return [rank_items(row)[:k].tolist() for row in scores]


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = np.linalg.norm(a)
    bn = np.linalg.norm(b, axis=1)
    denom = np.where(bn > 0, bn, 1.0) * (an if an > 0 else 1.0)
    return (b @ a) / denom


@dataclass
class BinnedRecall:
    recall10: list  # per bin, NaN when the bin has no targets
    users: list


def sample_negatives(rng, n_items: int, exclude: set, count: int, warn: bool = True) -> np.ndarray:
    pool = np.array([i for i in range(n_items) if i not in exclude], dtype=np.int64)
    if pool.size == 0:
        raise UsageError("no items left to sample negatives from")
    if pool.size < count:
        if warn:
            log.warning("only %d eligible negatives for %d requested; sampling with replacement", pool.size, count)
        return rng.choice(pool, size=count, replace=True)
    return rng.choice(pool, size=count, replace=False)


def binned_input_retrieval(
    representations,
    dataset: InteractionDataset,
    bins: FrequencyBins,
    negatives: int = 99,
    seed: int = 0,
    split: str = "test",
) -> BinnedRecall:
    """Recall@10 of the target against sampled negatives, ranked by cosine to the mean-pooled history.

    Negatives exclude the history items and the target.
    """
    reps = np.asarray(representations, dtype=np.float64)
    rng = np.random.default_rng(seed)
    item_bin = frequency_bin_assign(dataset, bins)
    hits = np.zeros(len(bins))
    users = np.zeros(len(bins), dtype=np.int64)
    short = 0
    for _, ctx, target in dataset.contexts(split):
        query = reps[list(ctx)].mean(axis=0)
        exclude = set(ctx) | {target}
        short += reps.shape[0] - len(exclude) < negatives
        neg = sample_negatives(rng, reps.shape[0], exclude, negatives, warn=False)
        cand = np.concatenate([[target], neg])
        sims = _cosine(query, reps[cand])
        # rank position of the target among candidates, ties by ascending item id
        ahead = (sims > sims[0]) | ((sims == sims[0]) & (cand < target))
        rank = int(ahead.sum()) + 1
        b = item_bin[target]
        users[b] += 1
        hits[b] += rank <= 10
    if short:
        log.warning("%d contexts had fewer than %d eligible negatives; sampled with replacement", short, negatives)
    recall = [float(h / u) if u else float("nan") for h, u in zip(hits, users)]
    return BinnedRecall(recall, users.tolist())


def normalized_spectrum(Z) -> np.ndarray:
    sigma = svd_values(Z)
    total = sigma.sum()
    if total <= 0:
        raise NumericError("effective rank is undefined for an all-zero matrix")
    return sigma / total


def effective_rank_from_spectrum(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(math.exp(-(p * np.log(p)).sum()))


def effective_rank(Z) -> float:
    """exp of the Shannon entropy of the singular values normalised to sum to one."""
    return effective_rank_from_spectrum(normalized_spectrum(Z))


def rrf_scores(lists, k0: float = 50) -> dict:
    scores = {}
    for ranked in lists:
        for pos, item in enumerate(ranked, 1):
            scores[item] = scores.get(item, 0.0) + 1.0 / (k0 + pos)
    return scores


def rrf_fuse(list_a, list_b, k0: float = 50) -> list:
    """Reciprocal rank fusion of two ranked id lists (1-based ranks)."""
    scores = rrf_scores([list_a, list_b], k0)
    return sorted(scores, key=lambda item: (-scores[item], item))


# plain-text outputs


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_report(report: MetricReport, bins: FrequencyBins | None, path) -> None:
    lines = [f"{k}\t{_fmt(v)}\n" for k, v in report.as_rows()]
    if bins is not None and report.bin_recall10:
        lines.append("\n# recall@10 by target frequency bin\n")
        for (lo, hi), r, n in zip(bins.ranges(), report.bin_recall10, report.bin_users):
            hi_s = "inf" if hi is None else str(hi)
            lines.append(f"bin[{lo},{hi_s}]\t{_fmt(r)}\t{n}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("bin["):
            continue
        key, _, value = line.partition("\t")
        out[key] = float(value)
    return out


def save_bins_csv(bins: FrequencyBins, recall: list, path) -> None:
    lines = ["bin_low,bin_high,recall\n"]
    for (lo, hi), r in zip(bins.ranges(), recall):
        lines.append(f"{lo},{'inf' if hi is None else hi},{_fmt(r)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def save_spectrum_csv(p, path) -> None:
    lines = ["index,normalized_singular_value\n"] + [f"{i},{_fmt(v)}\n" for i, v in enumerate(p)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_spectrum_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows if r])


def save_predictions(rows, path) -> None:
    """``rows``: iterable of ``(user_id, ranked item ids)``."""
    lines = [f"{u}\t{','.join(map(str, items))}\n" for u, items in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_predictions(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        user, sep, rest = line.partition("\t")
        try:
            out.append((int(user), [int(t) for t in rest.split(",") if t]))
        except ValueError:
            raise FormatError(f"prediction file line {lineno} is malformed") from None
        if not sep:
            raise FormatError(f"prediction file line {lineno} lacks a tab")
    return out


def fuse_predictions(a: list, b: list, k0: float = 50, k: int | None = None) -> list:
    """Per-user RRF of two prediction lists; users missing from one side fuse with an empty list."""
    left, right = dict(a), dict(b)
    fused = []
    for user in sorted(left.keys() | right.keys()):
        merged = rrf_fuse(left.get(user, []), right.get(user, []), k0)
        fused.append((user, merged[:k] if k else merged))
    return fused
