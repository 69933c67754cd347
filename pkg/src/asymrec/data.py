"""Item embeddings, interaction sequences, splits and frequency statistics."""

import bisect
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import split_checksum, with_checksum
from .errors import FormatError, IngestionError, UsageError

log = logging.getLogger(__name__)

AEMB_MAGIC = b"AEMB"


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1 or self.matrix.shape[1] < 1:
            raise FormatError(f"embedding table must be a non-empty 2-d matrix, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise FormatError("embedding table has non-finite rows")

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def save_embeddings(table: EmbeddingTable, path) -> None:
    header = AEMB_MAGIC + struct.pack("<II", table.n_items, table.dim)
    payload = np.ascontiguousarray(table.matrix, dtype="<f4").tobytes()
    Path(path).write_bytes(header + with_checksum(payload))


def load_embeddings(path) -> EmbeddingTable:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != AEMB_MAGIC:
        raise FormatError("bad AEMB magic", offset=0)
    n_items, dim = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * n_items * dim + 8
    if len(blob) < need:
        have_rows = max(len(blob) - 12 - 8, 0) / (4 * dim) if dim else 0
        raise FormatError(
            f"truncated AEMB payload: header declares {n_items} rows x {dim}, file holds ~{have_rows:.2f} rows",
            offset=len(blob),
        )
    if len(blob) > need:
        raise FormatError("trailing bytes after AEMB checksum", offset=need)
    payload = split_checksum(blob, 12)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n_items, dim)
    bad = np.flatnonzero(~np.isfinite(values.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite embedding value", offset=12 + 4 * int(bad[0]))
    return EmbeddingTable(values)


@dataclass
class InteractionDataset:
    n_items: int
    users: list  # [(user_id, tuple of item ids)], each sequence length >= 3
    dropped: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.users = [(int(u), tuple(int(i) for i in items)) for u, items in self.users]
        for u, items in self.users:
            if len(items) < 3:
                raise UsageError(f"user {u} has fewer than 3 interactions")
            if any(i < 0 or i >= self.n_items for i in items):
                raise UsageError(f"user {u} references an item outside [0, {self.n_items})")
        counts = np.zeros(self.n_items, dtype=np.int64)
        for _, items in self.users:
            np.add.at(counts, list(items[:-2]), 1)
        self.item_frequency = counts

    def __len__(self):
        return len(self.users)

    @property
    def n_interactions(self) -> int:
        return sum(len(items) for _, items in self.users)

    def train(self, k: int) -> tuple:
        return self.users[k][1][:-2]

    def valid(self, k: int) -> int:
        return self.users[k][1][-2]

    def test(self, k: int) -> int:
        return self.users[k][1][-1]

    def contexts(self, split: str = "test") -> list:
        """(user_id, context items, target item) per user for a split.

        ``train`` predicts the last training item from the rest of the training
        prefix, ``valid`` the validation item from the training prefix, and
        ``test`` the test item from everything before it.
        """
        out = []
        for u, items in self.users:
            if split == "train":
                if len(items) < 4:
                    continue
                out.append((u, items[:-3], items[-3]))
            elif split == "valid":
                out.append((u, items[:-2], items[-2]))
            elif split == "test":
                out.append((u, items[:-1], items[-1]))
            else:
                raise UsageError(f"unknown split {split!r}")
        return out


def save_interactions(dataset: InteractionDataset, path) -> None:
    lines = [f"{u}\t{' '.join(map(str, items))}\n" for u, items in dataset.users]
    Path(path).write_text("".join(lines), encoding="utf-8")


def parse_interactions(path) -> list:
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            user, sep, rest = line.partition("\t")
            if not sep:
                raise IngestionError("expected user_id<TAB>item ids", line=lineno)
            try:
                items = [int(t) for t in rest.split()]
                uid = int(user)
            except ValueError as exc:
                raise IngestionError(f"non-integer id ({exc})", line=lineno) from None
            if uid < 0 or any(i < 0 for i in items):
                raise IngestionError("ids must be nonnegative", line=lineno)
            raw.append((uid, items, lineno))
    return raw


def load_interactions(path, n_items: int) -> InteractionDataset:
    users, dropped = [], 0
    for uid, items, lineno in parse_interactions(path):
        unknown = [i for i in items if i >= n_items]
        if unknown:
            raise IngestionError(f"unknown item id {unknown[0]} (catalog has {n_items} items)", line=lineno)
        if len(items) < 3:
            dropped += 1
            continue
        users.append((uid, items))
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)
    return InteractionDataset(n_items, users, dropped=dropped)


def five_core_filter(raw, min_count: int = 5) -> list:
    """Drop users and items below ``min_count`` interactions until nothing changes."""
    seqs = [(u, list(items)) for u, items in raw]
    while True:
        item_counts = Counter(i for _, items in seqs for i in items)
        kept = []
        changed = False
        for u, items in seqs:
            filtered = [i for i in items if item_counts[i] >= min_count]
            changed |= len(filtered) != len(items)
            if len(filtered) >= min_count:
                kept.append((u, filtered))
            else:
                changed = True
        seqs = kept
        if not changed:
            break
    if not seqs:
        log.warning("5-core filtering removed every interaction")
    return seqs


@dataclass
class FrequencyBins:
    boundaries: tuple = (6, 15, 50)

    def __post_init__(self):
        self.boundaries = tuple(int(b) for b in self.boundaries)
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise UsageError(f"bin boundaries must be strictly increasing: {self.boundaries}")

    def __len__(self):
        return len(self.boundaries) + 1

    def bin_of(self, count: int) -> int:
        return bisect.bisect_left(self.boundaries, count)

    def ranges(self) -> list:
        lows = (0,) + tuple(b + 1 for b in self.boundaries)
        highs = self.boundaries + (None,)
        return list(zip(lows, highs))


def frequency_bin_assign(dataset: InteractionDataset, bins: FrequencyBins) -> np.ndarray:
    """Bin index for every item; a bin holds counts in ``(previous boundary, boundary]``."""
    return np.array([bins.bin_of(int(c)) for c in dataset.item_frequency], dtype=np.int64)


def synth_dataset(
    seed: int,
    n_items: int,
    dim: int,
    n_users: int,
    cluster_count: int,
    seq_len_range=(5, 10),
    stay_prob: float = 0.8,
    noise: float = 0.35,
):
    """Clustered embeddings plus users walking a ring inside a home cluster.

    Each cluster's items form a ring. A user starts at a random ring position
    and advances one step per interaction; with probability ``stay_prob`` the
    emitted item is the ring item, otherwise a uniformly random catalog item.
    Embeddings are rounded to float32 so that AEMB storage is lossless.
    """
    if n_items < 1 or dim < 1 or n_users < 0:
        raise UsageError("n_items and dim must be positive")
    if not 1 <= cluster_count <= n_items:
        raise UsageError("cluster_count must lie in [1, n_items]")
    lo, hi = int(seq_len_range[0]), int(seq_len_range[1])
    if lo < 3 or hi < lo:
        raise UsageError("seq_len_range must satisfy 3 <= low <= high")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    item_cluster = np.empty(n_items, dtype=np.int64)
    item_cluster[perm] = np.arange(n_items) % cluster_count
    rings = [perm[c::cluster_count] for c in range(cluster_count)]

    centers = rng.normal(size=(cluster_count, dim))
    emb = centers[item_cluster] + noise * rng.normal(size=(n_items, dim))
    emb = emb.astype(np.float32).astype(np.float64)

    users = []
    for u in range(n_users):
        length = int(rng.integers(lo, hi + 1))
        ring = rings[int(rng.integers(cluster_count))]
        pos = int(rng.integers(len(ring)))
        seq = []
        for t in range(length):
            if t == 0 or rng.random() < stay_prob:
                seq.append(int(ring[pos % len(ring)]))
            else:
                seq.append(int(rng.integers(n_items)))
            pos += 1
        users.append((u, seq))

    table = EmbeddingTable(emb, info={"row_norms": np.linalg.norm(emb, axis=1), "item_cluster": item_cluster})
    dataset = InteractionDataset(
        n_items,
        users,
        info={"emitted_interactions": sum(len(s) for _, s in users), "item_cluster": item_cluster},
    )
    return table, dataset


__all__ = [
    "EmbeddingTable",
    "FrequencyBins",
    "InteractionDataset",
    "five_core_filter",
    "frequency_bin_assign",
    "load_embeddings",
    "load_interactions",
    "save_embeddings",
    "save_interactions",
    "synth_dataset",
]
