import logging
from dataclasses import dataclass, field

import numpy as np

from .. import evaluation
from ..errors import ConfigError, DivergenceError
from ..numerics import Tape, ad, backward
from .model import (
    RecConfig,
    RecModel,
    catalog_scores,
    clip_context,
    encode_items,
    head_logits,
    pad_batch,
    regression_output,
)

log = logging.getLogger(__name__)


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: RecConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr)
    return SGDMomentum(cfg.lr, cfg.momentum)


def training_pairs(sequences, max_len: int) -> list:
    """Teacher-forcing (inputs, targets) pairs; keeps the most recent ``max_len + 1`` items."""
    out = []
    for seq in sequences:
        seq = clip_context(seq, max_len + 1)
        if len(seq) >= 2:
            out.append((seq[:-1], seq[1:]))
    return out


def _positions(lengths: np.ndarray, T: int, per_position: bool):
    """Flat (row * T + t) indices of the positions that carry a target."""
    rows = []
    for b, n in enumerate(lengths):
        ts = range(n) if per_position else [n - 1]
        rows.extend(b * T + t for t in ts)
    return np.array(rows, dtype=np.int64)


def batch_objective(params: dict, cfg: RecConfig, pairs: list, embeddings, codes=None, rng=None):
    """Mean training loss over every target position of a batch of pairs.

    Code heads: cross-entropy averaged over heads and positions.
    Continuous output: squared error to the target embedding averaged over
    positions and coordinates.
    """
    ids, lengths = pad_batch([p[0] for p in pairs])
    B, T = ids.shape
    targets = np.zeros((B, T), dtype=np.int64)
    for b, (_, tgt) in enumerate(pairs):
        targets[b, : len(tgt)] = tgt
    flat = _positions(lengths, T, cfg.per_position)
    H = encode_items(params, cfg, ids, embeddings, codes, rng)
    hidden = ad.getitem(H.reshape(B * T, cfg.d_m), flat)
    tgt_items = targets.reshape(-1)[flat]
    if cfg.variant == "continuous-output":
        diff = regression_output(params, hidden) - embeddings[tgt_items]
        return (diff * diff).mean()
    tgt_codes = np.asarray(codes)[tgt_items]  # (N, M*L)
    logp = ad.log_softmax(head_logits(params, hidden), axis=-1)  # (M*L, N, K)
    n_heads = logp.shape[0]
    picked = ad.getitem(logp, (np.arange(n_heads)[:, None], np.arange(len(flat))[None, :], tgt_codes.T))
    return -picked.mean()


def ce_loss(model: RecModel, sequences, codes, embeddings) -> float:
    """Cross-entropy of the code heads over the teacher-forced positions of ``sequences``."""
    if codes is None:
        raise ConfigError("ce_loss needs semantic codes for every item")
    codes = np.asarray(codes)
    if codes.shape[0] < embeddings.shape[0]:
        raise ConfigError(f"codes cover {codes.shape[0]} items but the catalog has {embeddings.shape[0]}")
    pairs = training_pairs(sequences, model.config.max_len)
    return float(batch_objective(model.params, model.config, pairs, embeddings, codes).value)


@dataclass
class TrainResult:
    model: RecModel
    history: list = field(default_factory=list)  # per epoch: loss, valid ndcg@10
    best_epoch: int = 0


def make_scorer(model: RecModel, embeddings, codes=None):
    return lambda contexts: catalog_scores(model, contexts, embeddings, codes)


def train(
    cfg: RecConfig,
    dataset,
    embeddings,
    codes=None,
    K: int | None = None,
    mhq_hash: str = "",
) -> TrainResult:
    """Gradient training with per-epoch validation NDCG@10 and early stopping.

    The returned model carries the weights of the best validation epoch.
    """
    embeddings = np.asarray(getattr(embeddings, "matrix", embeddings), dtype=np.float64)
    n_items, d = embeddings.shape
    if cfg.variant == "continuous-output":
        n_heads, K = 0, K or 1
    else:
        if codes is None:
            raise ConfigError("the code-head model needs semantic codes for every item")
        codes = np.asarray(codes, dtype=np.int64)
        if codes.shape[0] != n_items:
            raise ConfigError(f"codes cover {codes.shape[0]} items but the catalog has {n_items}")
        n_heads = codes.shape[1]
        K = K or int(codes.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    model = RecModel.create(cfg, d, n_heads, K, rng, mhq_hash)
    opt = make_optimizer(cfg)
    pairs = training_pairs([dataset.train(k) for k in range(len(dataset))], cfg.max_len)
    drop_rng = rng if cfg.dropout > 0 else None

    best, best_params, best_epoch, waited = -np.inf, None, 0, 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(pairs))
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, len(pairs), cfg.batch)):
            batch = [pairs[i] for i in order[start : start + cfg.batch]]
            tape = Tape()
            tracked = {k: tape.param(v, k) for k, v in model.params.items()}
            loss = batch_objective(tracked, cfg, batch, embeddings, codes, drop_rng)
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch} step {step}")
            grads = backward(tape, loss)
            opt.step(model.params, grads)
            total += value
            steps += 1
        report = evaluation.evaluate(make_scorer(model, embeddings, codes), dataset, "valid")
        history.append({"epoch": epoch, "loss": total / max(steps, 1), "valid_ndcg10": report.ndcg10})
        log.debug("rec epoch %d loss=%.5f valid ndcg@10=%.4f", epoch, history[-1]["loss"], report.ndcg10)
        if report.ndcg10 > best:
            best, best_epoch, waited = report.ndcg10, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            waited += 1
        if waited >= cfg.patience:
            break
    model.params = best_params
    return TrainResult(model, history, best_epoch)
