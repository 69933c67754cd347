"""Causal transformer decoder over projected item sequences.

All weights are stored in one flat ``{name: ndarray}`` dict. The forward
functions accept either raw arrays (inference) or tape-tracked :class:`Var`
values (training) under the same names.

Input representations, by variant:

``full``              gated expert mixture of the item embedding
``single-expert``     one wide perceptron of the item embedding
``discrete-input``    mean of learned per-(m, l) code embeddings
``continuous-output`` as ``full`` on input, but a regression head to the
                      target embedding instead of the code heads
"""

from dataclasses import dataclass, field

import numpy as np

from .. import msp
from ..errors import ConfigError, DimensionError
from ..numerics import ad

VARIANTS = ("full", "single-expert", "discrete-input", "continuous-output")
MASK_VALUE = -1e9


@dataclass
class RecConfig:
    d_m: int = 448
    n_layers: int = 2
    heads: int = 8
    max_len: int = 50
    dropout: float = 0.1
    lr: float = 0.003
    momentum: float = 0.9
    optimizer: str = "adam"
    batch: int = 256
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    experts: int = 3
    expert_hidden: int = 0  # 0 means d_m
    ffn_mult: int = 4
    head_hidden: int = 0  # 0 means d_m
    per_position: bool = True
    variant: str = "full"

    def __post_init__(self):
        if self.d_m < 1 or self.heads < 1 or self.d_m % self.heads:
            raise ConfigError(f"d_m={self.d_m} must be a positive multiple of heads={self.heads}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.patience < 0 or self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive and patience nonnegative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_len < 1 or self.n_layers < 0 or self.batch < 1:
            raise ConfigError("max_len and batch must be positive")

    @property
    def hidden_width(self) -> int:
        return self.expert_hidden or self.d_m

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.d_m


def sub(params: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def init_params(cfg: RecConfig, d: int, n_heads: int, K: int, rng) -> dict:
    """Fresh weights. ``n_heads`` is ``M * L``; ``d`` is the item embedding width."""
    d_m = cfg.d_m
    p = {}
    if cfg.variant in ("full", "continuous-output"):
        p.update({"msp." + k: v for k, v in msp.init_msp(rng, d, d_m, cfg.experts, cfg.hidden_width).items()})
    elif cfg.variant == "single-expert":
        p.update(
            {"msp." + k: v for k, v in msp.init_single_expert(rng, d, d_m, cfg.experts, cfg.hidden_width).items()}
        )
    else:
        p["code_emb"] = rng.normal(0.0, 1.0, size=(n_heads, K, d_m))
    p["pos"] = rng.normal(0.0, 0.02, size=(cfg.max_len, d_m))
    inner = cfg.ffn_mult * d_m
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.scale"] = np.ones(d_m)
        p[pre + "ln1.offset"] = np.zeros(d_m)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + w] = msp.glorot(rng, d_m, d_m)
        p[pre + "attn.bo"] = np.zeros(d_m)
        p[pre + "ln2.scale"] = np.ones(d_m)
        p[pre + "ln2.offset"] = np.zeros(d_m)
        p[pre + "ffn.w1"] = msp.glorot(rng, d_m, inner)
        p[pre + "ffn.b1"] = np.zeros(inner)
        p[pre + "ffn.w2"] = msp.glorot(rng, inner, d_m)
        p[pre + "ffn.b2"] = np.zeros(d_m)
    p["final.scale"] = np.ones(d_m)
    p["final.offset"] = np.zeros(d_m)
    if cfg.variant == "continuous-output":
        p["reg.w"] = msp.glorot(rng, d_m, d)
        p["reg.b"] = np.zeros(d)
    else:
        hw = cfg.head_width
        p["heads.w1"] = msp.glorot(rng, d_m, hw, (n_heads, d_m, hw))
        p["heads.b1"] = np.zeros((n_heads, 1, hw))
        p["heads.w2"] = msp.glorot(rng, hw, K, (n_heads, hw, K))
        p["heads.b2"] = np.zeros((n_heads, 1, K))
    return p


def item_inputs(params: dict, cfg: RecConfig, items: np.ndarray, embeddings: np.ndarray, codes=None):
    """Input representations for an integer array of item ids (any shape)."""
    items = np.asarray(items, dtype=np.int64)
    if cfg.variant == "discrete-input":
        return code_mean(params["code_emb"], codes[items])
    x = embeddings[items]
    if cfg.variant == "single-expert":
        return msp.single_expert_variant(sub(params, "msp."), x)
    return msp.forward(sub(params, "msp."), x)


def code_mean(code_emb, item_codes: np.ndarray):
    """Mean of the looked-up code embeddings; ``item_codes`` has shape ``(..., M*L)``."""
    item_codes = np.asarray(item_codes, dtype=np.int64)
    n_heads = item_codes.shape[-1]
    looked = ad.getitem(code_emb, (np.arange(n_heads), item_codes))  # (..., M*L, d_m)
    return looked.mean(axis=looked.ndim - 2)


def _dropout(x, rate: float, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), MASK_VALUE), k=1)


def attention(p: dict, x, n_heads: int, rng=None, rate: float = 0.0):
    B, T, d_m = x.shape
    dh = d_m // n_heads

    def split(t):
        return ad.transpose(t.reshape(B, T, n_heads, dh), (0, 2, 1, 3))

    q = split(ad.matmul(x, p["wq"]))
    k = split(ad.matmul(x, p["wk"]))
    v = split(ad.matmul(x, p["wv"]))
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dh)) + causal_mask(T)
    weights = _dropout(ad.softmax(scores, axis=-1), rate, rng)
    mixed = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(B, T, d_m)
    return ad.matmul(mixed, p["wo"]) + p["bo"]


def feed_forward(p: dict, x):
    return ad.matmul(ad.gelu(ad.matmul(x, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]


def decoder_layer(p: dict, x, n_heads: int, rng=None, rate: float = 0.0):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""
    a = attention(sub(p, "attn."), ad.layer_norm(x, p["ln1.scale"], p["ln1.offset"]), n_heads, rng, rate)
    x = x + _dropout(a, rate, rng)
    f = feed_forward(sub(p, "ffn."), ad.layer_norm(x, p["ln2.scale"], p["ln2.offset"]))
    return x + _dropout(f, rate, rng)


def decode(params: dict, cfg: RecConfig, h, rng=None):
    """Positions plus ``n_layers`` causal blocks and a final norm; ``h`` is ``(B, T, d_m)``."""
    h = ad.lift(h)
    T = h.shape[1]
    if T > cfg.max_len:
        raise DimensionError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    rate = cfg.dropout if rng is not None else 0.0
    x = h + ad.getitem(params["pos"], slice(0, T))
    x = _dropout(x, rate, rng)
    for i in range(cfg.n_layers):
        x = decoder_layer(sub(params, f"layer{i}."), x, cfg.heads, rng, rate)
    return ad.layer_norm(x, params["final.scale"], params["final.offset"])


def head_logits(params: dict, hidden):
    """Logits of every code head, shape ``(M*L, n, K)`` for hidden states ``(n, d_m)``."""
    hidden = ad.lift(hidden)
    if hidden.ndim == 1:
        hidden = hidden.reshape(1, -1)
    inner = ad.gelu(ad.matmul(hidden, params["heads.w1"]) + params["heads.b1"])
    return ad.matmul(inner, params["heads.w2"]) + params["heads.b2"]


def regression_output(params: dict, hidden):
    return ad.matmul(ad.lift(hidden), params["reg.w"]) + params["reg.b"]


@dataclass
class RecModel:
    config: RecConfig
    params: dict
    d: int
    n_heads: int
    K: int
    mhq_hash: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: RecConfig, d: int, n_heads: int, K: int, rng=None, mhq_hash: str = ""):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        return cls(cfg, init_params(cfg, d, n_heads, K, rng), d, n_heads, K, mhq_hash)

    @property
    def variant(self) -> str:
        return self.config.variant


def clip_context(items, max_len: int) -> list:
    items = list(items)
    return items[-max_len:]


def pad_batch(seqs: list, pad: int = 0):
    """Right-pad integer sequences; returns ``(ids (B, T), lengths (B,))``."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    return ids, lengths


def encode_items(params: dict, cfg: RecConfig, ids: np.ndarray, embeddings, codes=None, rng=None):
    """Hidden states ``(B, T, d_m)`` for a padded id batch. Padding sits after real items,
    so causal attention keeps it from influencing them."""
    h = item_inputs(params, cfg, ids, embeddings, codes)
    return decode(params, cfg, h, rng)


def encode_sequence(model: RecModel, inputs):
    """Final-layer hidden states ``(T, d_m)`` for one sequence of input representations
    or raw embeddings. Sequences longer than ``max_len`` keep the most recent items."""
    cfg = model.config
    x = np.asarray(ad.value_of(inputs), dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("encode_sequence expects a (T, d) matrix")
    x = x[-cfg.max_len :]
    if cfg.variant == "discrete-input":
        h = x
    elif cfg.variant == "single-expert":
        h = msp.single_expert_variant(sub(model.params, "msp."), x)
    else:
        h = msp.forward(sub(model.params, "msp."), x)
    return decode(model.params, cfg, ad.lift(h).reshape(1, x.shape[0], -1)).value[0]


def last_hidden(model: RecModel, contexts: list, embeddings, codes=None, chunk: int = 256) -> np.ndarray:
    """Final-position hidden state per context, shape ``(n, d_m)``."""
    cfg = model.config
    out = np.empty((len(contexts), cfg.d_m))
    for start in range(0, len(contexts), chunk):
        part = [clip_context(c, cfg.max_len) for c in contexts[start : start + chunk]]
        ids, lengths = pad_batch(part)
        H = encode_items(model.params, cfg, ids, embeddings, codes).value
        out[start : start + len(part)] = H[np.arange(len(part)), lengths - 1]
    return out


def code_log_probs(model: RecModel, hidden: np.ndarray) -> np.ndarray:
    """Per-head log-softmax, shape ``(M*L, n, K)``."""
    return ad.log_softmax(head_logits(model.params, hidden), axis=-1).value


def catalog_scores(model: RecModel, contexts: list, embeddings, codes=None) -> np.ndarray:
    """Score matrix ``(n_contexts, n_items)``.

    Code-head variants score an item as the sum over heads of the log-probability
    of its code index, which is exact constrained decoding over the catalog.
    The continuous-output variant scores by cosine similarity to its prediction.
    """
    hidden = last_hidden(model, contexts, embeddings, codes)
    if model.variant == "continuous-output":
        pred = regression_output(model.params, hidden).value
        return cosine_matrix(pred, embeddings)
    logp = code_log_probs(model, hidden)
    codes = np.asarray(codes, dtype=np.int64)
    scores = np.zeros((hidden.shape[0], codes.shape[0]))
    for h in range(codes.shape[1]):
        scores += logp[h][:, codes[:, h]]
    return scores


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = np.linalg.norm(a, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(an > 0, an, 1.0)) @ (b / np.where(bn > 0, bn, 1.0)).T
