"""Gated mixture of perceptron experts mapping item embeddings to model width.

Parameters live in a flat dict so they can be tracked on a tape::

    gate (d, E)      softmax gate, no bias
    w1 (E, d, h)     b1 (E, 1, h)
    w2 (E, h, d_m)   b2 (E, 1, d_m)

The single-expert ablation uses the same keys with ``E = 1`` and a hidden width
of ``E * h`` and no gate.
"""

import numpy as np

from .numerics import ad


def glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_msp(rng, d: int, d_m: int, E: int = 3, hidden: int | None = None) -> dict:
    h = hidden or d_m
    return {
        "gate": glorot(rng, d, E),
        "w1": glorot(rng, d, h, (E, d, h)),
        "b1": np.zeros((E, 1, h)),
        "w2": glorot(rng, h, d_m, (E, h, d_m)),
        "b2": np.zeros((E, 1, d_m)),
    }


def init_single_expert(rng, d: int, d_m: int, E: int = 3, hidden: int | None = None) -> dict:
    h = (hidden or d_m) * E
    return {
        "w1": glorot(rng, d, h, (1, d, h)),
        "b1": np.zeros((1, 1, h)),
        "w2": glorot(rng, h, d_m, (1, h, d_m)),
        "b2": np.zeros((1, 1, d_m)),
    }


def n_params(p: dict) -> int:
    return int(sum(np.asarray(ad.value_of(v)).size for v in p.values()))


def _flatten(x):
    x = ad.lift(x)
    lead = x.shape[:-1]
    return x.reshape(-1, x.shape[-1]), lead


def gate(p: dict, x):
    """Expert weights on the probability simplex, shape ``x.shape[:-1] + (E,)``."""
    flat, lead = _flatten(x)
    alpha = ad.softmax(ad.matmul(flat, p["gate"]), axis=-1)
    return alpha.reshape(lead + (alpha.shape[-1],))


def expert_outputs(p: dict, flat):
    """All expert outputs for a batch of rows, shape ``(E, n, d_m)``."""
    hidden = ad.gelu(ad.matmul(flat, p["w1"]) + p["b1"])
    return ad.matmul(hidden, p["w2"]) + p["b2"]


def forward(p: dict, x):
    """Dense mixture ``sum_e alpha_e * f_e(x)`` over every expert."""
    flat, lead = _flatten(x)
    alpha = ad.softmax(ad.matmul(flat, p["gate"]), axis=-1)  # (n, E)
    outs = expert_outputs(p, flat)  # (E, n, d_m)
    weights = ad.transpose(alpha).reshape(alpha.shape[1], alpha.shape[0], 1)
    h = (weights * outs).sum(axis=0)
    return h.reshape(lead + (h.shape[-1],))


def single_expert_variant(p: dict, x):
    flat, lead = _flatten(x)
    h = expert_outputs(p, flat)[0]
    return h.reshape(lead + (h.shape[-1],))
