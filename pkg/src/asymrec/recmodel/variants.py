import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import msp
from ..errors import ConfigError
from ..evaluation import rank_items
from ..numerics import ad
from .model import RecConfig, RecModel, catalog_scores, code_mean, decode, sub
from .train import TrainResult, train


@dataclass
class ScoredCandidates:
    items: np.ndarray  # ranked item ids
    scores: np.ndarray  # matching scores, non-increasing

    def __iter__(self):
        return iter(zip(self.items.tolist(), self.scores.tolist()))

    def top(self, k: int) -> list:
        return self.items[:k].tolist()


def score_catalog(model: RecModel, context, embeddings, codes=None) -> ScoredCandidates:
    scores = catalog_scores(model, [list(context)], embeddings, codes)[0]
    order = rank_items(scores)
    return ScoredCandidates(order, scores[order])


def continuous_output_variant_train(cfg: RecConfig, dataset, embeddings) -> TrainResult:
    """Same encoder, one regression head onto the target embedding (squared error)."""
    return train(dataclasses.replace(cfg, variant="continuous-output"), dataset, embeddings)


def discrete_input_variant(model: RecModel, code_sequence) -> np.ndarray:
    """Hidden states ``(T, d_m)`` for a sequence of flat item codes ``(T, M*L)``."""
    if "code_emb" not in model.params:
        raise ConfigError("model has no code-embedding table")
    codes = np.asarray(code_sequence, dtype=np.int64)[-model.config.max_len :]
    h = code_mean(model.params["code_emb"], codes)
    return decode(model.params, model.config, h.reshape(1, codes.shape[0], -1)).value[0]


def input_representations(model: RecModel, embeddings, codes=None) -> np.ndarray:
    """Per-item input representation ``(n_items, d_m)`` fed to the decoder."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if model.variant == "discrete-input":
        return code_mean(model.params["code_emb"], np.asarray(codes)).value
    p = sub(model.params, "msp.")
    if model.variant == "single-expert":
        return msp.single_expert_variant(p, embeddings).value
    return ad.value_of(msp.forward(p, embeddings))
