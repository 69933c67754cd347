from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    VARIANTS,
    RecConfig,
    RecModel,
    catalog_scores,
    code_log_probs,
    code_mean,
    encode_sequence,
    head_logits,
    last_hidden,
)
from .train import TrainResult, batch_objective, ce_loss, make_scorer, train
from .variants import (
    ScoredCandidates,
    continuous_output_variant_train,
    discrete_input_variant,
    input_representations,
    score_catalog,
)

__all__ = [
    "VARIANTS",
    "RecConfig",
    "RecModel",
    "ScoredCandidates",
    "TrainResult",
    "batch_objective",
    "catalog_scores",
    "ce_loss",
    "code_log_probs",
    "code_mean",
    "continuous_output_variant_train",
    "discrete_input_variant",
    "encode_sequence",
    "head_logits",
    "input_representations",
    "last_hidden",
    "load_checkpoint",
    "make_scorer",
    "save_checkpoint",
    "score_catalog",
    "train",
]
