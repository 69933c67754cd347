from . import autodiff as ad
from .autodiff import Tape, Var, backward
from .gradcheck import GradCheckReport, finite_difference_check, reverse_mode_grads
from .linalg import check_finite, matmul, svd_values

__all__ = [
    "GradCheckReport",
    "Tape",
    "Var",
    "ad",
    "backward",
    "check_finite",
    "finite_difference_check",
    "matmul",
    "reverse_mode_grads",
    "svd_values",
]
