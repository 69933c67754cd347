from dataclasses import dataclass

import numpy as np

from ..errors import UsageError
from .autodiff import Tape, Var, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} worst={self.worst_param}{list(self.worst_index or ())}"


def reverse_mode_grads(loss_fn, params: dict) -> dict:
    tape = Tape()
    tracked = {k: tape.param(v, k) for k, v in params.items()}
    loss = loss_fn(tracked)
    return backward(tape, loss)


def _eval(loss_fn, params: dict) -> float:
    out = loss_fn({k: Var(v) for k, v in params.items()})
    return float(np.asarray(out.value if isinstance(out, Var) else out).reshape(()))


def finite_difference_check(
    loss_fn,
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
    grads: dict | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` against central differences.

    ``loss_fn`` maps a dict of :class:`Var` to a scalar :class:`Var`. The
    per-coordinate error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    Pass ``grads`` to check a precomputed gradient instead of the tape's.
    ``max_coords`` samples that many coordinates per parameter (seeded).
    """
    if step <= 0 or tol <= 0:
        raise UsageError("step and tol must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if grads is None:
        grads = reverse_mode_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    worst, worst_param, worst_index, n = 0.0, None, None, 0
    for name, value in params.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = np.asarray(grads[name]).reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = _eval(loss_fn, params)
            flat[c] = orig - step
            down = _eval(loss_fn, params)
            flat[c] = orig
            numeric = (up - down) / (2 * step)
            err = abs(analytic[c] - numeric) / max(abs(analytic[c]), abs(numeric), floor)
            n += 1
            if err > worst or worst_param is None:
                worst = err
                worst_param = name
                worst_index = tuple(int(i) for i in np.unravel_index(c, value.shape))
    return GradCheckReport(worst < tol, float(worst), worst_param, worst_index, n)
