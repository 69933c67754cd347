import numpy as np

from ..errors import DimensionError, NumericError

JACOBI_MAX_DIM = 512


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    Every output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    regardless of how many rows are in the batch, so a row's result never
    depends on its neighbours or on BLAS blocking.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul result")


def _round_robin(n: int):
    """Yield rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            yield np.array(pairs, dtype=np.int64)
        players = [players[0]] + [players[-1]] + players[1:-1]


def _hestenes(u: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    # one-sided Jacobi: rotate column pairs until all columns are mutually orthogonal,
    # which diagonalises u^T u implicitly
    n = u.shape[1]
    rounds = list(_round_robin(n))
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore", divide="ignore"):
                # an infinite zeta means the pair is already orthogonal: t = 0
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
        if not rotated:
            break
    return np.sqrt(np.einsum("ij,ij->j", u, u))


def svd_values(a) -> np.ndarray:
    """Singular values of ``a`` in descending order (length ``min(rows, cols)``)."""
    a = as_matrix(a)
    if a.size == 0:
        raise DimensionError("svd of an empty matrix")
    check_finite(a, "svd input")
    if a.shape[0] < a.shape[1]:
        a = a.T
    if a.shape[1] > JACOBI_MAX_DIM:
        sigma = np.linalg.svd(a, compute_uv=False)
    else:
        sigma = _hestenes(a.copy())
    return np.sort(sigma)[::-1].copy()
