"""Small dense vector/matrix helpers with reproducible float64 numerics.

Every function validates its operands, works on plain numpy arrays and
returns new float64 arrays. Results are bit-identical across repeated
calls in the same build; `dot` fixes left-to-right accumulation so its
value does not depend on any BLAS reduction strategy.
"""

import numpy as np

from .errors import DimensionMismatch, ZeroVector

EPS_NORM = 1e-12


def _as_vector(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm. Raises ZeroVector if ||v|| <= 1e-12."""
    a = _as_vector(v)
    n = float(np.linalg.norm(a))
    if n <= EPS_NORM:
        raise ZeroVector(f"norm {n!r} is below the zero guard {EPS_NORM}")
    return a / n


def dot(a, b) -> float:
    """Sum of products accumulated strictly left to right."""
    x = _as_vector(a, "a")
    y = _as_vector(b, "b")
    if x.shape != y.shape:
        raise DimensionMismatch(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.size == 0:
        return 0.0
    # cumsum is sequential by definition, so the last prefix is the
    # left-to-right accumulation of the elementwise products.
    return float(np.cumsum(x * y)[-1])


def matvec(w, v) -> np.ndarray:
    """Standard matrix-vector product W @ v."""
    m = _as_matrix(w, "W")
    x = _as_vector(v, "v")
    if m.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"W has {m.shape[1]} cols but v has length {x.shape[0]}")
    return m @ x


def add(a, b) -> np.ndarray:
    x = _as_vector(a, "a")
    y = _as_vector(b, "b")
    if x.shape != y.shape:
        raise DimensionMismatch(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    return x + y


def scale(v, c) -> np.ndarray:
    return _as_vector(v) * float(c)


def axpy(alpha, x, y) -> np.ndarray:
    """alpha * x + y."""
    a = _as_vector(x, "x")
    b = _as_vector(y, "y")
    if a.shape != b.shape:
        raise DimensionMismatch(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(alpha) * a + b
