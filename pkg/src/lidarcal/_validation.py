"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils import check_array


def as_cloud(X) -> np.ndarray:
    """Return ``X`` as a finite float array of shape (n, 3)."""
    if hasattr(X, "points"):
        X = X.points
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size == 3:
        X = X.reshape(1, 3)
    if X.size == 0:
        return np.zeros((0, 3))
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {X.shape}")
    return X


def as_pixels(Y) -> np.ndarray:
    Y = check_array(np.asarray(Y, dtype=float).reshape(-1, 2), dtype=float)
    return Y
