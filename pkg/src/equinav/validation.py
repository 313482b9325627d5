"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


def check_image_tuples(X, min_views=1):
    """(N, V, H, W) image tuples, uint8 or float in [0, 1]; a (N, V, 1, H, W) axis is squeezed."""
    X = np.asarray(X)
    if X.ndim == 5 and X.shape[2] == 1:
        X = X[:, :, 0]
    if X.ndim != 4:
        raise ValueError(f"expected image tuples of shape (N, V, H, W), got {X.shape}")
    if X.shape[1] < min_views:
        raise ValueError(f"need at least {min_views} viewpoints, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ValueError("empty image array")
    if X.dtype != np.uint8:
        X = X.astype(np.float32)
        if not np.isfinite(X).all():
            raise ValueError("images contain non-finite values")
    return X


def check_embeddings(Z, dim=None):
    Z = check_array(Z, dtype=np.float32, ensure_2d=True)
    if dim is not None and Z.shape[1] != dim:
        raise ValueError(f"embedding dimension {Z.shape[1]} does not match {dim}")
    return Z


def check_actions(A, n, dim=None):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    A = check_array(A, dtype=np.float64, ensure_2d=True)
    if len(A) != n:
        raise ValueError(f"{len(A)} actions for {n} embeddings")
    if dim is not None and A.shape[1] != dim:
        raise ValueError(f"action dimension {A.shape[1]} does not match {dim}")
    return A
