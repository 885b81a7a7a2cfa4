import warnings

import numpy as np


class DegenerateInput(UserWarning):
    """Feature matrix has fewer independent directions than requested components."""


def pca_reduce(features: np.ndarray, out_dim: int = 6, rank_tol: float = 1e-10):
    """Project mean-centered rows onto the top ``out_dim`` principal axes.

    Returns ``(reduced [N, out_dim], basis [D, out_dim])``.  Basis columns are
    orthonormal and ordered by decreasing variance.  If the data has rank
    below ``out_dim`` the missing components are zero columns and a
    :class:`DegenerateInput` warning is issued.
    """
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} rows, got {n}")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    centered = X - X.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each axis is positive
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    vt *= np.where(flip == 0, 1.0, flip)[:, None]
    rank = int((sv > rank_tol * max(sv[0] if len(sv) else 0.0, 1e-300)).sum())
    basis = np.zeros((d, out_dim))
    k = min(rank, out_dim)
    basis[:, :k] = vt[:k].T
    if k < out_dim:
        warnings.warn(f"feature rank {rank} < {out_dim}; padding with zero components", DegenerateInput, stacklevel=2)
    return centered @ basis, basis


def captured_variance(features: np.ndarray, basis: np.ndarray) -> float:
    """Total variance of the centered data along the basis columns (divisor N - 1)."""
    X = np.asarray(features, dtype=np.float64)
    proj = (X - X.mean(axis=0)) @ basis
    return float((proj**2).sum() / (len(X) - 1))
