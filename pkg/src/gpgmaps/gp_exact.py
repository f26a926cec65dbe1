"""Exact dense GP regression: the cubic-cost correctness oracle for the SKI path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .kernels import SeKernelParams, cross_cov_and_grad, gram

DEFAULT_SIZE_CAP = 3000


@dataclass
class ExactGp:
    params: SeKernelParams
    X: np.ndarray
    z_mean: float
    alpha: np.ndarray
    factor: tuple  # cached Cholesky of K + sigma_z^2 I


def fit_exact(X, z, params: SeKernelParams, size_cap: int = DEFAULT_SIZE_CAP) -> ExactGp:
    """Solve (K + sigma_z^2 I) alpha = z - mean(z) by dense Cholesky factorization."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    if X.shape[0] != z.shape[0]:
        raise ValueError(f"input/observation size mismatch: {X.shape[0]} vs {z.shape[0]}")
    if X.shape[0] < 1:
        raise ValueError("need at least one observation")
    if X.shape[0] > size_cap:
        raise ValueError(f"{X.shape[0]} observations exceed the dense-solve cap {size_cap}")
    K = gram(params, X, X)
    K[np.diag_indices_from(K)] += params.sigma_z**2
    factor = cho_factor(K, lower=True, overwrite_a=True, check_finite=False)
    z_mean = float(z.mean())
    alpha = cho_solve(factor, z - z_mean, check_finite=False)
    return ExactGp(params=params, X=X, z_mean=z_mean, alpha=alpha, factor=factor)


def exact_mean(gp: ExactGp, x) -> float:
    kvec, _, _ = cross_cov_and_grad(gp.params, np.asarray(x, dtype=float), gp.X)
    return gp.z_mean + float(kvec @ gp.alpha)


def exact_var(gp: ExactGp, x) -> float:
    x = np.asarray(x, dtype=float)
    kvec, _, _ = cross_cov_and_grad(gp.params, x, gp.X)
    v = gp.params.sigma_f**2 - float(kvec @ cho_solve(gp.factor, kvec))
    return max(v, 0.0)


def exact_deriv(gp: ExactGp, x) -> tuple[float, float]:
    """Elevation derivatives from the analytic kernel gradient against alpha."""
    _, dkx, dky = cross_cov_and_grad(gp.params, np.asarray(x, dtype=float), gp.X)
    return float(dkx @ gp.alpha), float(dky @ gp.alpha)
