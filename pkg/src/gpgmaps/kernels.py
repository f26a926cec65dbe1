"""Squared-exponential covariance and its analytic first derivatives."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class SeKernelParams:
    """Hyperparameters: signal std, length scale, observation noise std (all meters)."""

    sigma_f: float = 1.0
    length_scale: float = 1.0
    sigma_z: float = 0.05

    def __post_init__(self):
        if self.sigma_f <= 0 or self.length_scale <= 0 or self.sigma_z <= 0:
            raise ValueError("kernel parameters must be strictly positive")

    def to_json(self) -> str:
        return json.dumps(
            {"sigma_f": self.sigma_f, "length_scale": self.length_scale, "sigma_z": self.sigma_z}
        )

    @staticmethod
    def from_dict(d: dict) -> "SeKernelParams":
        return SeKernelParams(
            sigma_f=float(d["sigma_f"]),
            length_scale=float(d["length_scale"]),
            sigma_z=float(d["sigma_z"]),
        )


def k(params: SeKernelParams, a, b) -> float:
    """Covariance sigma_f^2 * exp(-|a-b|^2 / (2 l^2)) between two planar inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = float(np.sum((a - b) ** 2))
    return params.sigma_f**2 * np.exp(-0.5 * d2 / params.length_scale**2)


def dk_d1(params: SeKernelParams, a, b) -> np.ndarray:
    """Partial derivatives of k with respect to the first argument, (d/dax, d/day)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return -(a - b) / params.length_scale**2 * k(params, a, b)


def gram(params: SeKernelParams, X, Y) -> np.ndarray:
    """Covariance matrix with element (i, j) = k(X_i, Y_j)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    d2 = cdist(X, Y, metric="sqeuclidean")
    d2 *= -0.5 / params.length_scale**2
    np.exp(d2, out=d2)
    d2 *= params.sigma_f**2
    return d2


def cross_cov_and_grad(params: SeKernelParams, x, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row vector k(x, X) together with its derivatives w.r.t. x and y of the query.

    Returns (kvec, dkx, dky), each of length n.
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    diff = x[None, :] - X
    kvec = params.sigma_f**2 * np.exp(-0.5 * np.sum(diff**2, axis=1) / params.length_scale**2)
    dk = -diff / params.length_scale**2 * kvec[:, None]
    return kvec, dk[:, 0], dk[:, 1]


def gram_1d(params: SeKernelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unit-amplitude 1D SE factor exp(-(x_i - y_j)^2 / (2 l^2)).

    The 2D kernel separates as sigma_f^2 * kx * ky, which is what licenses the
    Kronecker-structured matvec over a regular grid.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    d = x[:, None] - y[None, :]
    return np.exp(-0.5 * d**2 / params.length_scale**2)
