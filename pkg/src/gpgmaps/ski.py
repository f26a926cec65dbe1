"""Structured kernel interpolation over a regular inducing grid.

Fitting solves (W K_UU W^T + sigma_z^2 I) alpha = z - mean(z) with conjugate
gradients, where W holds sparse local interpolation weights. A coefficient
vector K_UU (W^T alpha) is cached so that every later mean or derivative query
costs a 16-entry dot product. Derivatives come from differentiating the
interpolation weights, so gradients are inferred from elevation-only
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from .geometry import Aabb, KdTree2
from .kernels import SeKernelParams, gram_1d, k as kernel_k

DEFAULT_MAX_CELLS = 4_000_000
DENSE_GRID_LIMIT = 64  # below this node count the dense kernel is materialized directly


class SkiFitError(RuntimeError):
    """Raised when the CG solve fails to reach the requested tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class GridBoundaryError(ValueError):
    """Raised when a query lacks full cubic-interpolation support inside the grid."""


@dataclass(frozen=True)
class InducingGrid:
    origin: np.ndarray  # world coords of node (0, 0), meters
    spacing: float
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")
        if self.nx < 4 or self.ny < 4:
            raise ValueError("cubic interpolation needs at least 4 nodes per axis")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def axis_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + self.spacing * np.arange(self.nx)
        ys = self.origin[1] + self.spacing * np.arange(self.ny)
        return xs, ys


@dataclass
class CgOptions:
    rel_tol: float = 1e-6
    max_iters: int = 1000
    preconditioner: str = "none"  # "none" | "diagonal"

    def __post_init__(self):
        if self.rel_tol <= 0 or self.max_iters < 1:
            raise ValueError("invalid CG options")
        if self.preconditioner not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SkiModel:
    grid: InducingGrid
    params: SeKernelParams
    z_mean: float
    u_coeffs: np.ndarray
    train_xy: np.ndarray
    kdtree: KdTree2
    cg_stats: dict = field(default_factory=dict)


def build_grid(
    bounds: Aabb, spacing: float, margin: float, max_cells: int = DEFAULT_MAX_CELLS
) -> InducingGrid:
    """Regular grid covering bounds expanded by margin, origin snapped to a spacing multiple."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    lo = bounds.min - margin
    hi = bounds.max + margin
    ox = np.floor(lo[0] / spacing) * spacing
    oy = np.floor(lo[1] / spacing) * spacing
    nx = int(np.ceil((hi[0] - ox) / spacing)) + 1
    ny = int(np.ceil((hi[1] - oy) / spacing)) + 1
    nx = max(nx, 4)
    ny = max(ny, 4)
    if nx * ny > max_cells:
        raise ValueError(f"grid of {nx}x{ny} nodes exceeds the {max_cells}-cell cap")
    return InducingGrid(origin=np.array([ox, oy]), spacing=spacing, nx=nx, ny=ny)


def _cubic_1d(g: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Catmull-Rom (cubic convolution, a = -0.5) stencil along one axis.

    g is the query in grid units. Returns (i0, w, dw) with i0 the base node of
    the 4-point stencil {i0-1 .. i0+2}, w the weights and dw = dw/dg.
    """
    g = np.asarray(g, dtype=float)
    i0 = np.floor(g).astype(int)
    # exact hit on the last feasible node: shift the stencil left (s becomes 1)
    i0 = np.where((i0 > n - 3) & (g <= n - 2 + 1e-9), n - 3, i0)
    bad = (i0 < 1) | (i0 > n - 3)
    if np.any(bad):
        raise GridBoundaryError(
            f"query at grid coordinate {g[bad].flat[0]:.4f} lacks cubic support (axis size {n})"
        )
    s = g - i0
    s2 = s * s
    s3 = s2 * s
    w = np.stack(
        [
            0.5 * (-s3 + 2.0 * s2 - s),
            0.5 * (3.0 * s3 - 5.0 * s2 + 2.0),
            0.5 * (-3.0 * s3 + 4.0 * s2 + s),
            0.5 * (s3 - s2),
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            0.5 * (-3.0 * s2 + 4.0 * s - 1.0),
            0.5 * (9.0 * s2 - 10.0 * s),
            0.5 * (-9.0 * s2 + 8.0 * s + 1.0),
            0.5 * (3.0 * s2 - 2.0 * s),
        ],
        axis=-1,
    )
    return i0, w, dw


def interp_weights_batch(
    grid: InducingGrid, xy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Tensor-product cubic weights for a batch of queries.

    Returns (indices, w, dwx, dwy), each (n, 16). Weight rows sum to 1 and the
    derivative rows to 0; derivative rows are d/dx of the weight polynomial
    scaled by 1/spacing.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    gx = (xy[:, 0] - grid.origin[0]) / grid.spacing
    gy = (xy[:, 1] - grid.origin[1]) / grid.spacing
    ix0, wx, dwx = _cubic_1d(gx, grid.nx)
    iy0, wy, dwy = _cubic_1d(gy, grid.ny)
    offs = np.array([-1, 0, 1, 2])
    node_ix = ix0[:, None] + offs[None, :]  # (n, 4)
    node_iy = iy0[:, None] + offs[None, :]
    idx = (node_ix[:, :, None] * grid.ny + node_iy[:, None, :]).reshape(-1, 16)
    w = (wx[:, :, None] * wy[:, None, :]).reshape(-1, 16)
    dx = (dwx[:, :, None] * wy[:, None, :]).reshape(-1, 16) / grid.spacing
    dy = (wx[:, :, None] * dwy[:, None, :]).reshape(-1, 16) / grid.spacing
    return idx, w, dx, dy


def interp_weights(grid: InducingGrid, x) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-query version of interp_weights_batch."""
    idx, w, dx, dy = interp_weights_batch(grid, np.asarray(x, dtype=float).reshape(1, 2))
    return idx[0], w[0], dx[0], dy[0]


def _axis_factors(grid: InducingGrid, params: SeKernelParams) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = grid.axis_nodes()
    return gram_1d(params, xs, xs), gram_1d(params, ys, ys)


def kuu_dense(grid: InducingGrid, params: SeKernelParams) -> np.ndarray:
    """Materialized inducing-point kernel; oracle path for small grids."""
    kx, ky = _axis_factors(grid, params)
    return params.sigma_f**2 * np.kron(kx, ky)


def kuu_matvec(grid: InducingGrid, params: SeKernelParams, v: np.ndarray) -> np.ndarray:
    """K_UU @ v through the Kronecker structure of the separable SE kernel."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != grid.n_nodes:
        raise ValueError(f"vector length {v.shape[0]} != grid size {grid.n_nodes}")
    if grid.n_nodes < DENSE_GRID_LIMIT:
        return kuu_dense(grid, params) @ v
    kx, ky = _axis_factors(grid, params)
    V = v.reshape(grid.nx, grid.ny)
    return (params.sigma_f**2 * (kx @ V @ ky)).ravel()


def cg_solve(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    opts: CgOptions | None = None,
    m_inv_diag: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float, bool]:
    """Conjugate gradients for an SPD operator.

    Returns (x, iterations, relative_residual, converged). Fixed accumulation
    order, so results are bit-reproducible for identical inputs.
    """
    opts = opts or CgOptions()
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0, 0.0, True
    z = r * m_inv_diag if m_inv_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    iters = 0
    for iters in range(1, opts.max_iters + 1):
        Ap = matvec(p)
        alpha = rz / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        res = float(np.linalg.norm(r)) / b_norm
        if res <= opts.rel_tol:
            return x, iters, res, True
        z = r * m_inv_diag if m_inv_diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, iters, float(np.linalg.norm(r)) / b_norm, False


def _operator_diagonal(
    grid: InducingGrid, params: SeKernelParams, idx: np.ndarray, w: np.ndarray
) -> np.ndarray:
    """diag(W K_UU W^T) + sigma_z^2, computed rowwise in chunks."""
    xs, ys = grid.axis_nodes()
    nodes_x = xs[idx // grid.ny]
    nodes_y = ys[idx % grid.ny]
    n = idx.shape[0]
    out = np.empty(n)
    chunk = 1024
    inv2l2 = 0.5 / params.length_scale**2
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        px = nodes_x[lo:hi]
        py = nodes_y[lo:hi]
        d2 = (px[:, :, None] - px[:, None, :]) ** 2 + (py[:, :, None] - py[:, None, :]) ** 2
        k_local = params.sigma_f**2 * np.exp(-d2 * inv2l2)
        wc = w[lo:hi]
        out[lo:hi] = np.einsum("ni,nij,nj->n", wc, k_local, wc)
    return out + params.sigma_z**2


def fit_ski(
    X, z, params: SeKernelParams, grid: InducingGrid, opts: CgOptions | None = None
) -> SkiModel:
    """Fit the interpolated GP; all inputs must be interior to the grid."""
    opts = opts or CgOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    if X.shape[0] != z.shape[0]:
        raise ValueError(f"input/observation size mismatch: {X.shape[0]} vs {z.shape[0]}")
    if X.shape[0] < 1:
        raise ValueError("need at least one observation")
    idx, w, _, _ = interp_weights_batch(grid, X)
    n, m = X.shape[0], grid.n_nodes
    rows = np.repeat(np.arange(n), 16)
    W = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, m))
    Wt = W.T.tocsr()

    # kernel factors are fixed through the solve; build them once
    sigma_f2 = params.sigma_f**2
    if m < DENSE_GRID_LIMIT:
        k_dense = kuu_dense(grid, params)
        kuu = lambda v: k_dense @ v
    else:
        kx, ky = _axis_factors(grid, params)
        kuu = lambda v: (sigma_f2 * (kx @ v.reshape(grid.nx, grid.ny) @ ky)).ravel()

    def operator(v: np.ndarray) -> np.ndarray:
        return W @ kuu(Wt @ v) + params.sigma_z**2 * v

    z_mean = float(z.mean())
    b = z - z_mean
    m_inv = None
    if opts.preconditioner == "diagonal":
        m_inv = 1.0 / _operator_diagonal(grid, params, idx, w)
    alpha, iters, res, converged = cg_solve(operator, b, opts, m_inv)
    if not converged:
        raise SkiFitError(
            f"CG did not converge in {iters} iterations (relative residual {res:.3e})",
            residual=res,
        )
    u_coeffs = kuu(Wt @ alpha)
    return SkiModel(
        grid=grid,
        params=params,
        z_mean=z_mean,
        u_coeffs=u_coeffs,
        train_xy=X,
        kdtree=KdTree2(X),
        cg_stats={"iterations": iters, "residual": res},
    )


def ski_mean(model: SkiModel, x) -> float:
    idx, w, _, _ = interp_weights(model.grid, x)
    return model.z_mean + float(w @ model.u_coeffs[idx])


def ski_deriv(model: SkiModel, x) -> tuple[float, float]:
    idx, _, dx, dy = interp_weights(model.grid, x)
    return float(dx @ model.u_coeffs[idx]), float(dy @ model.u_coeffs[idx])


def ski_mean_batch(model: SkiModel, xy: np.ndarray) -> np.ndarray:
    idx, w, _, _ = interp_weights_batch(model.grid, xy)
    return model.z_mean + np.sum(w * model.u_coeffs[idx], axis=1)


def ski_deriv_batch(model: SkiModel, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx, _, dx, dy = interp_weights_batch(model.grid, xy)
    coeffs = model.u_coeffs[idx]
    return np.sum(dx * coeffs, axis=1), np.sum(dy * coeffs, axis=1)


def gradient_magnitude(gx, gy):
    """Slope magnitude sqrt(gx^2 + gy^2); works elementwise on arrays."""
    return np.hypot(gx, gy)


def variance_proxy(model: SkiModel, x, radius: float) -> tuple[float, float]:
    """Distance-to-data confidence and its variance complement.

    The anchor is the centroid of training inputs within `radius` of x (falling
    back to the nearest input). C = k(x, anchor) peaks at sigma_f^2 on top of
    data; V = sigma_f^2 + sigma_z^2 - C grows with distance and is the variance
    used by the downstream z-offset weighting.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=float)
    idxs = model.kdtree.radius_query(x, radius)
    if len(idxs) > 0:
        anchor = model.train_xy[idxs].mean(axis=0)
    else:
        anchor = model.train_xy[model.kdtree.nearest(x)]
    c = kernel_k(model.params, x, anchor)
    v = model.params.sigma_f**2 + model.params.sigma_z**2 - c
    return float(c), float(v)


def variance_proxy_batch(model: SkiModel, xy: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized variance proxy over many query points (raster path)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    tree = model.kdtree._tree
    lists = tree.query_ball_point(xy, radius, return_sorted=True)
    counts = np.array([len(l) for l in lists])
    anchors = np.empty_like(xy)
    has = counts > 0
    if np.any(has):
        flat = np.concatenate([lists[i] for i in np.nonzero(has)[0]])
        offsets = np.concatenate([[0], np.cumsum(counts[has])[:-1]])
        sums = np.add.reduceat(model.train_xy[flat], offsets, axis=0)
        anchors[has] = sums / counts[has, None]
    if np.any(~has):
        _, nearest = tree.query(xy[~has])
        anchors[~has] = model.train_xy[nearest]
    d2 = np.sum((xy - anchors) ** 2, axis=1)
    c = model.params.sigma_f**2 * np.exp(-0.5 * d2 / model.params.length_scale**2)
    v = model.params.sigma_f**2 + model.params.sigma_z**2 - c
    return c, v
