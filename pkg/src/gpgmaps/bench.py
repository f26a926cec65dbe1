"""Fit-time scaling measurements for the interpolated and dense GP paths."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geometry import Aabb
from .gp_exact import fit_exact
from .kernels import SeKernelParams
from .ski import CgOptions, build_grid, fit_ski
from .synth import TerrainSpec, terrain_eval

SKI_SIZES = (1000, 2000, 4000, 8000)
EXACT_SIZES = (250, 500, 1000)


@dataclass
class BenchRow:
    method: str
    n: int
    fit_seconds: float
    cg_iters: int


def _terrain_samples(n: int, extent: float, seed: int, params: SeKernelParams):
    spec = TerrainSpec.random_field(
        Aabb([0.0, 0.0], [extent, extent]), n_bumps=30, seed=seed,
        amplitude_range=(0.1, 0.4), sigma_range=(0.3, 0.8),
    )
    rng = np.random.default_rng(seed)
    xy = rng.random((n, 2)) * extent
    z, _, _ = terrain_eval(spec, xy[:, 0], xy[:, 1])
    z = z + rng.normal(0, params.sigma_z, n)
    return xy, z


def _limit_blas_threads():
    """Single-threaded BLAS keeps the timing points comparable across sizes."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        import contextlib

        return contextlib.nullcontext()


def run_ski_bench(
    sizes=SKI_SIZES, seed: int = 0, params: SeKernelParams | None = None, repeats: int = 3
) -> list[BenchRow]:
    """Fit times with a fixed inducing grid shared by all sizes."""
    params = params or SeKernelParams(sigma_f=0.5, length_scale=0.5, sigma_z=0.05)
    extent = 10.0
    grid = build_grid(
        Aabb([0.0, 0.0], [extent, extent]),
        spacing=0.15,
        margin=0.3 + 2 * params.length_scale,
    )
    opts = CgOptions(rel_tol=1e-6, max_iters=8000)
    rows = []
    with _limit_blas_threads():
        for n in sizes:
            xy, z = _terrain_samples(n, extent, seed, params)
            best = np.inf
            iters = 0
            for _ in range(repeats):
                t0 = time.perf_counter()
                model = fit_ski(xy, z, params, grid, opts)
                best = min(best, time.perf_counter() - t0)
                iters = model.cg_stats["iterations"]
            rows.append(BenchRow("ski", n, best, iters))
    return rows


def run_exact_bench(
    sizes=EXACT_SIZES, seed: int = 0, params: SeKernelParams | None = None, repeats: int = 7
) -> list[BenchRow]:
    params = params or SeKernelParams(sigma_f=0.5, length_scale=0.5, sigma_z=0.05)
    rows = []
    with _limit_blas_threads():
        for n in sizes:
            xy, z = _terrain_samples(n, 10.0, seed, params)
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                fit_exact(xy, z, params, size_cap=max(n, 3000))
                best = min(best, time.perf_counter() - t0)
            rows.append(BenchRow("exact", n, best, 0))
    return rows


def loglog_slope(rows: list[BenchRow]) -> float:
    n = np.log([r.n for r in rows])
    t = np.log([max(r.fit_seconds, 1e-9) for r in rows])
    return float(np.polyfit(n, t, 1)[0])


def write_csv(path: str, rows: list[BenchRow]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,n,fit_seconds,cg_iters\n")
        for r in rows:
            f.write(f"{r.method},{r.n},{r.fit_seconds!r},{r.cg_iters}\n")
