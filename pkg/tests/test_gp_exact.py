"""Dense GP against hand solves, finite differences, and analytic terrain."""

import numpy as np
import pytest

from gpgmaps.gp_exact import exact_deriv, exact_mean, exact_var, fit_exact
from gpgmaps.kernels import SeKernelParams, gram
from gpgmaps.synth import TerrainSpec, terrain_eval


def test_single_observation_interpolates():
    p = SeKernelParams(sigma_f=1.0, length_scale=0.5, sigma_z=1e-4)
    gp = fit_exact([[0.0, 0.0]], [1.7], p)
    assert abs(exact_mean(gp, [0.0, 0.0]) - 1.7) < 1e-6


def test_constant_observations_reproduced(params):
    rng = np.random.default_rng(0)
    X = rng.random((15, 2))
    gp = fit_exact(X, np.full(15, 3.3), params)
    for i in range(5):
        assert abs(exact_mean(gp, X[i]) - 3.3) < 1e-9


def test_alpha_matches_dense_solve(params):
    rng = np.random.default_rng(1)
    X = rng.random((20, 2)) * 2
    z = rng.normal(size=20)
    gp = fit_exact(X, z, params)
    K = gram(params, X, X) + params.sigma_z**2 * np.eye(20)
    want = np.linalg.solve(K, z - z.mean())
    assert np.allclose(gp.alpha, want, atol=1e-10)
    # solved system residual
    assert np.linalg.norm(K @ gp.alpha - (z - z.mean())) <= 1e-10 * max(np.linalg.norm(z), 1.0)


def test_mean_reverts_to_prior_far_away(params):
    rng = np.random.default_rng(2)
    X = rng.random((10, 2))
    z = rng.normal(size=10) + 5.0
    gp = fit_exact(X, z, params)
    far = np.array([100.0, 100.0])
    assert abs(exact_mean(gp, far) - gp.z_mean) < 1e-9


def test_var_bounds_and_far_field(params):
    rng = np.random.default_rng(3)
    X = rng.random((20, 2))
    gp = fit_exact(X, rng.normal(size=20), params)
    v_far = exact_var(gp, [50.0, 50.0])
    assert abs(v_far - params.sigma_f**2) < 1e-9
    v_near = exact_var(gp, X[0])
    assert 0.0 <= v_near < v_far
    K = gram(params, X, X) + params.sigma_z**2 * np.eye(20)
    x = np.array([0.4, 0.6])
    kv = gram(params, x[None, :], X)[0]
    want = params.sigma_f**2 - kv @ np.linalg.solve(K, kv)
    assert abs(exact_var(gp, x) - want) < 1e-10


def test_var_never_increases_with_data(params):
    rng = np.random.default_rng(8)
    X = rng.random((15, 2))
    z = rng.normal(size=15)
    gp_small = fit_exact(X[:10], z[:10], params)
    gp_full = fit_exact(X, z, params)
    for _ in range(20):
        q = rng.random(2)
        assert exact_var(gp_full, q) <= exact_var(gp_small, q) + 1e-9


def test_deriv_matches_finite_differences(params):
    rng = np.random.default_rng(4)
    X = rng.random((50, 2)) * 3
    z = np.sin(X[:, 0]) + 0.5 * X[:, 1]
    gp = fit_exact(X, z, params)
    h = 1e-4 * params.length_scale
    for _ in range(20):
        q = rng.random(2) * 3
        gx, gy = exact_deriv(gp, q)
        fx = (exact_mean(gp, q + [h, 0]) - exact_mean(gp, q - [h, 0])) / (2 * h)
        fy = (exact_mean(gp, q + [0, h]) - exact_mean(gp, q - [0, h])) / (2 * h)
        assert abs(gx - fx) < 1e-5
        assert abs(gy - fy) < 1e-5


def test_deriv_zero_at_single_point(params):
    gp = fit_exact([[1.0, 1.0]], [0.5], params)
    gx, gy = exact_deriv(gp, [1.0, 1.0])
    assert abs(gx) < 1e-12 and abs(gy) < 1e-12


def test_deriv_recovers_linear_ramp():
    p = SeKernelParams(sigma_f=1.0, length_scale=0.5, sigma_z=0.01)
    spec = TerrainSpec(plane=(0.4, 0.0, 0.0))
    rng = np.random.default_rng(5)
    X = rng.random((400, 2)) * 4
    z, _, _ = terrain_eval(spec, X[:, 0], X[:, 1])
    gp = fit_exact(X, z, p)
    gx, gy = exact_deriv(gp, [2.0, 2.0])
    assert abs(gx - 0.4) < 0.05 * 0.4
    assert abs(gy) < 0.02


def test_mirror_symmetry(params):
    rng = np.random.default_rng(6)
    X = rng.random((30, 2))
    z = rng.normal(size=30)
    gp = fit_exact(X, z, params)
    Xm = X.copy()
    Xm[:, 0] = -Xm[:, 0]
    gpm = fit_exact(Xm, z, params)
    q = np.array([0.3, 0.5])
    assert np.isclose(exact_mean(gp, q), exact_mean(gpm, [-q[0], q[1]]), atol=1e-10)


def test_fit_validation():
    p = SeKernelParams()
    with pytest.raises(ValueError):
        fit_exact([[0, 0], [1, 1]], [1.0], p)
    with pytest.raises(ValueError):
        fit_exact(np.zeros((10, 2)), np.zeros(10), p, size_cap=5)
