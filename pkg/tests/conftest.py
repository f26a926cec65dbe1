import numpy as np
import pytest

from gpgmaps.geometry import Aabb, PointCloud, Pose3
from gpgmaps.kernels import SeKernelParams
from gpgmaps.synth import TerrainSpec


@pytest.fixture
def params():
    return SeKernelParams(sigma_f=1.0, length_scale=0.5, sigma_z=0.05)


@pytest.fixture
def bump_terrain():
    """A handful of bumps on a gentle plane over roughly [0, 6]^2."""
    return TerrainSpec.random_field(
        Aabb(np.array([0.0, 0.0]), np.array([6.0, 6.0])), n_bumps=8, seed=7,
        plane=(0.05, -0.02, 0.3),
    )


def sample_terrain(spec, n, bounds, seed, sigma_z=0.0):
    """Uniform noisy samples of a terrain over a box; returns (xy, z)."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    xy = lo + rng.random((n, 2)) * (hi - lo)
    from gpgmaps.synth import terrain_eval

    z, _, _ = terrain_eval(spec, xy[:, 0], xy[:, 1])
    if sigma_z > 0:
        z = z + rng.normal(0.0, sigma_z, size=n)
    return xy, z


# kernel scaled to the synthetic terrain below (sigma_f near the elevation std)
MATCH_PARAMS = SeKernelParams(sigma_f=0.4, length_scale=0.2, sigma_z=0.02)


def rich_terrain(seed=21, extent=6.0, n_bumps=120):
    """Bump field with feature sizes a few raster pixels wide."""
    return TerrainSpec.random_field(
        Aabb([0.0, 0.0], [extent, extent]),
        n_bumps=n_bumps,
        seed=seed,
        amplitude_range=(0.06, 0.22),
        sigma_range=(0.12, 0.32),
    )


def make_submap(terrain, pose, region, n=3000, seed=0, sigma_z=0.02, params=MATCH_PARAMS,
                resolution=0.04, map_id=-1):
    """Cloud sampled in a world box, expressed in the given LRF, built into a map."""
    from gpgmaps.gpgmap import build_gpgmap
    from gpgmaps.synth import terrain_eval

    rng = np.random.default_rng(seed)
    lo = np.asarray(region[0], dtype=float)
    hi = np.asarray(region[1], dtype=float)
    xy = lo + rng.random((n, 2)) * (hi - lo)
    z, _, _ = terrain_eval(terrain, xy[:, 0], xy[:, 1])
    if sigma_z > 0:
        z = z + rng.normal(0, sigma_z, n)
    world = np.column_stack([xy, z])
    lrf = (world - pose.trans) @ pose.rotation()
    return build_gpgmap(pose, PointCloud(lrf), params, resolution=resolution, map_id=map_id)


def make_map_pair(theta, offset=(0.7, -0.4), z_shift=0.8, terrain_seed=21, cloud_seeds=(1, 2)):
    """Two maps of the same world region from LRFs related by a known yaw + offset.

    Returns (map_a, map_b, true_relative) with true_relative mapping LRF-A
    coordinates into LRF-B.
    """
    from gpgmaps.geometry import compose, invert
    from gpgmaps.synth import terrain_eval

    terrain = rich_terrain(seed=terrain_seed)
    region = ([0.5, 0.5], [5.5, 5.5])
    center = np.array([3.0, 3.0])
    z0, _, _ = terrain_eval(terrain, center[0], center[1])
    pose_a = Pose3.from_yaw(0.0, (center[0], center[1], z0))
    pose_b = Pose3.from_yaw(theta, (center[0] + offset[0], center[1] + offset[1], z0 - z_shift))
    map_a = make_submap(terrain, pose_a, region, seed=cloud_seeds[0], map_id=0)
    map_b = make_submap(terrain, pose_b, region, seed=cloud_seeds[1], map_id=1)
    true_rel = compose(invert(pose_b), pose_a)
    return map_a, map_b, true_rel
