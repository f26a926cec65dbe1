"""Synthetic 2.5D terrain with analytic gradients, plus trajectory/submap simulation.

Terrain is a plane plus Gaussian bumps, so elevation and slope have closed
forms that regression output can be checked against. The simulator walks a
waypoint path, drops a submap every fixed arc length, samples a noisy cloud in
the footprint, and accumulates seeded drift on the odometry chain.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb, PointCloud, Pose3, compose, invert, load_cloud_csv, save_cloud_csv


@dataclass
class TerrainSpec:
    plane: tuple[float, float, float] = (0.0, 0.0, 0.0)  # z = a x + b y + c
    bumps: list[tuple[tuple[float, float], float, float]] = field(default_factory=list)
    # each bump: ((cx, cy), amplitude, sigma)
    seed: int = 0

    def __post_init__(self):
        for (_, _), _, sig in self.bumps:
            if sig <= 0:
                raise ValueError("bump sigma must be positive")

    @staticmethod
    def random_field(
        bounds: Aabb,
        n_bumps: int,
        seed: int,
        amplitude_range=(0.2, 0.7),
        sigma_range=(0.5, 1.4),
        plane=(0.0, 0.0, 0.0),
    ) -> "TerrainSpec":
        """Scatter seeded Gaussian bumps over a region."""
        rng = np.random.default_rng(seed)
        ext = bounds.max - bounds.min
        bumps = []
        for _ in range(n_bumps):
            c = bounds.min + rng.random(2) * ext
            a = rng.uniform(*amplitude_range) * rng.choice([-1.0, 1.0])
            s = rng.uniform(*sigma_range)
            bumps.append(((float(c[0]), float(c[1])), float(a), float(s)))
        return TerrainSpec(plane=plane, bumps=bumps, seed=seed)

    def to_dict(self) -> dict:
        return {"plane": list(self.plane), "bumps": [[list(c), a, s] for c, a, s in self.bumps], "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "TerrainSpec":
        return TerrainSpec(
            plane=tuple(d["plane"]),
            bumps=[((c[0], c[1]), a, s) for c, a, s in d["bumps"]],
            seed=int(d.get("seed", 0)),
        )


def terrain_eval(spec: TerrainSpec, x, y):
    """Closed-form elevation and gradient: (z, dz/dx, dz/dy). Broadcasts over arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a, b, c = spec.plane
    z = a * x + b * y + c
    gx = np.full_like(z, a, dtype=float)
    gy = np.full_like(z, b, dtype=float)
    for (cx, cy), amp, sig in spec.bumps:
        dx = x - cx
        dy = y - cy
        bump = amp * np.exp(-0.5 * (dx**2 + dy**2) / sig**2)
        z = z + bump
        gx = gx - dx / sig**2 * bump
        gy = gy - dy / sig**2 * bump
    if z.ndim == 0:
        return float(z), float(gx), float(gy)
    return z, gx, gy


@dataclass
class SimConfig:
    waypoints: list[tuple[float, float]]
    submap_spacing: float = 4.0
    footprint_half_width: float = 3.0
    sample_density: float = 40.0  # points per m^2
    sigma_z: float = 0.02
    odom_sigma_trans: float = 0.0  # meters of drift per meter traveled
    odom_sigma_yaw: float = 0.0  # radians of drift per meter traveled
    seed: int = 0

    def __post_init__(self):
        if self.submap_spacing <= 0 or self.footprint_half_width <= 0 or self.sample_density <= 0:
            raise ValueError("spacings and densities must be positive")


@dataclass
class Submap:
    id: int
    timestamp: float
    true_pose: Pose3
    odom_pose: Pose3
    cloud: PointCloud  # in the local reference frame
    footprint: Aabb  # ground-truth world footprint


@dataclass
class Dataset:
    terrain: TerrainSpec
    config: SimConfig | None
    submaps: list[Submap]

    def true_poses(self) -> list[Pose3]:
        return [s.true_pose for s in self.submaps]

    def odom_poses(self) -> list[Pose3]:
        return [s.odom_pose for s in self.submaps]


def _walk_path(waypoints: np.ndarray, spacing: float) -> list[tuple[np.ndarray, float]]:
    """Sample (position, heading) every `spacing` meters of arc length."""
    stations = []
    dist_next = 0.0
    for k in range(len(waypoints) - 1):
        p0, p1 = waypoints[k], waypoints[k + 1]
        seg = p1 - p0
        seg_len = float(np.linalg.norm(seg))
        if seg_len < 1e-12:
            continue
        heading = math.atan2(seg[1], seg[0])
        while dist_next <= seg_len - 1e-9:
            pos = p0 + seg * (dist_next / seg_len)
            stations.append((pos, heading))
            dist_next += spacing
        dist_next -= seg_len
    if not stations:
        raise ValueError("path shorter than one submap spacing")
    return stations


def simulate(spec: TerrainSpec, cfg: SimConfig) -> Dataset:
    """Generate submaps along the path with seeded elevation noise and odometry drift."""
    wps = np.asarray(cfg.waypoints, dtype=float)
    if wps.shape[0] < 2:
        raise ValueError("need at least two waypoints")
    stations = _walk_path(wps, cfg.submap_spacing)
    rng = np.random.default_rng(cfg.seed)

    true_poses = []
    for pos, heading in stations:
        z0, _, _ = terrain_eval(spec, pos[0], pos[1])
        true_poses.append(Pose3.from_yaw(heading, (pos[0], pos[1], z0)))

    # odometry: chain the true relative motions with drift proportional to step length
    odom_poses = [true_poses[0]]
    for i in range(1, len(true_poses)):
        rel = compose(invert(true_poses[i - 1]), true_poses[i])
        step = float(np.linalg.norm(rel.trans[:2]))
        if cfg.odom_sigma_trans > 0 or cfg.odom_sigma_yaw > 0:
            dt = rng.normal(0.0, cfg.odom_sigma_trans * step, size=2)
            dyaw = rng.normal(0.0, cfg.odom_sigma_yaw * step)
            noise = Pose3.from_yaw(dyaw, (dt[0], dt[1], 0.0))
            rel = compose(rel, noise)
        odom_poses.append(compose(odom_poses[-1], rel))

    half = cfg.footprint_half_width
    n_pts = max(1, int(round(cfg.sample_density * (2 * half) ** 2)))
    submaps = []
    for i, ((pos, _), t_pose, o_pose) in enumerate(zip(stations, true_poses, odom_poses)):
        sub_rng = np.random.default_rng((cfg.seed, i))
        xy = pos + sub_rng.uniform(-half, half, size=(n_pts, 2))
        z, _, _ = terrain_eval(spec, xy[:, 0], xy[:, 1])
        if cfg.sigma_z > 0:
            z = z + sub_rng.normal(0.0, cfg.sigma_z, size=n_pts)
        pts_world = np.column_stack([xy, z])
        pts_lrf = (pts_world - t_pose.trans) @ t_pose.rotation()
        footprint = Aabb(xy.min(axis=0), xy.max(axis=0))
        submaps.append(
            Submap(
                id=i,
                timestamp=float(i),
                true_pose=t_pose,
                odom_pose=o_pose,
                cloud=PointCloud(pts_lrf, frame_id=f"lrf_{i}"),
                footprint=footprint,
            )
        )
    return Dataset(terrain=spec, config=cfg, submaps=submaps)


FIGURE8_WAYPOINTS = [
    (0.0, 0.0),
    (12.0, 0.0),
    (0.0, 8.0),
    (12.0, 8.0),
    (0.0, 0.0),
    (12.0, 8.0),
    (0.0, 8.0),
    (12.0, 0.0),
    (0.0, 0.0),
]
"""Crossed double loop (an 8 drawn with straight strokes) traversed twice, the
second lap reversed: every leg is revisited from the opposite direction."""


def format_pose_line(t: float, p: Pose3) -> str:
    vals = [t, *p.trans, *p.quat]
    return " ".join(repr(float(v)) for v in vals) + "\n"


def parse_trajectory(path) -> list[tuple[float, Pose3]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            t, x, y, z, qx, qy, qz, qw = vals
            out.append((t, Pose3(np.array([qx, qy, qz, qw]), np.array([x, y, z]))))
    return out


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "terrain.json"), "w", encoding="utf-8") as f:
        json.dump(ds.terrain.to_dict(), f, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "trajectory_gt.txt"), "w", encoding="utf-8") as f:
        f.write("# timestamp x y z qx qy qz qw\n")
        for s in ds.submaps:
            f.write(format_pose_line(s.timestamp, s.true_pose))
    with open(os.path.join(out_dir, "odometry.txt"), "w", encoding="utf-8") as f:
        f.write("# timestamp x y z qx qy qz qw\n")
        for s in ds.submaps:
            f.write(format_pose_line(s.timestamp, s.odom_pose))
    for s in ds.submaps:
        save_cloud_csv(os.path.join(out_dir, f"submap_{s.id}.csv"), s.cloud)
        meta = {
            "id": s.id,
            "timestamp": s.timestamp,
            "odom_pose": s.odom_pose.matrix().tolist(),
            "true_pose": s.true_pose.matrix().tolist(),
            "footprint": {"min": s.footprint.min.tolist(), "max": s.footprint.max.tolist()},
        }
        with open(os.path.join(out_dir, f"submap_{s.id}.pose.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, sort_keys=True, indent=1)


def load_dataset(in_dir) -> Dataset:
    with open(os.path.join(in_dir, "terrain.json"), "r", encoding="utf-8") as f:
        terrain = TerrainSpec.from_dict(json.load(f))
    submaps = []
    k = 0
    while os.path.exists(os.path.join(in_dir, f"submap_{k}.pose.json")):
        with open(os.path.join(in_dir, f"submap_{k}.pose.json"), "r", encoding="utf-8") as f:
            meta = json.load(f)
        cloud = load_cloud_csv(os.path.join(in_dir, f"submap_{k}.csv"))
        fp = meta["footprint"]
        submaps.append(
            Submap(
                id=meta["id"],
                timestamp=float(meta["timestamp"]),
                true_pose=Pose3.from_matrix(np.array(meta["true_pose"])),
                odom_pose=Pose3.from_matrix(np.array(meta["odom_pose"])),
                cloud=cloud,
                footprint=Aabb(np.array(fp["min"]), np.array(fp["max"])),
            )
        )
        k += 1
    if not submaps:
        raise FileNotFoundError(f"no submaps found in {in_dir}")
    return Dataset(terrain=terrain, config=None, submaps=submaps)
