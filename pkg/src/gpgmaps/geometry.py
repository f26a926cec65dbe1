"""Core spatial types: rigid transforms, point clouds, boxes, 2D k-d tree."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class Pose3:
    """Rigid transform in 3D: rotation as unit quaternion (x, y, z, w), translation in meters."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        t = np.asarray(self.trans, dtype=float)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rt(rotmat: np.ndarray, trans) -> "Pose3":
        q = Rotation.from_matrix(np.asarray(rotmat, dtype=float)).as_quat()
        return Pose3(q, np.asarray(trans, dtype=float))

    @staticmethod
    def from_yaw(yaw: float, trans=(0.0, 0.0, 0.0)) -> "Pose3":
        q = Rotation.from_euler("z", yaw).as_quat()
        return Pose3(q, np.asarray(trans, dtype=float))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose3":
        mat = np.asarray(mat, dtype=float)
        return Pose3.from_rt(mat[:3, :3], mat[:3, 3])

    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.trans
        return m

    def yaw(self) -> float:
        return Rotation.from_quat(self.quat).as_euler("zyx")[0]


def compose(a: Pose3, b: Pose3) -> Pose3:
    """Compose two poses: the result applies b first, then a."""
    ra = Rotation.from_quat(a.quat)
    rb = Rotation.from_quat(b.quat)
    return Pose3((ra * rb).as_quat(), ra.apply(b.trans) + a.trans)


def invert(p: Pose3) -> Pose3:
    r_inv = Rotation.from_quat(p.quat).inv()
    return Pose3(r_inv.as_quat(), -r_inv.apply(p.trans))


def apply(p: Pose3, pt) -> np.ndarray:
    """Rigid action R @ pt + t. Accepts a single point or an (n, 3) array."""
    pt = np.asarray(pt, dtype=float)
    return Rotation.from_quat(p.quat).apply(pt) + p.trans


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform; theta normalized to (-pi, pi]."""

    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        t = math.remainder(self.theta, 2.0 * math.pi)
        if t <= -math.pi:
            t += 2.0 * math.pi
        object.__setattr__(self, "theta", t)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation().T + np.array([self.tx, self.ty])


@dataclass
class PointCloud:
    """Ordered (n, 3) point set in a gravity-aligned frame (z is elevation)."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]

    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    def z(self) -> np.ndarray:
        return self.points[:, 2]

    def aabb(self) -> "Aabb":
        if len(self) == 0:
            raise ValueError("empty cloud has no bounding box")
        xy = self.points[:, :2]
        return Aabb(xy.min(axis=0), xy.max(axis=0))

    def transformed(self, pose: Pose3) -> "PointCloud":
        return PointCloud(apply(pose, self.points), self.frame_id)


def load_cloud_csv(path) -> PointCloud:
    """Read a cloud from CSV with one `x,y,z` row per point; `#` lines are comments."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split(",")])
    return PointCloud(np.array(rows, dtype=float))


def save_cloud_csv(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# x,y,z\n")
        for x, y, z in cloud.points:
            f.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n")


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in the x-y plane."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if np.any(lo > hi):
            raise ValueError(f"invalid box: min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def area(self) -> float:
        ext = self.max - self.min
        return float(ext[0] * ext[1])

    def inflated(self, amount: float) -> "Aabb":
        return Aabb(self.min - amount, self.max + amount)

    def contains(self, xy) -> bool:
        xy = np.asarray(xy, dtype=float)
        return bool(np.all(xy >= self.min) and np.all(xy <= self.max))


def aabb_iou(a: Aabb, b: Aabb) -> float:
    """Intersection over union of two boxes; 0 when the union is degenerate."""
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    if np.any(hi <= lo):
        inter = 0.0
    else:
        inter = float(np.prod(hi - lo))
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


class KdTree2:
    """Spatial index over the x-y coordinates of a fixed point set.

    Backed by a balanced k-d tree; query results are membership-identical to an
    exhaustive scan, and nearest-neighbor ties resolve to the lowest index.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Sorted indices of all points with distance <= radius from center."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        idx = self._tree.query_ball_point(np.asarray(center, dtype=float), radius)
        return np.array(sorted(idx), dtype=int)

    def nearest(self, center) -> int:
        """Index of the closest point; equidistant ties break to the lowest index."""
        center = np.asarray(center, dtype=float)
        dist, idx = self._tree.query(center)
        if dist == 0.0:
            cand = self._tree.query_ball_point(center, 0.0)
            return int(min(cand))
        # re-query a slightly inflated ball so exact ties are all visible
        cand = self._tree.query_ball_point(center, dist * (1.0 + 1e-12))
        d2 = np.sum((self.points[cand] - center) ** 2, axis=1)
        best = d2.min()
        winners = [c for c, d in zip(cand, d2) if d <= best]
        return int(min(winners)) if winners else int(idx)
