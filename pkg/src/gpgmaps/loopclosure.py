"""Pairwise map matching: candidate selection, SE(2) validation, 3D alignment.

Candidates come first from bag-of-words retrieval, then from bounding-box
overlap under the current pose estimates. A candidate passes validation when a
RANSAC-fit planar transform between the gradient images has enough inliers and
the per-correspondence elevation offsets, fused into a single Gaussian, keep
most Bhattacharyya distances under threshold. The accepted planar fit plus the
elevation offset compose into a relative pose between local reference frames,
refined by a yaw-only ICP on the parent clouds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .bow import BowDatabase, BowVector, db_query
from .geometry import Aabb, Pose2, Pose3, aabb_iou, compose, invert
from .gpgmap import GpgMap, Raster

MIN_INLIERS = 5
BHATTACHARYYA_GATE = 2.0
PASS_FRACTION = 0.70
DEFAULT_IOU_THRESHOLD = 0.2
DEFAULT_INFLATION = 2.0  # box inflation in units of planar position std


@dataclass
class CandidatePair:
    id_a: int
    id_b: int
    source: str  # "bow" | "overlap"
    priority: float

    def key(self) -> tuple[int, int]:
        return (self.id_a, self.id_b) if self.id_a < self.id_b else (self.id_b, self.id_a)


@dataclass
class Gaussian1:
    mu: float
    var: float

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("variance must be positive")


@dataclass
class RansacOptions:
    iterations: int = 2000
    inlier_tol_px: float = 3.0
    min_inliers: int = MIN_INLIERS
    seed: int = 0


@dataclass
class Se2Fit:
    transform: Pose2  # pixel units
    inliers: list[int]
    rmse_px: float


@dataclass
class MatchResult:
    relative_pose: Pose3  # maps LRF-1 coordinates into LRF-2
    information: np.ndarray
    icp_rmse: float
    inliers: int
    pass_fraction: float
    z_off: Gaussian1


@dataclass
class DbState:
    """What candidate selection sees: retrieval index, poses, and footprints."""

    bow_db: BowDatabase
    poses: dict[int, Pose3] = field(default_factory=dict)
    position_var: dict[int, float] = field(default_factory=dict)  # planar variance, m^2
    footprints: dict[int, Aabb] = field(default_factory=dict)
    matched: set = field(default_factory=set)
    vectors: dict[int, BowVector] = field(default_factory=dict)


def select_candidates(
    state: DbState,
    new_id: int,
    top_k: int = 2,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    inflation: float = DEFAULT_INFLATION,
) -> list[CandidatePair]:
    """BoW top-k first, then sufficiently overlapping boxes, no duplicates."""
    if new_id not in state.vectors:
        raise KeyError(f"map {new_id} not registered")
    queue: list[CandidatePair] = []
    seen = set()

    for other, score in db_query(state.bow_db, state.vectors[new_id], top_k=top_k, exclude_id=new_id):
        if score <= 0.0:
            continue  # zero similarity carries no appearance evidence
        pair = CandidatePair(new_id, other, "bow", score)
        if pair.key() in state.matched:
            continue
        seen.add(pair.key())
        queue.append(pair)

    new_box = state.footprints[new_id].inflated(
        inflation * math.sqrt(max(state.position_var.get(new_id, 0.0), 0.0))
    )
    overlaps = []
    for other in sorted(state.footprints):
        if other == new_id:
            continue
        box = state.footprints[other].inflated(
            inflation * math.sqrt(max(state.position_var.get(other, 0.0), 0.0))
        )
        iou = aabb_iou(new_box, box)
        if iou > iou_threshold:
            pair = CandidatePair(new_id, other, "overlap", iou)
            if pair.key() in state.matched or pair.key() in seen:
                continue
            overlaps.append(pair)
    overlaps.sort(key=lambda p: (-p.priority, p.id_b))
    queue.extend(overlaps)
    return queue


def _fit_rigid_2d(a: np.ndarray, b: np.ndarray) -> Pose2:
    """Least-squares rotation + translation mapping a onto b (2D Horn)."""
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    da = a - ca
    db = b - cb
    m = da.T @ db
    theta = math.atan2(m[0, 1] - m[1, 0], m[0, 0] + m[1, 1])
    c, s = math.cos(theta), math.sin(theta)
    r = np.array([[c, -s], [s, c]])
    t = cb - r @ ca
    return Pose2(theta, float(t[0]), float(t[1]))


def ransac_se2(
    pairs: list[tuple[np.ndarray, np.ndarray]] | np.ndarray, opts: RansacOptions | None = None
) -> Se2Fit | None:
    """Consensus rigid 2D transform mapping first points onto second points.

    Returns None (rejection) below the inlier threshold or with fewer than two
    pairs; deterministic for a fixed seed.
    """
    opts = opts or RansacOptions()
    if isinstance(pairs, np.ndarray) and pairs.ndim == 2 and pairs.shape[1] == 4:
        arr = pairs.astype(float, copy=False)
    else:
        arr = np.asarray([(p[0][0], p[0][1], p[1][0], p[1][1]) for p in pairs], dtype=float)
        arr = arr.reshape(-1, 4)
    n = arr.shape[0]
    if n < 2:
        return None
    src = arr[:, :2]
    dst = arr[:, 2:]
    rng = np.random.default_rng(opts.seed)
    samples = np.array([rng.choice(n, size=2, replace=False) for _ in range(opts.iterations)])
    d_src = src[samples[:, 1]] - src[samples[:, 0]]
    d_dst = dst[samples[:, 1]] - dst[samples[:, 0]]
    ok = (np.linalg.norm(d_src, axis=1) >= 1e-9) & (np.linalg.norm(d_dst, axis=1) >= 1e-9)
    theta = np.arctan2(d_dst[:, 1], d_dst[:, 0]) - np.arctan2(d_src[:, 1], d_src[:, 0])
    c, s = np.cos(theta), np.sin(theta)
    anchor_s = src[samples[:, 0]]
    anchor_d = dst[samples[:, 0]]
    tx = anchor_d[:, 0] - (c * anchor_s[:, 0] - s * anchor_s[:, 1])
    ty = anchor_d[:, 1] - (s * anchor_s[:, 0] + c * anchor_s[:, 1])
    # hypothesis k maps all sources: (iterations, n) error field
    px = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None]
    py = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None]
    err2 = (px - dst[None, :, 0]) ** 2 + (py - dst[None, :, 1]) ** 2
    counts = np.where(ok, (err2 <= opts.inlier_tol_px**2).sum(axis=1), 0)
    best_k = int(np.argmax(counts))  # first maximum: deterministic
    if counts[best_k] < opts.min_inliers:
        return None
    best_inliers = np.nonzero(err2[best_k] <= opts.inlier_tol_px**2)[0]
    # least-squares refinement over the consensus set, then re-gate once
    fit = _fit_rigid_2d(src[best_inliers], dst[best_inliers])
    err = np.linalg.norm(fit.apply(src) - dst, axis=1)
    inliers = np.nonzero(err <= opts.inlier_tol_px)[0]
    if len(inliers) < opts.min_inliers:
        return None
    fit = _fit_rigid_2d(src[inliers], dst[inliers])
    rmse = float(np.sqrt(np.mean(np.linalg.norm(fit.apply(src[inliers]) - dst[inliers], axis=1) ** 2)))
    return Se2Fit(transform=fit, inliers=[int(i) for i in inliers], rmse_px=rmse)


def estimate_z_offset(samples: list[tuple[float, float, float, float]]) -> Gaussian1:
    """Inverse-variance fusion of per-pair elevation offsets.

    Each sample is (z1, var1, z2, var2); the offset estimate minimizes
    sum((z - (z1-z2))^2 / (var1+var2)).
    """
    if not samples:
        raise ValueError("need at least one correspondence")
    num = 0.0
    den = 0.0
    for z1, v1, z2, v2 in samples:
        w = 1.0 / (v1 + v2)
        num += (z1 - z2) * w
        den += w
    return Gaussian1(mu=num / den, var=1.0 / den)


def bhattacharyya(g1: Gaussian1, g2: Gaussian1) -> float:
    ratio = g1.var / g2.var
    return 0.25 * math.log(0.25 * (ratio + 1.0 / ratio + 2.0)) + 0.25 * (g1.mu - g2.mu) ** 2 / (
        g1.var + g2.var
    )


def _keypoint_samples(map1: GpgMap, map2: GpgMap, fit: Se2Fit, pairs) -> list[tuple[float, float, float, float]]:
    """Elevation/variance readings at the inlier keypoint pixels of both maps."""
    out = []
    for idx in fit.inliers:
        i, j = pairs[idx]
        k1 = map1.keypoints[i]
        k2 = map2.keypoints[j]
        z1 = map1.elevation.sample(k1.u, k1.v)
        v1 = map1.variance.sample(k1.u, k1.v)
        z2 = map2.elevation.sample(k2.u, k2.v)
        v2 = map2.variance.sample(k2.u, k2.v)
        out.append((z1, max(v1, 1e-12), z2, max(v2, 1e-12)))
    return out


def validate_match(
    map1: GpgMap,
    map2: GpgMap,
    fit: Se2Fit,
    pairs,
    gate: float = BHATTACHARYYA_GATE,
    pass_fraction: float = PASS_FRACTION,
) -> tuple[bool, Gaussian1, float]:
    """Bhattacharyya check of aligned elevations; acceptance is strictly above pass_fraction."""
    samples = _keypoint_samples(map1, map2, fit, pairs)
    z_off = estimate_z_offset(samples)
    good = 0
    for z1, v1, z2, v2 in samples:
        d = bhattacharyya(Gaussian1(z1 - z_off.mu, v1), Gaussian1(z2, v2))
        if d < gate:
            good += 1
    frac = good / len(samples)
    return frac > pass_fraction, z_off, frac


def compose_se3(fit: Se2Fit, z_off: float, raster1: Raster, raster2: Raster) -> Pose3:
    """Relative pose between local reference frames from the pixel-space fit.

    The planar fit maps map-2 pixels onto map-1 pixels; origins convert pixel
    coordinates into each local frame. The product below mirrors that chain:
    LRF1 -> image1 -> image2 -> LRF2, so the result maps LRF-1 coordinates into
    LRF-2.
    """
    if not math.isclose(raster1.resolution, raster2.resolution, rel_tol=1e-9):
        raise ValueError(
            f"resolution mismatch: {raster1.resolution} vs {raster2.resolution}"
        )
    r = raster1.resolution
    o1 = Pose3(np.array([0, 0, 0, 1.0]), np.array([-raster1.origin_x, -raster1.origin_y, 0.0]))
    o2 = Pose3(np.array([0, 0, 0, 1.0]), np.array([-raster2.origin_x, -raster2.origin_y, 0.0]))
    mid = Pose3.from_yaw(
        fit.transform.theta, (r * fit.transform.tx, r * fit.transform.ty, z_off)
    )
    return compose(invert(o2), compose(invert(mid), o1))


def icp_4d(
    p1: np.ndarray,
    p2: np.ndarray,
    t_init: Pose3,
    max_iters: int = 30,
    max_corr_dist: float = 0.5,
    tol: float = 1e-6,
) -> tuple[Pose3, float]:
    """Point-to-point ICP restricted to x, y, z, yaw.

    Correspondences are nearest neighbors within max_corr_dist; the update is
    closed-form (yaw from the planar cross-covariance, translation from the 3D
    centroids). Roll and pitch never change relative to t_init.
    """
    p1 = np.asarray(p1, dtype=float).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=float).reshape(-1, 3)
    if len(p1) == 0 or len(p2) == 0:
        raise ValueError("empty cloud")
    tree = cKDTree(p2)
    pose = t_init
    rmse = float("nan")
    for it in range(max_iters):
        moved = (pose.rotation() @ p1.T).T + pose.trans
        dist, idx = tree.query(moved, distance_upper_bound=max_corr_dist)
        sel = np.isfinite(dist)
        if sel.sum() < 3:
            if it == 0:
                raise ValueError("no correspondences under the initial transform")
            break
        a = moved[sel]
        b = p2[idx[sel]]
        rmse = float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))
        ca, cb = a.mean(axis=0), b.mean(axis=0)
        da = a[:, :2] - ca[:2]
        db = b[:, :2] - cb[:2]
        m = da.T @ db
        dyaw = math.atan2(m[0, 1] - m[1, 0], m[0, 0] + m[1, 1])
        c, s = math.cos(dyaw), math.sin(dyaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t = cb - rot @ ca
        delta = Pose3.from_rt(rot, t)
        pose = compose(delta, pose)
        step = np.linalg.norm(delta.trans) + abs(dyaw)
        if step < tol:
            break
    moved = (pose.rotation() @ p1.T).T + pose.trans
    dist, idx = tree.query(moved, distance_upper_bound=max_corr_dist)
    sel = np.isfinite(dist)
    if sel.sum() >= 1:
        rmse = float(np.sqrt(np.mean(dist[sel] ** 2)))
    return pose, rmse


def information_from_rmse(rmse: float, char_radius: float, floor: float = 1e-3) -> np.ndarray:
    """Diagonal 6x6 information from the final ICP residual.

    Translation std is the residual (floored); rotation std scales it by the
    cloud's characteristic radius, since a rotation error of sigma_r displaces
    points by about sigma_r * radius.
    """
    if rmse < 0:
        raise ValueError("rmse must be non-negative")
    sigma_t = max(rmse, floor)
    sigma_r = sigma_t / max(char_radius, 1e-6)
    cov = np.diag([sigma_t**2] * 3 + [sigma_r**2] * 3)
    return np.linalg.inv(cov)


def cloud_char_radius(points: np.ndarray) -> float:
    """RMS planar radius about the centroid."""
    xy = np.asarray(points, dtype=float)[:, :2]
    centered = xy - xy.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))


@dataclass
class MatchOptions:
    strategy: str = "bidirectional"
    ransac: RansacOptions = field(default_factory=RansacOptions)
    gate: float = BHATTACHARYYA_GATE
    pass_fraction: float = PASS_FRACTION
    icp_max_corr_dist: float = 0.1
    icp_max_iters: int = 30


def match_maps(map1: GpgMap, map2: GpgMap, opts: MatchOptions | None = None) -> tuple[MatchResult | None, dict]:
    """Full pairwise validation; returns (result, diagnostics).

    The result is None on rejection; diagnostics name the failing stage.
    """
    from .features import match_features

    opts = opts or MatchOptions()
    diag: dict = {"stage": "features"}
    if map1.descriptors is None or map2.descriptors is None or not len(map1.descriptors) or not len(map2.descriptors):
        diag["reason"] = "no descriptors"
        return None, diag
    pairs = match_features(map1.descriptors, map2.descriptors, opts.strategy)
    diag["n_matches"] = len(pairs)
    if len(pairs) < 2:
        diag["reason"] = "too few descriptor matches"
        return None, diag

    # planar fit maps map-2 pixels onto map-1 pixels (see compose_se3)
    kp1 = np.array([(k.u, k.v) for k in map1.keypoints])
    kp2 = np.array([(k.u, k.v) for k in map2.keypoints])
    idx1 = np.array([i for i, _ in pairs])
    idx2 = np.array([j for _, j in pairs])
    pt_pairs = np.column_stack([kp2[idx2], kp1[idx1]])
    fit = ransac_se2(pt_pairs, opts.ransac)
    diag["stage"] = "ransac"
    if fit is None:
        diag["reason"] = "ransac rejected (inliers below threshold)"
        return None, diag
    diag["inliers"] = len(fit.inliers)

    accepted, z_off, frac = validate_match(map1, map2, fit, pairs, opts.gate, opts.pass_fraction)
    diag["stage"] = "bhattacharyya"
    diag["pass_fraction"] = frac
    diag["z_off"] = {"mu": z_off.mu, "var": z_off.var}
    if not accepted:
        diag["reason"] = f"pass fraction {frac:.2f} not above {opts.pass_fraction:.2f}"
        return None, diag

    pose0 = compose_se3(fit, z_off.mu, map1.elevation, map2.elevation)
    try:
        pose, rmse = icp_4d(
            map1.cloud.points,
            map2.cloud.points,
            pose0,
            max_iters=opts.icp_max_iters,
            max_corr_dist=opts.icp_max_corr_dist,
        )
    except ValueError as exc:
        diag["stage"] = "icp"
        diag["reason"] = str(exc)
        return None, diag
    info = information_from_rmse(rmse, cloud_char_radius(map1.cloud.points))
    diag["stage"] = "accepted"
    diag["icp_rmse"] = rmse
    diag["se2"] = {
        "theta": fit.transform.theta,
        "tx_px": fit.transform.tx,
        "ty_px": fit.transform.ty,
    }
    result = MatchResult(
        relative_pose=pose,
        information=info,
        icp_rmse=rmse,
        inliers=len(fit.inliers),
        pass_fraction=frac,
        z_off=z_off,
    )
    return result, diag
