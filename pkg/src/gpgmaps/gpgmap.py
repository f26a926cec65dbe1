"""GPGMap construction: elevation, variance, and gradient rasters plus features.

A map carries the pose of its local reference frame, the parent cloud, the
three rasters sampled at pixel centers over the cloud footprint, a confidence
mask, and the keypoints/descriptors extracted on the gradient image.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb, PointCloud, Pose3, load_cloud_csv, save_cloud_csv
from .kernels import SeKernelParams
from .ski import (
    CgOptions,
    SkiModel,
    build_grid,
    fit_ski,
    gradient_magnitude,
    ski_deriv_batch,
    ski_mean_batch,
    variance_proxy_batch,
)

DEFAULT_MASK_THRESHOLD = 0.5  # mask keeps cells with confidence >= threshold * sigma_f^2


@dataclass
class Raster:
    """Row-major scalar grid; pixel (u, v) sits at world (origin_x + r*u, origin_y + r*v)."""

    values: np.ndarray  # shape (height, width), indexed [v, u]
    origin_x: float
    origin_y: float
    resolution: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError("raster values must be a non-empty 2D grid")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def sample(self, u, v) -> float:
        """Value at the nearest pixel to subpixel coordinates (u, v)."""
        ui = int(round(float(u)))
        vi = int(round(float(v)))
        if not (0 <= ui < self.width and 0 <= vi < self.height):
            raise IndexError(f"pixel ({u}, {v}) outside {self.width}x{self.height} raster")
        return float(self.values[vi, ui])


def pixel_to_local(raster: Raster, u, v, z: float = 0.0) -> np.ndarray:
    """World-frame point of pixel (u, v) at elevation z."""
    if not (0 <= u < raster.width and 0 <= v < raster.height):
        raise IndexError(f"pixel ({u}, {v}) outside raster")
    return np.array([raster.origin_x + raster.resolution * u, raster.origin_y + raster.resolution * v, z])


def local_to_pixel(raster: Raster, x: float, y: float) -> tuple[int, int]:
    """Nearest pixel to a local-frame planar coordinate."""
    u = int(round((x - raster.origin_x) / raster.resolution))
    v = int(round((y - raster.origin_y) / raster.resolution))
    if not (0 <= u < raster.width and 0 <= v < raster.height):
        raise IndexError(f"point ({x:.3f}, {y:.3f}) outside raster footprint")
    return u, v


@dataclass
class GpgMap:
    pose: Pose3
    cloud: PointCloud
    elevation: Raster
    variance: Raster
    gradient: Raster
    mask: Raster  # boolean occupancy of confident cells
    keypoints: list = field(default_factory=list)
    descriptors: np.ndarray | None = None
    bow: object = None
    params: SeKernelParams | None = None
    map_id: int = -1

    def footprint(self) -> Aabb:
        r = self.elevation
        return Aabb(
            np.array([r.origin_x, r.origin_y]),
            np.array([r.origin_x + r.resolution * (r.width - 1), r.origin_y + r.resolution * (r.height - 1)]),
        )

    def world_footprint(self) -> Aabb:
        """Axis-aligned world box of the cloud under the current pose estimate."""
        return self.cloud.transformed(self.pose).aabb()


def _pixel_grid(bounds: Aabb, resolution: float) -> tuple[np.ndarray, np.ndarray, float, float]:
    ox, oy = float(bounds.min[0]), float(bounds.min[1])
    width = int(np.floor((bounds.max[0] - ox) / resolution)) + 1
    height = int(np.floor((bounds.max[1] - oy) / resolution)) + 1
    us = ox + resolution * np.arange(width)
    vs = oy + resolution * np.arange(height)
    return us, vs, ox, oy


def build_gpgmap(
    pose: Pose3,
    cloud: PointCloud,
    params: SeKernelParams,
    resolution: float,
    proxy_radius: float | None = None,
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    grid_spacing: float | None = None,
    cg_opts: CgOptions | None = None,
    feature_opts=None,
    map_id: int = -1,
) -> GpgMap:
    """Fit the SKI model on the cloud and raster the footprint at pixel centers."""
    from .features import FeatureOptions, compute_descriptors, detect_keypoints

    if len(cloud) == 0:
        raise ValueError("cannot build a map from an empty cloud")
    proxy_radius = proxy_radius if proxy_radius is not None else params.length_scale / 2
    grid_spacing = grid_spacing if grid_spacing is not None else 2 * resolution
    cg_opts = cg_opts or CgOptions(rel_tol=1e-6, max_iters=6000)
    bounds = cloud.aabb()
    grid = build_grid(bounds, grid_spacing, margin=2 * grid_spacing + 2 * params.length_scale)
    model = fit_ski(cloud.xy(), cloud.z(), params, grid, cg_opts)

    us, vs, ox, oy = _pixel_grid(bounds, resolution)
    uu, vv = np.meshgrid(us, vs)  # shape (height, width)
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    elev = ski_mean_batch(model, pts).reshape(vv.shape)
    gx, gy = ski_deriv_batch(model, pts)
    grad = gradient_magnitude(gx, gy).reshape(vv.shape)
    conf, var = variance_proxy_batch(model, pts, proxy_radius)
    conf = conf.reshape(vv.shape)
    var = var.reshape(vv.shape)
    mask = conf >= mask_threshold * params.sigma_f**2

    mk = lambda a: Raster(a, ox, oy, resolution)
    gmap = GpgMap(
        pose=pose,
        cloud=cloud,
        elevation=mk(elev),
        variance=mk(var),
        gradient=mk(grad),
        mask=mk(mask),
        params=params,
        map_id=map_id,
    )
    opts = feature_opts or FeatureOptions()
    gmap.keypoints = detect_keypoints(gmap.gradient, mask, opts)
    gmap.descriptors, gmap.keypoints = compute_descriptors(gmap.gradient, gmap.keypoints, opts)
    return gmap


# ---------------------------------------------------------------------------
# file formats: <name>.f32 little-endian row-major floats + <name>.json header


def save_raster(path_base: str, raster: Raster) -> None:
    arr = np.ascontiguousarray(raster.values, dtype="<f4")
    with open(path_base + ".f32", "wb") as f:
        f.write(arr.tobytes())
    header = {
        "width": raster.width,
        "height": raster.height,
        "origin_x": raster.origin_x,
        "origin_y": raster.origin_y,
        "resolution": raster.resolution,
    }
    with open(path_base + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True, indent=1)


def load_raster(path_base: str) -> Raster:
    with open(path_base + ".json", "r", encoding="utf-8") as f:
        h = json.load(f)
    data = np.fromfile(path_base + ".f32", dtype="<f4").astype(float)
    values = data.reshape(h["height"], h["width"])
    return Raster(values, h["origin_x"], h["origin_y"], h["resolution"])


def save_pgm_preview(path: str, raster: Raster) -> None:
    """8-bit PGM render, low-to-high mapped over the value range."""
    v = np.asarray(raster.values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((v - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def save_gpgmap(out_dir: str, gmap: GpgMap, previews: bool = False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_cloud_csv(os.path.join(out_dir, "cloud.csv"), gmap.cloud)
    for name, raster in (
        ("elevation", gmap.elevation),
        ("variance", gmap.variance),
        ("gradient", gmap.gradient),
    ):
        save_raster(os.path.join(out_dir, name), raster)
        if previews:
            save_pgm_preview(os.path.join(out_dir, name + ".pgm"), raster)
    save_raster(os.path.join(out_dir, "mask"), Raster(
        gmap.mask.values.astype(np.float32), gmap.mask.origin_x, gmap.mask.origin_y, gmap.mask.resolution,
    ))
    meta = {
        "map_id": gmap.map_id,
        "pose": gmap.pose.matrix().tolist(),
        "params": json.loads(gmap.params.to_json()) if gmap.params else None,
        "keypoints": [
            {"u": kp.u, "v": kp.v, "scale": kp.scale, "orientation": kp.orientation, "response": kp.response}
            for kp in gmap.keypoints
        ],
        "descriptors": base64.b64encode(
            np.ascontiguousarray(gmap.descriptors, dtype="<f4").tobytes()
        ).decode("ascii")
        if gmap.descriptors is not None and len(gmap.descriptors)
        else "",
    }
    with open(os.path.join(out_dir, "map.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_gpgmap(in_dir: str) -> GpgMap:
    from .features import Keypoint

    with open(os.path.join(in_dir, "map.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    mask_raster = load_raster(os.path.join(in_dir, "mask"))
    keypoints = [Keypoint(**kp) for kp in meta["keypoints"]]
    if meta["descriptors"]:
        raw = base64.b64decode(meta["descriptors"])
        desc = np.frombuffer(raw, dtype="<f4").astype(float).reshape(len(keypoints), -1)
    else:
        desc = np.zeros((0, 128))
    gmap = GpgMap(
        pose=Pose3.from_matrix(np.array(meta["pose"])),
        cloud=load_cloud_csv(os.path.join(in_dir, "cloud.csv")),
        elevation=load_raster(os.path.join(in_dir, "elevation")),
        variance=load_raster(os.path.join(in_dir, "variance")),
        gradient=load_raster(os.path.join(in_dir, "gradient")),
        mask=Raster(mask_raster.values > 0.5, mask_raster.origin_x, mask_raster.origin_y, mask_raster.resolution),
        keypoints=keypoints,
        descriptors=desc,
        params=SeKernelParams.from_dict(meta["params"]) if meta["params"] else None,
        map_id=int(meta.get("map_id", -1)),
    )
    return gmap
