"""Keypoints and descriptors on raster images, difference-of-Gaussians style.

Detection runs a DoG scale-space scan with subpixel refinement, contrast and
edge rejection, and a 36-bin orientation vote (single orientation per
keypoint, no peak splitting, so output is deterministic). Descriptors are the
classic 4x4x8 orientation histograms of the numerical gradient of the input
image, rotation-normalized, L2-normalized, clamped at 0.2 and renormalized.
On a GPGMap the input is the elevation-gradient raster, so descriptors encode
the gradient of the elevation's gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .gpgmap import Raster

DESC_WIDTH = 4  # spatial histogram cells per side
DESC_ORI_BINS = 8
DESC_LEN = DESC_WIDTH * DESC_WIDTH * DESC_ORI_BINS
DESC_CLAMP = 0.2
DESC_LAMBDA = 2.5  # histogram cell side in units of keypoint scale; keeps windows inside small rasters


@dataclass
class FeatureOptions:
    n_octaves: int = 4
    scales_per_octave: int = 3
    sigma0: float = 1.6
    assumed_blur: float = 0.5
    contrast_frac: float = 0.02  # of the image dynamic range
    edge_ratio: float = 10.0
    ori_bins: int = 36
    ratio_threshold: float = 0.8


@dataclass
class Keypoint:
    u: float  # subpixel column in input-image coordinates
    v: float  # subpixel row
    scale: float  # blur sigma in input-image pixels
    orientation: float  # radians in (-pi, pi]
    response: float  # refined DoG contrast magnitude


class _ScaleSpace:
    """Gaussian pyramid with per-level DoG stacks and lazy gradients."""

    def __init__(self, image: np.ndarray, opts: FeatureOptions):
        self.opts = opts
        self.s_per_oct = opts.scales_per_octave
        img = np.asarray(image, dtype=float)
        max_oct = int(math.floor(math.log2(max(min(img.shape) / 8.0, 1.0)))) + 1
        self.n_octaves = max(1, min(opts.n_octaves, max_oct))
        k = 2.0 ** (1.0 / self.s_per_oct)
        self.sigmas = opts.sigma0 * k ** np.arange(self.s_per_oct + 3)  # octave-local blur
        seed_sigma = math.sqrt(max(opts.sigma0**2 - opts.assumed_blur**2, 0.01))
        self.gauss: list[list[np.ndarray]] = []
        self.dog: list[np.ndarray] = []
        base = gaussian_filter(img, seed_sigma)
        for _ in range(self.n_octaves):
            levels = [base]
            for s in range(1, self.s_per_oct + 3):
                inc = math.sqrt(self.sigmas[s] ** 2 - self.sigmas[s - 1] ** 2)
                levels.append(gaussian_filter(levels[-1], inc))
            self.gauss.append(levels)
            self.dog.append(np.stack([levels[s + 1] - levels[s] for s in range(self.s_per_oct + 2)]))
            base = levels[self.s_per_oct][::2, ::2]
        self._grads: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def gradient(self, octave: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        key = (octave, level)
        if key not in self._grads:
            img = self.gauss[octave][level]
            gy, gx = np.gradient(img)
            self._grads[key] = (gx, gy)
        return self._grads[key]


def _local_extrema(dog: np.ndarray, s: int, floor: float) -> np.ndarray:
    """Pixel coordinates (v, u) of strict 26-neighborhood extrema at DoG level s."""
    c = dog[s, 1:-1, 1:-1]
    strong = np.abs(c) > floor
    gt = np.ones_like(c, dtype=bool)
    lt = np.ones_like(c, dtype=bool)
    for ds in (-1, 0, 1):
        plane = dog[s + ds]
        for dv in (-1, 0, 1):
            for du in (-1, 0, 1):
                if ds == 0 and dv == 0 and du == 0:
                    continue
                n = plane[1 + dv : plane.shape[0] - 1 + dv, 1 + du : plane.shape[1] - 1 + du]
                gt &= c > n
                lt &= c < n
    vs, us = np.nonzero(strong & (gt | lt))
    return np.column_stack([vs + 1, us + 1])


def _refine(dog: np.ndarray, s: int, v: int, u: int, opts: FeatureOptions, contrast: float):
    """Quadratic subpixel refinement; returns (v, u, s, dv, du, ds, value) or None."""
    n_lvl, h, w = dog.shape
    for _ in range(5):
        d = dog
        dx = 0.5 * (d[s, v, u + 1] - d[s, v, u - 1])
        dy = 0.5 * (d[s, v + 1, u] - d[s, v - 1, u])
        dsg = 0.5 * (d[s + 1, v, u] - d[s - 1, v, u])
        dxx = d[s, v, u + 1] - 2 * d[s, v, u] + d[s, v, u - 1]
        dyy = d[s, v + 1, u] - 2 * d[s, v, u] + d[s, v - 1, u]
        dss = d[s + 1, v, u] - 2 * d[s, v, u] + d[s - 1, v, u]
        dxy = 0.25 * (d[s, v + 1, u + 1] - d[s, v + 1, u - 1] - d[s, v - 1, u + 1] + d[s, v - 1, u - 1])
        dxs = 0.25 * (d[s + 1, v, u + 1] - d[s + 1, v, u - 1] - d[s - 1, v, u + 1] + d[s - 1, v, u - 1])
        dys = 0.25 * (d[s + 1, v + 1, u] - d[s + 1, v - 1, u] - d[s - 1, v + 1, u] + d[s - 1, v - 1, u])
        H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        g = np.array([dx, dy, dsg])
        try:
            off = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            value = d[s, v, u] + 0.5 * g @ off
            if abs(value) < contrast:
                return None
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            r = opts.edge_ratio
            if det <= 0 or tr * tr * r >= det * (r + 1) ** 2:
                return None
            return v, u, s, off[0], off[1], off[2], value
        u += int(round(off[0]))
        v += int(round(off[1]))
        s += int(round(off[2]))
        if not (1 <= s < n_lvl - 1 and 1 <= v < h - 1 and 1 <= u < w - 1):
            return None
    return None


def _orientation(space: _ScaleSpace, octave: int, level: int, u: float, v: float, sigma_oct: float, opts: FeatureOptions) -> float:
    gx, gy = space.gradient(octave, level)
    h, w = gx.shape
    sig_w = 1.5 * sigma_oct
    radius = max(1, int(round(3.0 * sig_w)))
    ui, vi = int(round(u)), int(round(v))
    u0, u1 = max(ui - radius, 1), min(ui + radius, w - 2)
    v0, v1 = max(vi - radius, 1), min(vi + radius, h - 2)
    if u0 > u1 or v0 > v1:
        return 0.0
    px = gx[v0 : v1 + 1, u0 : u1 + 1]
    py = gy[v0 : v1 + 1, u0 : u1 + 1]
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1) - u, np.arange(v0, v1 + 1) - v)
    wgt = np.exp(-(uu**2 + vv**2) / (2 * sig_w**2))
    mag = np.hypot(px, py) * wgt
    ang = np.arctan2(py, px)
    nb = opts.ori_bins
    bins = np.floor((ang + math.pi) / (2 * math.pi) * nb).astype(int) % nb
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=nb)
    for _ in range(6):  # circular smoothing
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    b = int(np.argmax(hist))
    left = hist[(b - 1) % nb]
    right = hist[(b + 1) % nb]
    denom = left - 2 * hist[b] + right
    interp = 0.0 if abs(denom) < 1e-12 else 0.5 * (left - right) / denom
    theta = (b + 0.5 + interp) / nb * 2 * math.pi - math.pi
    if theta <= -math.pi:
        theta += 2 * math.pi
    elif theta > math.pi:
        theta -= 2 * math.pi
    return float(theta)


def _as_mask_array(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    values = mask.values if isinstance(mask, Raster) else np.asarray(mask)
    values = values.astype(bool)
    if values.shape != shape:
        raise ValueError(f"mask shape {values.shape} does not match image {shape}")
    return values


def detect_keypoints(image: Raster | np.ndarray, mask=None, opts: FeatureOptions | None = None) -> list[Keypoint]:
    """DoG extrema over a Gaussian scale space, masked, sorted by response."""
    opts = opts or FeatureOptions()
    img = image.values if isinstance(image, Raster) else np.asarray(image, dtype=float)
    img = img.astype(float)
    mask_arr = _as_mask_array(mask, img.shape)
    dyn = float(img.max() - img.min()) if img.size else 0.0
    if dyn <= 0.0 or min(img.shape) < 16:
        return []
    contrast = opts.contrast_frac * dyn
    space = _ScaleSpace(img, opts)
    found: dict[tuple[int, int, int], Keypoint] = {}
    for o in range(space.n_octaves):
        dog = space.dog[o]
        stride = 2.0**o
        for s in range(1, space.s_per_oct + 1):
            for v, u in _local_extrema(dog, s, 0.8 * contrast):
                ref = _refine(dog, s, v, u, opts, contrast)
                if ref is None:
                    continue
                rv, ru, rs, du, dv, ds, value = ref
                u_in = (ru + du) * stride
                v_in = (rv + dv) * stride
                sigma = opts.sigma0 * 2.0 ** (o + (rs + ds) / space.s_per_oct)
                ui, vi = int(round(u_in)), int(round(v_in))
                if not (0 <= ui < img.shape[1] and 0 <= vi < img.shape[0]):
                    continue
                if mask_arr is not None and not mask_arr[vi, ui]:
                    continue
                sigma_oct = opts.sigma0 * 2.0 ** ((rs + ds) / space.s_per_oct)
                theta = _orientation(space, o, rs, ru + du, rv + dv, sigma_oct, opts)
                key = (int(round(u_in * 2)), int(round(v_in * 2)), int(round(math.log2(sigma) * 4)))
                kp = Keypoint(u=float(u_in), v=float(v_in), scale=float(sigma),
                              orientation=theta, response=float(abs(value)))
                if key not in found or kp.response > found[key].response:
                    found[key] = kp
    kps = sorted(found.values(), key=lambda p: (-p.response, p.v, p.u, p.scale))
    return kps


def compute_descriptors(
    image: Raster | np.ndarray, keypoints: list[Keypoint], opts: FeatureOptions | None = None
) -> tuple[np.ndarray, list[Keypoint]]:
    """One 128-vector per keypoint; keypoints whose window exits the image are dropped.

    Returns (descriptors, kept_keypoints).
    """
    opts = opts or FeatureOptions()
    img = image.values if isinstance(image, Raster) else np.asarray(image, dtype=float)
    img = img.astype(float)
    if min(img.shape) < 16 or not keypoints:
        return np.zeros((0, DESC_LEN)), []
    space = _ScaleSpace(img, opts)
    out = []
    kept = []
    for kp in keypoints:
        o = min(max(int(math.floor(math.log2(max(kp.scale / opts.sigma0, 1e-9)))), 0), space.n_octaves - 1)
        stride = 2.0**o
        sigma_oct = kp.scale / stride
        lvl = int(round(math.log2(max(sigma_oct / opts.sigma0, 1e-9)) * space.s_per_oct))
        lvl = min(max(lvl, 0), space.s_per_oct + 2)
        desc = _descriptor_at(space, o, lvl, kp.u / stride, kp.v / stride, sigma_oct, kp.orientation)
        if desc is None:
            continue
        out.append(desc)
        kept.append(kp)
    if not out:
        return np.zeros((0, DESC_LEN)), []
    return np.vstack(out), kept


def _descriptor_at(space: _ScaleSpace, octave: int, level: int, u: float, v: float, sigma: float, theta: float):
    gx, gy = space.gradient(octave, level)
    h, w = gx.shape
    cell = DESC_LAMBDA * sigma
    radius = int(round(cell * math.sqrt(2) * (DESC_WIDTH + 1) / 2))
    ui, vi = int(round(u)), int(round(v))
    if ui - radius < 0 or ui + radius >= w or vi - radius < 0 or vi + radius >= h:
        return None
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    us = np.arange(ui - radius, ui + radius + 1) - u
    vs = np.arange(vi - radius, vi + radius + 1) - v
    uu, vv = np.meshgrid(us, vs)
    # rotate offsets into the keypoint frame, in cell units
    x_r = (cos_t * uu + sin_t * vv) / cell
    y_r = (-sin_t * uu + cos_t * vv) / cell
    inside = (np.abs(x_r) < DESC_WIDTH / 2 + 0.5) & (np.abs(y_r) < DESC_WIDTH / 2 + 0.5)
    px = gx[vi - radius : vi + radius + 1, ui - radius : ui + radius + 1]
    py = gy[vi - radius : vi + radius + 1, ui - radius : ui + radius + 1]
    mag = np.hypot(px, py)
    ang = np.arctan2(py, px) - theta
    wgt = np.exp(-(x_r**2 + y_r**2) / (2 * (DESC_WIDTH / 2) ** 2))
    hist = np.zeros((DESC_WIDTH + 2, DESC_WIDTH + 2, DESC_ORI_BINS))
    xs = x_r[inside] + DESC_WIDTH / 2 - 0.5
    ys = y_r[inside] + DESC_WIDTH / 2 - 0.5
    ms = (mag * wgt)[inside]
    obin = (ang[inside] + math.pi) / (2 * math.pi) * DESC_ORI_BINS
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    o0 = np.floor(obin).astype(int)
    fx = xs - x0
    fy = ys - y0
    fo = obin - o0
    for dx_b, wx in ((0, 1 - fx), (1, fx)):
        for dy_b, wy in ((0, 1 - fy), (1, fy)):
            for do_b, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(
                    hist,
                    (y0 + dy_b + 1, x0 + dx_b + 1, (o0 + do_b) % DESC_ORI_BINS),
                    ms * wx * wy * wo,
                )
    vec = hist[1 : DESC_WIDTH + 1, 1 : DESC_WIDTH + 1, :].ravel()
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return None
    vec = np.minimum(vec / n, DESC_CLAMP)
    n = np.linalg.norm(vec)
    if n < 1e-12:
        return None
    return vec / n


def match_features(f1: np.ndarray, f2: np.ndarray, strategy: str = "bidirectional") -> list[tuple[int, int]]:
    """L1 descriptor matching, either mutual-nearest or Lowe ratio.

    Each index appears in at most one pair; ties break to the lowest index.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.size == 0 or f2.size == 0:
        return []
    d = cdist(f1, f2, metric="cityblock")
    if strategy == "bidirectional":
        fwd = np.argmin(d, axis=1)
        bwd = np.argmin(d, axis=0)
        return [(i, int(j)) for i, j in enumerate(fwd) if bwd[j] == i]
    if strategy.startswith("ratio"):
        rho = FeatureOptions().ratio_threshold
        if "(" in strategy:
            rho = float(strategy[strategy.index("(") + 1 : strategy.index(")")])
        cands = []
        for i in range(d.shape[0]):
            row = d[i]
            j1 = int(np.argmin(row))
            d1 = row[j1]
            if d.shape[1] < 2:
                cands.append((d1, i, j1))
                continue
            d2 = np.min(np.delete(row, j1))
            if d2 <= 1e-300 or d1 / d2 < rho:
                cands.append((d1, i, j1))
        cands.sort(key=lambda t: (t[0], t[1]))
        used_j = set()
        pairs = []
        for _, i, j in cands:
            if j in used_j:
                continue
            used_j.add(j)
            pairs.append((i, j))
        pairs.sort()
        return pairs
    raise ValueError(f"unknown matching strategy {strategy!r}")
