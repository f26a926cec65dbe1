"""Gaussian Process gradient maps: SKI-accelerated terrain regression with
derivative inference, gradient-image loop closure, and pose-graph correction."""

from .config import PipelineConfig
from .geometry import Aabb, KdTree2, PointCloud, Pose2, Pose3, aabb_iou, apply, compose, invert
from .gp_exact import ExactGp, exact_deriv, exact_mean, exact_var, fit_exact
from .gpgmap import GpgMap, Raster, build_gpgmap, load_gpgmap, save_gpgmap
from .kernels import SeKernelParams
from .ski import (
    CgOptions,
    InducingGrid,
    SkiModel,
    build_grid,
    cg_solve,
    fit_ski,
    gradient_magnitude,
    ski_deriv,
    ski_mean,
    variance_proxy,
)
from .synth import SimConfig, TerrainSpec, simulate, terrain_eval

__version__ = "0.1.0"
