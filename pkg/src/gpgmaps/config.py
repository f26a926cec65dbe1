"""Pipeline configuration: one JSON-serializable record wired through every stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .features import FeatureOptions
from .kernels import SeKernelParams
from .loopclosure import BHATTACHARYYA_GATE, MIN_INLIERS, PASS_FRACTION
from .ski import CgOptions


@dataclass
class SkiConfig:
    grid_spacing: float | None = None  # None: twice the raster resolution
    cg_rel_tol: float = 1e-6
    cg_max_iters: int = 6000
    preconditioner: str = "none"

    def cg_options(self) -> CgOptions:
        return CgOptions(self.cg_rel_tol, self.cg_max_iters, self.preconditioner)


@dataclass
class GpgmapConfig:
    resolution: float = 0.04  # m/pixel at synthetic scale; field-scale runs use 0.01
    proxy_radius: float | None = None  # None: half the kernel length scale
    mask_threshold: float = 0.5


@dataclass
class BowConfig:
    k: int = 128
    seed: int = 0


@dataclass
class LoopClosureConfig:
    min_inliers: int = MIN_INLIERS
    t_db: float = BHATTACHARYYA_GATE
    pass_fraction: float = PASS_FRACTION
    ransac_iterations: int = 2000
    ransac_tol_px: float = 3.0
    ransac_seed: int = 0
    iou_threshold: float = 0.2
    inflation: float = 2.0
    bow_top_k: int = 2
    strategy: str = "bidirectional"
    icp_max_corr_dist: float = 0.1
    icp_max_iters: int = 30


@dataclass
class PoseGraphConfig:
    max_iters: int = 50
    lm_lambda0: float = 1e-4
    tol: float = 1e-9
    odom_sigma_trans: float = 0.05  # meters of odometry noise per meter traveled
    odom_sigma_yaw: float = 0.025  # radians per meter
    sigma_floor: float = 1e-3


@dataclass
class SynthConfig:
    preset: str = "figure8"
    waypoints: list | None = None
    submap_spacing: float = 4.5
    footprint_half_width: float = 3.0
    sample_density: float = 110.0
    sigma_z: float = 0.02
    n_bumps: int = 1000  # about 3 bumps/m^2 over the figure-8 bounding box
    bump_amplitude: tuple = (0.06, 0.22)
    bump_sigma: tuple = (0.12, 0.32)
    terrain_margin: float = 4.0


@dataclass
class PipelineConfig:
    kernel: SeKernelParams = field(default_factory=lambda: SeKernelParams(0.4, 0.2, 0.02))
    ski: SkiConfig = field(default_factory=SkiConfig)
    gpgmap: GpgmapConfig = field(default_factory=GpgmapConfig)
    features: FeatureOptions = field(default_factory=FeatureOptions)
    bow: BowConfig = field(default_factory=BowConfig)
    loopclosure: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    pose_graph: PoseGraphConfig = field(default_factory=PoseGraphConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        # canonical JSON types (tuples become lists) so round-trips compare equal
        return json.loads(json.dumps(asdict(self)))

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        sections = {
            "kernel": SeKernelParams,
            "ski": SkiConfig,
            "gpgmap": GpgmapConfig,
            "features": FeatureOptions,
            "bow": BowConfig,
            "loopclosure": LoopClosureConfig,
            "pose_graph": PoseGraphConfig,
            "synth": SynthConfig,
        }
        for name, cls in sections.items():
            if name in d:
                payload = dict(d[name])
                for key in ("bump_amplitude", "bump_sigma"):
                    if key in payload and payload[key] is not None:
                        payload[key] = tuple(payload[key])
                setattr(cfg, name, cls(**payload))
        if "seed" in d:
            cfg.seed = int(d["seed"])
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        return PipelineConfig.from_dict(json.loads(text))


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, "r", encoding="utf-8") as f:
        return PipelineConfig.from_json(f.read())
