"""Session pipeline: build maps from submaps, detect/validate loops, optimize.

Processing is sequential in submap order, mirroring a mapping session: each
new map is retrieved against the database of earlier ones, candidates are
validated in queue order, and accepted matches become loop edges. The graph is
optimized once at the end in batch.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bow import BowDatabase, build_vocabulary, bow_vector
from .config import PipelineConfig
from .geometry import Pose3, compose, invert
from .gpgmap import GpgMap, build_gpgmap
from .loopclosure import (
    DbState,
    MatchOptions,
    MatchResult,
    RansacOptions,
    match_maps,
    select_candidates,
)
from .pose_graph import OptimizeOptions, PgEdge, PoseGraph, optimize
from .synth import Dataset

log = logging.getLogger("gpgm")


@dataclass
class SlamOutput:
    maps: list[GpgMap]
    graph: PoseGraph
    optimized: dict[int, Pose3]
    matches: list[tuple[int, int, MatchResult]]
    decisions: list[dict] = field(default_factory=list)
    report: object = None


def build_all_maps(dataset: Dataset, cfg: PipelineConfig, threads: int = 1) -> list[GpgMap]:
    """One GPGMap per submap, in id order; parallelism never changes the output."""

    def build_one(sub):
        return build_gpgmap(
            sub.odom_pose,
            sub.cloud,
            cfg.kernel,
            resolution=cfg.gpgmap.resolution,
            proxy_radius=cfg.gpgmap.proxy_radius,
            mask_threshold=cfg.gpgmap.mask_threshold,
            grid_spacing=cfg.ski.grid_spacing,
            cg_opts=cfg.ski.cg_options(),
            feature_opts=cfg.features,
            map_id=sub.id,
        )

    subs = sorted(dataset.submaps, key=lambda s: s.id)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(build_one, subs))
    else:
        maps = [build_one(s) for s in subs]
    return maps


def session_vocabulary(maps: list[GpgMap], cfg: PipelineConfig):
    corpus = [m.descriptors for m in maps if m.descriptors is not None and len(m.descriptors)]
    total = sum(len(c) for c in corpus)
    if total < 2:
        raise ValueError("too few descriptors in the session to build a vocabulary")
    k = min(cfg.bow.k, total)
    return build_vocabulary(corpus, k=k, seed=cfg.bow.seed)


def _match_options(cfg: PipelineConfig) -> MatchOptions:
    lc = cfg.loopclosure
    return MatchOptions(
        strategy=lc.strategy,
        ransac=RansacOptions(
            iterations=lc.ransac_iterations,
            inlier_tol_px=lc.ransac_tol_px,
            min_inliers=lc.min_inliers,
            seed=lc.ransac_seed,
        ),
        gate=lc.t_db,
        pass_fraction=lc.pass_fraction,
        icp_max_corr_dist=lc.icp_max_corr_dist,
        icp_max_iters=lc.icp_max_iters,
    )


def _odometry_information(step_len: float, cfg: PipelineConfig) -> np.ndarray:
    pg = cfg.pose_graph
    s_t = max(pg.odom_sigma_trans * step_len, pg.sigma_floor)
    s_yaw = max(pg.odom_sigma_yaw * step_len, pg.sigma_floor)
    s_fixed = pg.sigma_floor  # z, roll, pitch are directly observed
    cov = np.diag([s_t**2, s_t**2, s_fixed**2, s_fixed**2, s_fixed**2, s_yaw**2])
    return np.linalg.inv(cov)


def run_slam(dataset: Dataset, cfg: PipelineConfig, threads: int = 1) -> SlamOutput:
    maps = build_all_maps(dataset, cfg, threads)
    vocab = session_vocabulary(maps, cfg)
    opts = _match_options(cfg)

    state = DbState(bow_db=BowDatabase())
    by_id = {m.map_id: m for m in maps}
    path_len = {maps[0].map_id: 0.0}
    decisions: list[dict] = []
    matches: list[tuple[int, int, MatchResult]] = []

    # drift accumulates since the last accepted loop closure: a validated match
    # re-anchors the pose estimate, so the planar variance used for box
    # inflation resets there instead of growing over the whole session
    anchor_len = 0.0
    prev = None
    for m in maps:
        if prev is not None:
            step = float(np.linalg.norm(m.pose.trans[:2] - prev.pose.trans[:2]))
            path_len[m.map_id] = path_len[prev.map_id] + step
        vec = bow_vector(vocab, m.descriptors if m.descriptors is not None else np.zeros((0, 128)))
        m.bow = vec
        state.bow_db.add(m.map_id, vec)
        state.vectors[m.map_id] = vec
        state.poses[m.map_id] = m.pose
        drift_sigma = cfg.pose_graph.odom_sigma_trans * (path_len[m.map_id] - anchor_len)
        state.position_var[m.map_id] = drift_sigma**2
        state.footprints[m.map_id] = m.world_footprint()

        queue = select_candidates(
            state,
            m.map_id,
            top_k=cfg.loopclosure.bow_top_k,
            iou_threshold=cfg.loopclosure.iou_threshold,
            inflation=cfg.loopclosure.inflation,
        )
        for cand in queue:
            old_id = cand.id_b
            if abs(old_id - m.map_id) < 2:
                decisions.append(
                    {"id_a": m.map_id, "id_b": old_id, "source": cand.source,
                     "stage": "adjacency", "accepted": False, "reason": "adjacent submaps"}
                )
                continue
            result, diag = match_maps(by_id[old_id], m, opts)
            record = {"id_a": m.map_id, "id_b": old_id, "source": cand.source,
                      "priority": cand.priority, "accepted": result is not None}
            record.update({k: v for k, v in diag.items() if k in
                           ("stage", "reason", "n_matches", "inliers", "pass_fraction", "icp_rmse")})
            decisions.append(record)
            if result is not None:
                state.matched.add(cand.key())
                matches.append((old_id, m.map_id, result))
                anchor_len = path_len[m.map_id]
                state.position_var[m.map_id] = 0.0
                log.info("loop closure %d <- %d (inliers %d)", old_id, m.map_id, result.inliers)
        prev = m

    graph = PoseGraph()
    for m in maps:
        graph.add_node(m.map_id, m.pose)
    ordered = [m.map_id for m in maps]
    for a, b in zip(ordered, ordered[1:]):
        meas = compose(invert(by_id[a].pose), by_id[b].pose)
        step = float(np.linalg.norm(meas.trans[:2]))
        graph.add_edge(PgEdge(a, b, meas, _odometry_information(step, cfg), kind="odometry"))
    for old_id, new_id, res in matches:
        # relative_pose maps old-LRF coordinates into new-LRF: exactly T_new^-1 T_old
        graph.add_edge(PgEdge(new_id, old_id, res.relative_pose, res.information, kind="loop"))

    optimized, report = optimize(
        graph,
        OptimizeOptions(
            max_iters=cfg.pose_graph.max_iters,
            lm_lambda0=cfg.pose_graph.lm_lambda0,
            tol=cfg.pose_graph.tol,
        ),
    )
    return SlamOutput(
        maps=maps, graph=graph, optimized=optimized, matches=matches,
        decisions=decisions, report=report,
    )
