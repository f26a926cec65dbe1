"""Command-line pipeline runner.

Commands: synth, build, match, slam, eval, bench. Every command honors
--seed and --config; identical invocations produce identical artifacts.
Exit codes: 0 success, 1 pipeline-stage failure, 2 configuration/parse error.
Set GPGM_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("gpgm")


def _setup_logging() -> None:
    level = os.environ.get("GPGM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _load_config(args):
    from .config import PipelineConfig, load_config

    try:
        cfg = load_config(getattr(args, "config", None))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot load config: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.bow.seed = args.seed
        cfg.loopclosure.ransac_seed = args.seed
    return cfg


def _figure8_sim_config(cfg, seed):
    from .synth import FIGURE8_WAYPOINTS, SimConfig

    s = cfg.synth
    waypoints = s.waypoints if s.waypoints else FIGURE8_WAYPOINTS
    if s.preset not in ("figure8", "custom"):
        raise ConfigError(f"unknown synth preset {s.preset!r}")
    return SimConfig(
        waypoints=[tuple(w) for w in waypoints],
        submap_spacing=s.submap_spacing,
        footprint_half_width=s.footprint_half_width,
        sample_density=s.sample_density,
        sigma_z=s.sigma_z,
        odom_sigma_trans=cfg.pose_graph.odom_sigma_trans,
        odom_sigma_yaw=cfg.pose_graph.odom_sigma_yaw,
        seed=seed,
    )


def _synth_terrain(cfg, waypoints, seed):
    from .geometry import Aabb
    from .synth import TerrainSpec

    wp = np.asarray(waypoints, dtype=float)
    m = cfg.synth.terrain_margin
    bounds = Aabb(wp.min(axis=0) - m, wp.max(axis=0) + m)
    return TerrainSpec.random_field(
        bounds,
        n_bumps=cfg.synth.n_bumps,
        seed=seed,
        amplitude_range=cfg.synth.bump_amplitude,
        sigma_range=cfg.synth.bump_sigma,
    )


def cmd_synth(args) -> int:
    from .synth import save_dataset, simulate

    cfg = _load_config(args)
    sim = _figure8_sim_config(cfg, cfg.seed)
    terrain = _synth_terrain(cfg, sim.waypoints, cfg.seed)
    try:
        ds = simulate(terrain, sim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.submaps)} submaps to {args.out}")
    return 0


def cmd_build(args) -> int:
    from .bow import bow_vector, load_vocabulary
    from .geometry import Pose3, load_cloud_csv
    from .gpgmap import build_gpgmap, save_gpgmap

    cfg = _load_config(args)
    try:
        cloud = load_cloud_csv(args.cloud)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read cloud: {exc}") from exc
    pose = Pose3.identity()
    if args.pose:
        with open(args.pose, "r", encoding="utf-8") as f:
            meta = json.load(f)
        key = "odom_pose" if "odom_pose" in meta else "pose"
        pose = Pose3.from_matrix(np.array(meta[key]))
    try:
        gmap = build_gpgmap(
            pose,
            cloud,
            cfg.kernel,
            resolution=cfg.gpgmap.resolution,
            proxy_radius=cfg.gpgmap.proxy_radius,
            mask_threshold=cfg.gpgmap.mask_threshold,
            grid_spacing=cfg.ski.grid_spacing,
            cg_opts=cfg.ski.cg_options(),
            feature_opts=cfg.features,
            map_id=args.map_id,
        )
    except Exception as exc:
        raise StageError("build", str(exc)) from exc
    save_gpgmap(args.out, gmap, previews=args.previews)
    if args.vocab:
        vocab = load_vocabulary(args.vocab)
        vec = bow_vector(vocab, gmap.descriptors)
        with open(os.path.join(args.out, "bow.json"), "w", encoding="utf-8") as f:
            json.dump({str(k): v for k, v in sorted(vec.entries.items())}, f, sort_keys=True, indent=1)
    print(f"built map with {len(gmap.keypoints)} keypoints -> {args.out}")
    return 0


def cmd_match(args) -> int:
    from .gpgmap import load_gpgmap
    from .loopclosure import match_maps
    from .pipeline import _match_options

    cfg = _load_config(args)
    try:
        map_a = load_gpgmap(args.map_a)
        map_b = load_gpgmap(args.map_b)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load maps: {exc}") from exc
    result, diag = match_maps(map_a, map_b, _match_options(cfg))
    payload = {
        "accepted": result is not None,
        "stage": diag.get("stage"),
        "reason": diag.get("reason"),
        "se2": diag.get("se2"),
        "inliers": diag.get("inliers", 0),
        "z_off": diag.get("z_off"),
        "pass_fraction": diag.get("pass_fraction"),
        "pose": result.relative_pose.matrix().tolist() if result else None,
        "icp_rmse": result.icp_rmse if result else None,
        "information": result.information.tolist() if result else None,
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
    print(f"match {'accepted' if payload['accepted'] else 'rejected'} -> {args.out}")
    return 0


def cmd_slam(args) -> int:
    from .pipeline import run_slam
    from .pose_graph import save_graph
    from .synth import load_dataset, format_pose_line

    cfg = _load_config(args)
    try:
        ds = load_dataset(args.data)
    except (OSError, FileNotFoundError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load dataset: {exc}") from exc
    try:
        out = run_slam(ds, cfg, threads=args.threads)
    except Exception as exc:
        raise StageError("slam", str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    # store optimized poses on the graph before writing
    for nid, pose in out.optimized.items():
        out.graph.nodes[nid].pose = pose
    save_graph(os.path.join(args.out, "graph.json"), out.graph)
    with open(os.path.join(args.out, "trajectory_est.txt"), "w", encoding="utf-8") as f:
        f.write("# timestamp x y z qx qy qz qw\n")
        for sub in ds.submaps:
            f.write(format_pose_line(sub.timestamp, out.optimized[sub.id]))
    with open(os.path.join(args.out, "decisions.jsonl"), "w", encoding="utf-8") as f:
        for rec in out.decisions:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_retrieval_curves(args.out, ds, out)
    n_loops = len(out.matches)
    print(f"slam: {n_loops} loop closures, final cost {out.report.final_cost:.6g} -> {args.out}")
    return 0


def _write_retrieval_curves(out_dir, ds, out, iou_threshold=0.3):
    """Retrieval-score curves against footprint-overlap labels, when truth is known."""
    from .bow import similarity
    from .evaluation import pr_roc, write_pr_csv, write_roc_csv
    from .geometry import aabb_iou

    subs = {s.id: s for s in ds.submaps}
    scores, labels = [], []
    maps = out.maps
    for a in range(len(maps)):
        for b in range(a + 1, len(maps)):
            ma, mb = maps[a], maps[b]
            if abs(ma.map_id - mb.map_id) < 2:
                continue
            scores.append(similarity(ma.bow, mb.bow))
            iou = aabb_iou(subs[ma.map_id].footprint, subs[mb.map_id].footprint)
            labels.append(iou > iou_threshold)
    if not any(labels) or all(labels):
        return
    result = pr_roc(scores, labels)
    write_pr_csv(os.path.join(out_dir, "pr.csv"), result)
    write_roc_csv(os.path.join(out_dir, "roc.csv"), result)


def cmd_eval(args) -> int:
    from .evaluation import Trajectory, align, rmse
    from .synth import parse_trajectory

    try:
        est_list = parse_trajectory(args.est)
        gt_list = parse_trajectory(args.gt)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot parse trajectories: {exc}") from exc
    est = Trajectory([t for t, _ in est_list], [p.trans for _, p in est_list])
    gt = Trajectory([t for t, _ in gt_list], [p.trans for _, p in gt_list])
    try:
        aligned, pairs = align(est, gt)
    except ValueError as exc:
        raise StageError("eval", str(exc)) from exc
    metrics = rmse(aligned, gt, pairs)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(metrics.to_dict(), f, sort_keys=True, indent=1)
    print(f"rmse {metrics.rmse:.4f} m ({metrics.rmse_pct:.2f}%) -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import loglog_slope, run_exact_bench, run_ski_bench, write_csv

    rows = run_ski_bench(seed=args.seed or 0) + run_exact_bench(seed=args.seed or 0)
    write_csv(args.out, rows)
    ski_rows = [r for r in rows if r.method == "ski"]
    exact_rows = [r for r in rows if r.method == "exact"]
    print(f"ski slope {loglog_slope(ski_rows):.2f}, exact slope {loglog_slope(exact_rows):.2f} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpgm", description="Gaussian Process gradient map pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--seed", type=int, default=None, help="seed override")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build", help="build a map from a cloud CSV")
    common(sp)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--pose", help="pose JSON (submap_<k>.pose.json)")
    sp.add_argument("--vocab", help="vocabulary JSON for the BoW vector")
    sp.add_argument("--map-id", type=int, default=-1)
    sp.add_argument("--previews", action="store_true", help="also write PGM previews")
    sp.add_argument("--out", required=True, help="output map directory")
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("match", help="validate a loop closure between two maps")
    common(sp)
    sp.add_argument("--map-a", required=True)
    sp.add_argument("--map-b", required=True)
    sp.add_argument("--out", required=True, help="output match JSON")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("slam", help="full pipeline on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_slam)

    sp = sub.add_parser("eval", help="trajectory metrics against ground truth")
    common(sp, config=False)
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="output metrics JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="fit-time scaling for both GP paths")
    common(sp, config=False)
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
