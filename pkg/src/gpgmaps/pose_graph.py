"""Pose graph over SE(3) with odometry and loop edges, solved by batch LM.

Edges store a relative-pose measurement with a 6x6 information matrix. The
residual is the minimal-coordinate error of measurement^-1 (T_i^-1 T_j);
Jacobians are numerical (central differences on a right-multiplicative local
perturbation), which desk-scale graphs refactorize in milliseconds. Node 0 is
anchored to fix the gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky
from scipy.spatial.transform import Rotation

from .geometry import Pose3, compose, invert


@dataclass
class PgNode:
    id: int
    pose: Pose3


@dataclass
class PgEdge:
    i: int
    j: int
    measurement: Pose3  # expected T_i^-1 T_j
    information: np.ndarray
    kind: str = "odometry"  # "odometry" | "loop"

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("self edges are not allowed")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be a symmetric 6x6 matrix")
        self.information = 0.5 * (info + info.T)


@dataclass
class PoseGraph:
    nodes: dict[int, PgNode] = field(default_factory=dict)
    edges: list[PgEdge] = field(default_factory=list)

    def add_node(self, node_id: int, pose: Pose3) -> None:
        if node_id in self.nodes:
            raise ValueError(f"node {node_id} already exists")
        self.nodes[node_id] = PgNode(node_id, pose)

    def add_edge(self, edge: PgEdge) -> None:
        if edge.i not in self.nodes or edge.j not in self.nodes:
            raise ValueError("edge references unknown nodes")
        self.edges.append(edge)


@dataclass
class OptimizeOptions:
    max_iters: int = 50
    lm_lambda0: float = 1e-4
    tol: float = 1e-9


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


def log6(pose: Pose3) -> np.ndarray:
    """Minimal coordinates [t, rotvec] of a pose; zero iff identity."""
    return np.concatenate([pose.trans, Rotation.from_quat(pose.quat).as_rotvec()])


def residual(edge: PgEdge, pose_i: Pose3, pose_j: Pose3) -> np.ndarray:
    err = compose(invert(edge.measurement), compose(invert(pose_i), pose_j))
    return log6(err)


def _retract(pose: Pose3, delta: np.ndarray) -> Pose3:
    """Right-multiplicative update by a local [t, rotvec] perturbation."""
    step = Pose3(Rotation.from_rotvec(delta[3:]).as_quat(), delta[:3])
    return compose(pose, step)


def _connected(graph: PoseGraph) -> bool:
    ids = list(graph.nodes)
    if not ids:
        return False
    adj: dict[int, set] = {i: set() for i in ids}
    for e in graph.edges:
        adj[e.i].add(e.j)
        adj[e.j].add(e.i)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


def _whitened_residuals(graph: PoseGraph, poses: dict[int, Pose3], sqrt_infos: list[np.ndarray]) -> np.ndarray:
    out = np.empty(6 * len(graph.edges))
    for k, e in enumerate(graph.edges):
        r = residual(e, poses[e.i], poses[e.j])
        out[6 * k : 6 * k + 6] = sqrt_infos[k] @ r
    return out


def _cost(stacked: np.ndarray) -> float:
    return float(stacked @ stacked)


def optimize(graph: PoseGraph, opts: OptimizeOptions | None = None) -> tuple[dict[int, Pose3], OptimizeReport]:
    """Levenberg-Marquardt over all poses except the anchored first node."""
    opts = opts or OptimizeOptions()
    if not graph.nodes:
        raise ValueError("empty graph")
    if not _connected(graph):
        raise ValueError("graph is disconnected")
    node_ids = sorted(graph.nodes)
    anchor = node_ids[0]
    free_ids = node_ids[1:]
    col_of = {nid: 6 * k for k, nid in enumerate(free_ids)}
    poses = {nid: graph.nodes[nid].pose for nid in node_ids}
    # info = U^T U with U upper-triangular, so ||U r||^2 = r^T info r
    sqrt_infos = [cholesky(e.information, lower=False) for e in graph.edges]

    lam = opts.lm_lambda0
    r = _whitened_residuals(graph, poses, sqrt_infos)
    cost = _cost(r)
    initial_cost = cost
    iters_done = 0
    converged = False
    h = 1e-6
    for it in range(opts.max_iters):
        iters_done = it + 1
        if cost <= opts.tol:
            converged = True
            break
        n_free = 6 * len(free_ids)
        J = np.zeros((len(r), n_free))
        for k, e in enumerate(graph.edges):
            sq = sqrt_infos[k]
            for nid in (e.i, e.j):
                if nid == anchor:
                    continue
                base = col_of[nid]
                for d in range(6):
                    delta = np.zeros(6)
                    delta[d] = h
                    pp = dict(poses)
                    pp[nid] = _retract(poses[nid], delta)
                    rp = sq @ residual(e, pp[e.i], pp[e.j])
                    pp[nid] = _retract(poses[nid], -delta)
                    rm = sq @ residual(e, pp[e.i], pp[e.j])
                    J[6 * k : 6 * k + 6, base + d] = (rp - rm) / (2 * h)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam * np.eye(n_free), -g)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError("singular normal equations") from exc
            trial = dict(poses)
            for nid in free_ids:
                trial[nid] = _retract(poses[nid], delta[col_of[nid] : col_of[nid] + 6])
            r_trial = _whitened_residuals(graph, trial, sqrt_infos)
            c_trial = _cost(r_trial)
            if c_trial < cost:
                poses = trial
                rel_drop = (cost - c_trial) / max(cost, 1e-300)
                cost = c_trial
                r = r_trial
                lam = max(lam / 10.0, 1e-12)
                improved = True
                if rel_drop < opts.tol:
                    converged = True
                break
            lam *= 10.0
        if not improved or converged or cost <= opts.tol:
            converged = True
            break
    report = OptimizeReport(
        iterations=iters_done, initial_cost=initial_cost, final_cost=cost, converged=converged
    )
    return poses, report


def total_cost(graph: PoseGraph, poses: dict[int, Pose3] | None = None) -> float:
    poses = poses or {nid: n.pose for nid, n in graph.nodes.items()}
    sqrt_infos = [cholesky(e.information, lower=False) for e in graph.edges]
    return _cost(_whitened_residuals(graph, poses, sqrt_infos))


# ---------------------------------------------------------------------------
# JSON graph file


def save_graph(path: str, graph: PoseGraph) -> None:
    import json

    payload = {
        "nodes": [
            {"id": nid, "pose": graph.nodes[nid].pose.matrix().tolist()} for nid in sorted(graph.nodes)
        ],
        "edges": [
            {
                "i": e.i,
                "j": e.j,
                "kind": e.kind,
                "measurement": e.measurement.matrix().tolist(),
                "information": e.information.tolist(),
            }
            for e in graph.edges
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def load_graph(path: str) -> PoseGraph:
    import json

    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    g = PoseGraph()
    for n in payload["nodes"]:
        g.add_node(int(n["id"]), Pose3.from_matrix(np.array(n["pose"])))
    for e in payload["edges"]:
        g.add_edge(
            PgEdge(
                i=int(e["i"]),
                j=int(e["j"]),
                measurement=Pose3.from_matrix(np.array(e["measurement"])),
                information=np.array(e["information"]),
                kind=e["kind"],
            )
        )
    return g
