"""Trajectory alignment and error metrics, plus retrieval-quality curves.

Alignment fixes the first corresponding positions of estimate and ground truth
and rotates the estimate about that point with the closed-form quaternion
method, so only the remaining shape error contributes to the RMSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIME_WINDOW = 0.05  # seconds; temporal correspondence tolerance


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.times.shape[0] != self.positions.shape[0]:
            raise ValueError("times and positions must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def length(self) -> float:
        """Total path length in meters."""
        if len(self.times) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


def correspondences(est: Trajectory, gt: Trajectory, window: float = TIME_WINDOW) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing within the window."""
    pairs = []
    used = set()
    for i, t in enumerate(est.times):
        j = int(np.argmin(np.abs(gt.times - t)))
        if abs(gt.times[j] - t) <= window and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


def _horn_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix minimizing ||R a_i - b_i||^2 via the quaternion eigenproblem."""
    m = a.T @ b
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    w, v = np.linalg.eigh(n)
    q = v[:, -1]  # w, x, y, z
    qw, qx, qy, qz = q
    return np.array(
        [
            [1 - 2 * (qy**2 + qz**2), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
            [2 * (qx * qy + qw * qz), 1 - 2 * (qx**2 + qz**2), 2 * (qy * qz - qw * qx)],
            [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx**2 + qy**2)],
        ]
    )


def align(est: Trajectory, gt: Trajectory, window: float = TIME_WINDOW) -> tuple[Trajectory, list[tuple[int, int]]]:
    """Rotate the estimate about the fixed first correspondence onto the truth."""
    pairs = correspondences(est, gt, window)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} temporal correspondences, need at least 3")
    ei = np.array([p[0] for p in pairs])
    gi = np.array([p[1] for p in pairs])
    e0 = est.positions[ei[0]]
    g0 = gt.positions[gi[0]]
    rot = _horn_rotation(est.positions[ei] - e0, gt.positions[gi] - g0)
    aligned = (est.positions - e0) @ rot.T + g0
    return Trajectory(est.times, aligned), pairs


@dataclass
class TrajectoryMetrics:
    rmse: float
    final_error: float
    rmse_pct: float
    max_err_pct: float
    n_correspondences: int

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "final_error": self.final_error,
            "rmse_pct": self.rmse_pct,
            "max_err_pct": self.max_err_pct,
            "n_correspondences": self.n_correspondences,
        }


def rmse(aligned: Trajectory, gt: Trajectory, pairs: list[tuple[int, int]]) -> TrajectoryMetrics:
    """Position RMSE plus final and length-normalized errors over correspondences."""
    if not pairs:
        raise ValueError("no correspondences")
    err = np.array(
        [np.linalg.norm(aligned.positions[i] - gt.positions[j]) for i, j in pairs]
    )
    root = float(np.sqrt(np.mean(err**2)))
    final = float(err[-1])
    length = gt.length()
    pct = 100.0 / length if length > 0 else 0.0
    return TrajectoryMetrics(
        rmse=root,
        final_error=final,
        rmse_pct=root * pct,
        max_err_pct=float(err.max()) * pct,
        n_correspondences=len(pairs),
    )


def pr_roc(scores, labels) -> dict:
    """Precision-recall and ROC points by sweeping a threshold over the scores.

    A sample is classified positive when score >= threshold; thresholds are the
    distinct score values, descending. AUC is the trapezoidal area under the
    ROC curve.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    pr = []
    roc = []
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        precision = tp / max(tp + fp, 1)
        recall = tp / n_pos
        fpr = fp / n_neg
        pr.append((thr, precision, recall))
        roc.append((thr, fpr, recall))
    fprs = np.array([0.0] + [p[1] for p in roc] + [1.0])
    tprs = np.array([0.0] + [p[2] for p in roc] + [1.0])
    order = np.argsort(fprs, kind="stable")
    auc = float(np.trapezoid(tprs[order], fprs[order]))
    return {"pr": pr, "roc": roc, "auc": auc}


def write_pr_csv(path, result: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold,precision,recall\n")
        for thr, precision, recall in result["pr"]:
            f.write(f"{thr!r},{precision!r},{recall!r}\n")


def write_roc_csv(path, result: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold,fpr,tpr\n")
        for thr, fpr, tpr in result["roc"]:
            f.write(f"{thr!r},{fpr!r},{tpr!r}\n")
