"""Depth and trajectory metrics: median-scaled depth errors, ATE and KITTI-style drift."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AssociationError, DegenerateConfiguration, EmptyEvaluation
from .geometry import PoseSE3, Sim3Transform, quaternion_to_rotation, rotation_angle

DEPTH_CAP = 80.0
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
MIN_PRED = 1e-3


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @staticmethod
    def mean(items: list["DepthMetrics"]) -> "DepthMetrics":
        if not items:
            raise EmptyEvaluation("no depth metrics to average")
        return DepthMetrics(*np.mean([list(asdict(m).values()) for m in items], axis=0).tolist())


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse: float
    rel_tr: float  # percent
    rel_rot: float  # deg / m
    length_scale: float = 1.0


def depth_metrics(pred, gt, cap: float = DEPTH_CAP, median_scale: bool = True) -> DepthMetrics:
    """The seven standard depth metrics over pixels with ``0 < gt <= cap``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = (gt > 0) & (gt <= cap) & np.isfinite(pred)
    if not mask.any():
        raise EmptyEvaluation("no valid ground-truth pixels")
    p = pred[mask]
    g = gt[mask]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, MIN_PRED, cap)
    thresh = np.maximum(p / g, g / p)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25**2)),
        a3=float(np.mean(thresh < 1.25**3)),
    )


def sequence_depth_metrics(preds, gts, cap: float = DEPTH_CAP, median_scale: bool = True,
                           frames=None) -> DepthMetrics:
    """Per-frame metrics averaged over frames (frames without valid pixels are skipped)."""
    idx = range(len(gts)) if frames is None else frames
    out = []
    for i in idx:
        try:
            out.append(depth_metrics(preds[i], gts[i], cap, median_scale))
        except EmptyEvaluation:
            continue
    return DepthMetrics.mean(out)


# ------------------------------------------------------------------ trajectories


def _positions(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], PoseSE3):
        return np.array([p.center for p in traj])
    return np.asarray(traj, dtype=np.float64).reshape(-1, 3)


def umeyama_align(est, gt, with_scale: bool = True) -> Sim3Transform:
    """Similarity mapping ``est`` positions onto ``gt`` in the least-squares sense."""
    X = _positions(est)
    Y = _positions(gt)
    if len(X) != len(Y):
        raise AssociationError(f"{len(X)} estimated vs {len(Y)} reference positions")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    sy = np.linalg.svd(Yc, compute_uv=False)
    if sx[1] <= 1e-9 * max(sx[0], 1e-300) or sy[1] <= 1e-9 * max(sy[0], 1e-300):
        raise DegenerateConfiguration("points are collinear or coincident")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = np.mean(np.sum(Xc**2, axis=1))
        s = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    return Sim3Transform(s, R, t)


def ate_rmse(est, gt, align: bool = True, with_scale: bool = True) -> float:
    """RMSE of camera positions, optionally after similarity (or rigid) alignment."""
    X = _positions(est)
    Y = _positions(gt)
    if len(X) != len(Y):
        raise AssociationError(f"{len(X)} estimated vs {len(Y)} reference positions")
    if len(X) == 0:
        raise EmptyEvaluation("empty trajectory")
    if align:
        X = umeyama_align(X, Y, with_scale).apply(X)
    return float(np.sqrt(np.mean(np.sum((X - Y) ** 2, axis=1))))


def path_length(traj) -> float:
    P = _positions(traj)
    return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))


def _c2w(pose: PoseSE3) -> np.ndarray:
    return pose.inverse().matrix()


@dataclass(frozen=True)
class RelativeErrors:
    rel_tr: float  # percent
    rel_rot: float  # deg / m
    length_scale: float
    segments: int


def relative_errors(est: list[PoseSE3], gt: list[PoseSE3], lengths=None, step: int = 10,
                    align: bool = True, with_scale: bool = True) -> RelativeErrors:
    """Drift over sub-trajectories of fixed path length, KITTI odometry style.

    With ``lengths=None`` the KITTI lengths 100..800 m are rescaled by
    ``path_length(gt) / 800`` so the longest spans the whole sequence.
    Explicit lengths are used as given.
    """
    if len(est) != len(gt):
        raise AssociationError(f"{len(est)} estimated vs {len(gt)} reference poses")
    total = path_length(gt)
    if lengths is None:
        scale = total / KITTI_LENGTHS[-1]
        lengths = [L * scale for L in KITTI_LENGTHS]
    else:
        scale = 1.0
    est_m = [_c2w(p) for p in est]
    if align:
        sim = umeyama_align(est, gt, with_scale)
        A = sim.matrix()
        out = []
        for M in est_m:
            N = M.copy()
            N[:3, :3] = sim.rotation @ M[:3, :3]
            N[:3, 3] = (A @ np.append(M[:3, 3], 1.0))[:3]
            out.append(N)
        est_m = out
    gt_m = [_c2w(p) for p in gt]
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(_positions(gt), axis=0), axis=1))])
    tol = 1e-9 * max(total, 1.0)
    t_err, r_err = [], []
    for first in range(0, len(gt), step):
        for L in lengths:
            reach = np.nonzero(dist >= dist[first] + L - tol)[0]
            if len(reach) == 0:
                continue
            last = int(reach[0])
            d_gt = np.linalg.inv(gt_m[first]) @ gt_m[last]
            d_est = np.linalg.inv(est_m[first]) @ est_m[last]
            E = np.linalg.inv(d_est) @ d_gt
            t_err.append(np.linalg.norm(E[:3, 3]) / L)
            r_err.append(rotation_angle(E[:3, :3]) / L)
    if not t_err:
        raise EmptyEvaluation("no sub-trajectory of the requested lengths fits the path")
    return RelativeErrors(
        rel_tr=float(100.0 * np.mean(t_err)),
        rel_rot=float(np.degrees(np.mean(r_err))),
        length_scale=scale,
        segments=len(t_err),
    )


def trajectory_metrics(est: list[PoseSE3], gt: list[PoseSE3], with_scale: bool = True, step: int = 10) -> TrajectoryMetrics:
    rel = relative_errors(est, gt, step=step, with_scale=with_scale)
    return TrajectoryMetrics(ate_rmse(est, gt, True, with_scale), rel.rel_tr, rel.rel_rot, rel.length_scale)


def read_tum(path) -> tuple[list[float], list[PoseSE3]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines (camera-to-world) into world-to-camera poses."""
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 8:
            raise ValueError(f"bad TUM line: {line!r}")
        R_wc = quaternion_to_rotation(v[4:8])
        c = np.array(v[1:4])
        poses.append(PoseSE3._unchecked(R_wc.T, -R_wc.T @ c))
        stamps.append(v[0])
    return stamps, poses
