"""Pseudo RGB-D pose backend.

Tracks every frame with a damped Gauss-Newton PnP against the local map and
refines a sliding window of keyframes with sparse bundle adjustment. Depth
enters the way an RGB-D front end uses it: each keyframe observation carries
a virtual right-image coordinate ``u_r = u - fx * b / d`` built from the
input depth field and the adaptive baseline ``b``.

Correspondences come from the simulator: every map point is tied to a
ground-truth surface point, and its observation in a frame is the exact
projection plus optional pixel noise (feature matching is not modeled).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InitializationFailure,
    InvalidConfig,
    NoConvergence,
    PreconditionError,
)
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    adaptive_baseline,
    back_project,
    rotation_to_quaternion,
)
from .imaging import bilinear_sample
from .keyframe_graph import Keyframe, KeyframeGraph, MapPoint
from .scene_sim import SceneSequence

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
CHI2_2DOF_95 = 5.991
MIN_SEED_POINTS = 20
PNP_MAX_ITER = 50
BA_MAX_ITER = 20
LM_LAMBDA0 = 1e-3


@dataclass(frozen=True)
class TrackingParams:
    keyframe_stride: int = 5
    ba_window: int = 7
    pixel_noise: float = 0.0  # std of detection noise, px
    outlier_ratio: float = 0.0  # fraction of grossly wrong matches
    grid_step: int = 4  # keypoint detection grid, px
    search_radius: float = 10.0  # gate around the motion-model prediction, px
    inlier_px: float = 3.0  # floor; widened to the 95% gate of the detection noise
    min_inliers: int = 15  # fewer than this after PnP and the frame is lost
    huber_delta: float = 2.0
    close_depth_factor: float = 40.0  # depths beyond this many baselines stay out of BA
    seed: int = 0

    def __post_init__(self):
        if self.keyframe_stride < 1 or self.ba_window < 2 or self.grid_step < 1:
            raise InvalidConfig("keyframe stride >= 1, BA window >= 2 and grid step >= 1 required")
        if self.min_inliers < MIN_CORRESPONDENCES:
            raise InvalidConfig(f"min_inliers must be at least {MIN_CORRESPONDENCES}")

    @property
    def inlier_gate(self) -> float:
        return max(self.inlier_px, np.sqrt(CHI2_2DOF_95) * self.pixel_noise)


@dataclass
class TrackingResult:
    graph: KeyframeGraph
    poses: list[PoseSE3]  # world-to-camera, every frame
    status: list[str]  # "tracked" | "lost"
    d_max: float
    baseline: float

    @property
    def lost_fraction(self) -> float:
        return sum(s == "lost" for s in self.status) / len(self.status)

    def keyframe_frames(self) -> list[int]:
        return [kf.frame_index for kf in self.graph.keyframes]


# ---------------------------------------------------------------- projection jacobians


def _skew_batch(X: np.ndarray) -> np.ndarray:
    S = np.zeros(X.shape[:-1] + (3, 3))
    S[..., 0, 1] = -X[..., 2]
    S[..., 0, 2] = X[..., 1]
    S[..., 1, 0] = X[..., 2]
    S[..., 1, 2] = -X[..., 0]
    S[..., 2, 0] = -X[..., 1]
    S[..., 2, 1] = X[..., 0]
    return S


def _projection_jacobian(Xc: np.ndarray, K: CameraIntrinsics, baseline: float | None) -> np.ndarray:
    """d(u, v[, u_r]) / d(camera point), shape (N, 2 or 3, 3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    rows = 3 if baseline is not None else 2
    P = np.zeros((len(Xc), rows, 3))
    P[:, 0, 0] = K.fx / z
    P[:, 0, 2] = -K.fx * x / z**2
    P[:, 1, 1] = K.fy / z
    P[:, 1, 2] = -K.fy * y / z**2
    if baseline is not None:
        P[:, 2] = P[:, 0]
        P[:, 2, 2] += K.fx * baseline / z**2
    return P


def _pose_jacobian(Xc: np.ndarray) -> np.ndarray:
    """d(camera point) / d(left perturbation [rot, trans]), shape (N, 3, 6)."""
    J = np.zeros((len(Xc), 3, 6))
    J[:, :, :3] = -_skew_batch(Xc)
    J[:, :, 3:] = np.eye(3)
    return J


def _huber(norms: np.ndarray, delta: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Robust cost per residual block and IRLS weights."""
    if delta is None:
        return 0.5 * norms**2, np.ones_like(norms)
    quad = norms <= delta
    cost = np.where(quad, 0.5 * norms**2, delta * (norms - 0.5 * delta))
    w = np.where(quad, 1.0, delta / np.maximum(norms, 1e-300))
    return cost, w


# ---------------------------------------------------------------- pose-only GN


def _pnp_residuals(pose: PoseSE3, X: np.ndarray, uv: np.ndarray, K: CameraIntrinsics):
    Xc = pose.apply(X)
    z = Xc[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    proj = np.stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    return proj - uv, Xc, ok


def reprojection_residuals(pose: PoseSE3, X, uv, K: CameraIntrinsics) -> np.ndarray:
    """Per-correspondence pixel error norms (inf for points behind the camera)."""
    r, _, ok = _pnp_residuals(pose, np.asarray(X, float), np.asarray(uv, float), K)
    return np.where(ok, np.linalg.norm(r, axis=1), np.inf)


def estimate_pose_gn(
    points,
    pixels,
    K: CameraIntrinsics,
    initial: PoseSE3 | None = None,
    max_iter: int = PNP_MAX_ITER,
    huber_delta: float | None = None,
) -> PoseSE3:
    """Minimize reprojection error of world ``points`` observed at ``pixels``.

    Levenberg-Marquardt damped Gauss-Newton on a left-perturbed SE3.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(X) < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"need >= {MIN_CORRESPONDENCES} correspondences, got {len(X)}")
    pose = initial if initial is not None else PoseSE3.identity()

    def evaluate(p):
        r, Xc, ok = _pnp_residuals(p, X, uv, K)
        if not ok.all():
            return np.inf, r, Xc
        c, _ = _huber(np.linalg.norm(r, axis=1), huber_delta)
        return c.sum(), r, Xc

    cost, r, Xc = evaluate(pose)
    if not np.isfinite(cost):
        raise DegenerateConfiguration("initial pose puts points behind the camera")
    scale = np.median(np.abs(Xc[:, 2]))
    lam = LM_LAMBDA0
    for it in range(max_iter):
        _, w = _huber(np.linalg.norm(r, axis=1), huber_delta)
        J = _projection_jacobian(Xc, K, None) @ _pose_jacobian(Xc)  # (N, 2, 6)
        Jf = J.reshape(-1, 6)
        wf = np.repeat(w, 2)
        H = Jf.T @ (wf[:, None] * Jf)
        g = Jf.T @ (wf * r.ravel())
        if it == 0:
            d = np.sqrt(np.diag(H))
            if np.any(d == 0):
                raise DegenerateConfiguration("normal equations are rank deficient")
            ev = np.linalg.eigvalsh(H / np.outer(d, d))
            if ev[0] < 1e-12 * ev[-1]:
                raise DegenerateConfiguration("normal equations are rank deficient")
        while True:
            A = H + lam * np.diag(np.diag(H))
            step = np.linalg.solve(A, -g)
            cand = pose.retract(step)
            new_cost, new_r, new_Xc = evaluate(cand)
            if new_cost < cost:
                break
            lam *= 10.0
            if lam > 1e12:
                return pose  # no further decrease possible: at a minimum
        tiny = np.abs(step[:3]).max() < 1e-14 and np.abs(step[3:]).max() < 1e-14 * scale
        decrease = cost - new_cost
        pose, cost, r, Xc = cand, new_cost, new_r, new_Xc
        lam = max(lam / 10.0, 1e-12)
        if tiny or decrease <= 1e-15 * cost or cost < 1e-28 * len(X):
            return pose
    raise NoConvergence(f"pose estimate did not converge in {max_iter} iterations")


# ---------------------------------------------------------------- bundle adjustment


@dataclass
class BundleAdjustResult:
    graph: KeyframeGraph
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def _ba_problem(graph: KeyframeGraph, window: list[int]):
    kf_index = {k: i for i, k in enumerate(window)}
    pids = sorted(p for p, mp in graph.map_points.items() if any(k in kf_index for k in mp.observations))
    pt_index = {p: i for i, p in enumerate(pids)}
    pose_idx, pt_idx, uv, depth = [], [], [], []
    kfs = {k: graph.keyframe(k) for k in window}
    for p in pids:
        mp = graph.map_points[p]
        for k, obs in mp.observations.items():
            if k in kf_index:
                pose_idx.append(kf_index[k])
                pt_idx.append(pt_index[p])
                uv.append(obs)
                depth.append(kfs[k].measured_depths.get(p, np.nan))
    return (
        pids,
        np.array(pose_idx, dtype=np.int64),
        np.array(pt_idx, dtype=np.int64),
        np.array(uv, dtype=np.float64).reshape(-1, 2),
        np.array(depth, dtype=np.float64),
    )


def local_bundle_adjust(
    graph: KeyframeGraph,
    window: list[int],
    K: CameraIntrinsics | None = None,
    max_iter: int = BA_MAX_ITER,
    huber_delta: float = 2.0,
    close_depth_factor: float | None = None,
) -> BundleAdjustResult:
    """Jointly refine window keyframe poses (first one fixed) and their map points.

    Residuals per observation: pixel error in the left image plus, where a
    pseudo depth was measured, the virtual right-image coordinate error.
    The Huber cost never increases: rejected LM steps are rolled back.
    """
    K = K or graph.intrinsics
    window = list(window)
    if len(window) < 2:
        raise PreconditionError("bundle adjustment window needs at least 2 keyframes")
    pids, pose_idx, pt_idx, uv, dmeas = _ba_problem(graph, window)
    counts = np.bincount(pt_idx, minlength=len(pids)) if len(pids) else np.zeros(0)
    if int((counts >= 2).sum()) < 10:
        raise PreconditionError("bundle adjustment window needs at least 10 shared points")

    b = graph.baseline
    stereo = np.isfinite(dmeas) & (dmeas > 0) & (b > 0)
    if close_depth_factor is not None:
        # far pseudo depth is too coarse; such points are fixed by multi-view only
        stereo &= dmeas < close_depth_factor * b
    ur_obs = np.where(stereo, uv[:, 0] - K.fx * b / np.where(stereo, dmeas, 1.0), 0.0)
    poses = [graph.keyframe(k).pose for k in window]
    points = np.array([graph.map_points[p].world_position for p in pids], dtype=np.float64)
    n_free = len(window) - 1
    L = len(pids)

    def residuals(poses, points):
        R = np.array([p.rotation for p in poses])
        t = np.array([p.translation for p in poses])
        Xc = np.einsum("mij,mj->mi", R[pose_idx], points[pt_idx]) + t[pose_idx]
        z = Xc[:, 2]
        if np.any(z <= 0):
            return None, Xc, R
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
        r = np.zeros((len(z), 3))
        r[:, 0] = u - uv[:, 0]
        r[:, 1] = v - uv[:, 1]
        r[:, 2] = np.where(stereo, (u - K.fx * b / z) - ur_obs, 0.0)
        return r, Xc, R

    def total_cost(r):
        if r is None:
            return np.inf
        return float(_huber(np.linalg.norm(r, axis=1), huber_delta)[0].sum())

    r, Xc, R = residuals(poses, points)
    cost = total_cost(r)
    initial_cost = cost
    out = graph.copy()
    if not np.isfinite(cost):
        log.warning("bundle adjustment skipped: points behind cameras")
        return BundleAdjustResult(out, cost, cost, 0, False)

    # observation pairs sharing a point, both on free poses (Schur fill-in)
    free = pose_idx > 0
    obs_by_pt: list[list[int]] = [[] for _ in range(L)]
    for o in np.flatnonzero(free):
        obs_by_pt[pt_idx[o]].append(o)
    pa, pb = [], []
    for lst in obs_by_pt:
        for a in lst:
            for bb in lst:
                pa.append(a)
                pb.append(bb)
    pa = np.array(pa, dtype=np.int64)
    pb = np.array(pb, dtype=np.int64)

    lam = LM_LAMBDA0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if cost < 1e-20:
            converged = True
            break
        _, w = _huber(np.linalg.norm(r, axis=1), huber_delta)
        P = _projection_jacobian(Xc, K, b)
        P[~stereo, 2, :] = 0.0
        Jp = P @ _pose_jacobian(Xc)  # (M, 3, 6)
        Jl = P @ R[pose_idx]  # (M, 3, 3)
        wr = w[:, None] * r
        Hpp_o = np.einsum("mki,m,mkj->mij", Jp, w, Jp)
        Hll_o = np.einsum("mki,m,mkj->mij", Jl, w, Jl)
        Hpl_o = np.einsum("mki,m,mkj->mij", Jp, w, Jl)
        gp_o = np.einsum("mki,mk->mi", Jp, wr)
        gl_o = np.einsum("mki,mk->mi", Jl, wr)

        Hll = np.zeros((L, 3, 3))
        np.add.at(Hll, pt_idx, Hll_o)
        gl = np.zeros((L, 3))
        np.add.at(gl, pt_idx, gl_o)
        Hpp = np.zeros((n_free, n_free, 6, 6))
        fi = pose_idx[free] - 1
        np.add.at(Hpp, (fi, fi), Hpp_o[free])
        gp = np.zeros((n_free, 6))
        np.add.at(gp, fi, gp_o[free])

        while True:
            Hll_d = Hll.copy()
            diag_l = np.einsum("lii->li", Hll)
            Hll_d[:, [0, 1, 2], [0, 1, 2]] += lam * diag_l
            Hll_inv = np.linalg.inv(Hll_d)
            S = Hpp.copy()
            idx = np.arange(n_free)
            S[idx, idx] += lam * np.einsum("nii->ni", Hpp[idx, idx])[..., None] * np.eye(6)
            Y = np.einsum("mij,mjk->mik", Hpl_o, Hll_inv[pt_idx])  # (M, 6, 3)
            if len(pa):
                np.add.at(
                    S,
                    (pose_idx[pa] - 1, pose_idx[pb] - 1),
                    -np.einsum("mij,mkj->mik", Y[pa], Hpl_o[pb]),
                )
            rhs = -gp.copy()
            if free.any():
                np.add.at(rhs, fi, np.einsum("mij,mj->mi", Y[free], gl[pt_idx[free]]))
            Sm = S.transpose(0, 2, 1, 3).reshape(6 * n_free, 6 * n_free)
            try:
                dp = np.linalg.solve(Sm, rhs.ravel()).reshape(n_free, 6)
            except np.linalg.LinAlgError:
                dp = np.linalg.lstsq(Sm, rhs.ravel(), rcond=None)[0].reshape(n_free, 6)
            back = -gl.copy()
            if free.any():
                np.add.at(back, pt_idx[free], -np.einsum("mji,mj->mi", Hpl_o[free], dp[fi]))
            dl = np.einsum("lij,lj->li", Hll_inv, back)
            cand_poses = [poses[0]] + [poses[i + 1].retract(dp[i]) for i in range(n_free)]
            cand_points = points + dl
            r_new, Xc_new, R_new = residuals(cand_poses, cand_points)
            new_cost = total_cost(r_new)
            if new_cost < cost:
                break
            lam *= 10.0
            if lam > 1e12:
                converged = True
                break
        if converged:
            break
        decrease = cost - new_cost
        poses, points, r, Xc, R, cost = cand_poses, cand_points, r_new, Xc_new, R_new, new_cost
        lam = max(lam / 10.0, 1e-12)
        if decrease <= 1e-10 * cost or cost < 1e-20:
            converged = True
            break
    if not converged:
        log.warning("local bundle adjustment hit %d iterations; keeping best iterate", max_iter)

    for k, pose in zip(window[1:], poses[1:]):
        out.keyframe(k).pose = pose
    for p, X in zip(pids, points):
        out.map_points[p].world_position = X
    out.refresh_slam_depths(window)
    return BundleAdjustResult(out, initial_cost, cost, it, converged)


# ---------------------------------------------------------------- map seeding


def _sample_depth(depth_field: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Depth at the nearest pixel (NaN outside the image or where invalid)."""
    H, W = depth_field.shape
    iu = np.rint(uv[:, 0]).astype(np.int64)
    iv = np.rint(uv[:, 1]).astype(np.int64)
    inside = (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    d = np.full(len(uv), np.nan)
    d[inside] = depth_field[iv[inside], iu[inside]]
    return np.where(np.isfinite(d) & (d > 0), d, np.nan)


def seed_map_from_depth(
    pixels,
    depth_field: np.ndarray,
    K: CameraIntrinsics,
    pose: PoseSE3 | None = None,
    keyframe_id: int = 0,
    first_id: int = 0,
    min_points: int = MIN_SEED_POINTS,
) -> list[MapPoint]:
    """Back-project keypoints with the (pseudo) depth field into world map points."""
    pose = pose or PoseSE3.identity()
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = _sample_depth(np.asarray(depth_field, dtype=np.float64), uv)
    ok = np.isfinite(d)
    if ok.sum() < min_points:
        raise InitializationFailure(f"only {int(ok.sum())} keypoints with valid depth")
    Xw = pose.inverse().apply(back_project(uv[ok], d[ok], K)) if ok.any() else np.zeros((0, 3))
    return [
        MapPoint(first_id + i, X, {keyframe_id: p.copy()})
        for i, (X, p) in enumerate(zip(Xw, uv[ok]))
    ]


# ---------------------------------------------------------------- correspondence oracle


class _Matcher:
    """Ground-truth data association with detection noise and gross outliers."""

    def __init__(self, sequence: SceneSequence, params: TrackingParams):
        self.seq = sequence
        self.K = sequence.intrinsics
        self.params = params
        self.gt_world: dict[int, np.ndarray] = {}

    def _rng(self, frame: int, salt: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.params.seed, frame, salt]))

    def _perturb(self, uv: np.ndarray, rng: np.random.Generator, outliers: bool = True) -> np.ndarray:
        p = self.params
        K = self.K
        out = uv + p.pixel_noise * rng.standard_normal(uv.shape) if p.pixel_noise > 0 else uv.copy()
        if outliers and p.outlier_ratio > 0:
            bad = rng.random(len(uv)) < p.outlier_ratio
            out[bad] = rng.uniform([0, 0], [K.width - 1, K.height - 1], size=(int(bad.sum()), 2))
        out[:, 0] = np.clip(out[:, 0], 0, K.width - 1)
        out[:, 1] = np.clip(out[:, 1], 0, K.height - 1)
        return out

    def detect(self, frame: int, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """New keypoints at grid ``cells``: (gt world points, noisy pixels).

        Detections carry localization jitter only; gross errors are a matching
        failure and are applied in :meth:`observe`.
        """
        f = self.seq.frames[frame]
        d = f.gt_depth[cells[:, 1].astype(int), cells[:, 0].astype(int)]
        Xw = f.gt_pose.inverse().apply(back_project(cells, d, self.K))
        return Xw, self._perturb(cells, self._rng(frame, 1), outliers=False)

    def observe(self, frame: int, pids: list[int]) -> tuple[list[int], np.ndarray]:
        """Map points visible (in view and unoccluded) in ``frame`` with their pixels."""
        if not pids:
            return [], np.zeros((0, 2))
        f = self.seq.frames[frame]
        K = self.K
        X = f.gt_pose.apply(np.array([self.gt_world[p] for p in pids]))
        z = X[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = K.fx * X[:, 0] / zs + K.cx
        v = K.fy * X[:, 1] / zs + K.cy
        inside = front & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
        s = bilinear_sample(f.gt_depth, np.where(inside, u, 0), np.where(inside, v, 0))
        visible = inside & (np.abs(s.values - z) <= 0.01 * z)
        keep = np.flatnonzero(visible)
        uv = np.stack([u[keep], v[keep]], axis=1)
        return [pids[i] for i in keep], self._perturb(uv, self._rng(frame, 2))


# ---------------------------------------------------------------- tracking


def _grid_cells(K: CameraIntrinsics, step: int) -> np.ndarray:
    us = np.arange(step // 2, K.width, step)
    vs = np.arange(step // 2, K.height, step)
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)


class _Tracker:
    def __init__(self, sequence, depth_fields, params: TrackingParams):
        self.seq = sequence
        self.fields = [np.asarray(f, dtype=np.float64) for f in depth_fields]
        self.params = params
        self.K = sequence.intrinsics
        self.d_max = float(max(np.max(f) for f in self.fields))
        self.baseline = adaptive_baseline(self.d_max)
        self.graph = KeyframeGraph(self.K, baseline=self.baseline)
        self.matcher = _Matcher(sequence, params)
        self.cells = _grid_cells(self.K, params.grid_step)
        self.next_pid = 0
        n = len(sequence)
        self.poses: list[PoseSE3 | None] = [None] * n
        self.status = ["lost"] * n

    def insert_keyframe(self, frame: int, pose: PoseSE3, tracked: dict[int, np.ndarray], first: bool = False):
        kf = Keyframe(len(self.graph.keyframes), frame, pose)
        self.graph.keyframes.append(kf)
        field = self.fields[frame]
        # only the creating keyframe carries a depth measurement for a point
        for p, obs in tracked.items():
            self.graph.map_points[p].observations[kf.id] = obs
        step = self.params.grid_step
        occupied = set()
        for obs in tracked.values():
            occupied.add((int(obs[0] // step), int(obs[1] // step)))
        free = np.array([(c[0] // step, c[1] // step) not in occupied for c in self.cells], dtype=bool)
        cells = self.cells[free]
        if len(cells) == 0:
            return kf
        gt_X, uv = self.matcher.detect(frame, cells)
        new = seed_map_from_depth(
            uv, field, self.K, pose, kf.id, self.next_pid, min_points=MIN_SEED_POINTS if first else 0
        )
        d = _sample_depth(field, uv)
        ok = np.flatnonzero(np.isfinite(d))
        for mp, j in zip(new, ok):
            self.graph.map_points[mp.id] = mp
            self.matcher.gt_world[mp.id] = gt_X[j]
            kf.measured_depths[mp.id] = float(d[j])
        self.next_pid += len(cells)
        return kf

    def bundle_adjust(self):
        window = self.graph.keyframe_ids()[-self.params.ba_window :]
        if len(window) < 2:
            return
        try:
            res = local_bundle_adjust(self.graph, window, self.K, huber_delta=self.params.huber_delta,
                                     close_depth_factor=self.params.close_depth_factor)
        except PreconditionError:
            return
        self.graph = res.graph
        for k in window:
            kf = self.graph.keyframe(k)
            self.poses[kf.frame_index] = kf.pose

    def predict(self, j: int) -> PoseSE3:
        prev = self.poses[j - 1]
        # constant velocity only from measured poses; after a loss or a map restart hold still
        if j >= 2 and self.status[j - 1] == "tracked" and self.status[j - 2] == "tracked":
            return (prev @ self.poses[j - 2].inverse()) @ prev
        return prev

    def track_frame(self, j: int, pred: PoseSE3):
        p = self.params
        pids, uv = self.matcher.observe(j, list(self.graph.map_points))
        if len(pids) < MIN_CORRESPONDENCES:
            return None
        X = np.array([self.graph.map_points[q].world_position for q in pids])
        err = reprojection_residuals(pred, X, uv, self.K)
        gate = err < p.search_radius
        if gate.sum() < MIN_CORRESPONDENCES:
            return None
        X, uv = X[gate], uv[gate]
        pids = [q for q, g in zip(pids, gate) if g]
        try:
            pose = estimate_pose_gn(X, uv, self.K, pred, huber_delta=p.huber_delta)
            inl = reprojection_residuals(pose, X, uv, self.K) < p.inlier_gate
            if inl.sum() < p.min_inliers:
                return None
            pose = estimate_pose_gn(X[inl], uv[inl], self.K, pose)
        except (DegenerateConfiguration, NoConvergence):
            return None
        return pose, {q: o for q, o, ok in zip(pids, uv, inl) if ok}

    def run(self) -> TrackingResult:
        p = self.params
        self.poses[0] = PoseSE3.identity()
        self.status[0] = "tracked"
        self.insert_keyframe(0, self.poses[0], {}, first=True)
        lost = False
        for j in range(1, len(self.seq)):
            pred = self.predict(j)
            res = self.track_frame(j, pred)
            is_kf_slot = j % p.keyframe_stride == 0
            if res is None:
                self.poses[j] = pred
                self.status[j] = "lost"
                if lost and is_kf_slot:
                    # relocalization is out of scope: restart the map from this frame's depth
                    self.insert_keyframe(j, pred, {})
                    lost = False
                else:
                    lost = True
                continue
            pose, tracked = res
            lost = False
            self.poses[j] = pose
            self.status[j] = "tracked"
            if is_kf_slot:
                self.insert_keyframe(j, pose, tracked)
                self.bundle_adjust()
        self.graph.refresh_slam_depths()
        return TrackingResult(self.graph, list(self.poses), list(self.status), self.d_max, self.baseline)


def track_sequence(sequence: SceneSequence, depth_fields, params: TrackingParams | None = None) -> TrackingResult:
    """Run the pseudo RGB-D backend over a whole sequence."""
    if sequence is None or len(sequence) == 0:
        raise InvalidConfig("empty sequence")
    if len(depth_fields) != len(sequence):
        raise InvalidConfig("one depth field per frame required")
    return _Tracker(sequence, depth_fields, params or TrackingParams()).run()


def write_tum(path, timestamps, poses: list[PoseSE3]) -> None:
    """TUM trajectory: ``timestamp tx ty tz qx qy qz qw`` (camera-to-world), 9 significant digits."""
    lines = []
    for ts, pose in zip(timestamps, poses):
        c = pose.center
        q = rotation_to_quaternion(pose.rotation.T)
        vals = [ts, *c, *q]
        lines.append(" ".join(f"{x:.9g}" for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")
