"""Narrow- and wide-baseline depth losses with analytic gradients.

Every loss here works on depth grids in meters and can return the gradient
with respect to those grids; :func:`total_loss_gradient` converts to the
log-depth parameterization the refiner optimizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .geometry import CameraIntrinsics, PoseSE3
from .imaging import BilinearSample, bilinear_sample, sample_depth, ssim, ssim_backward
from .keyframe_graph import KeyframeGraph, common_tracked_keypoints, patch_offsets, select_neighbors

SSIM_WEIGHT = 0.85
L1_WEIGHT = 0.15
PATCH_SIZE = 5
_MIN_Z = 1e-6
# a transferred point farther than this factor beyond the target surface is treated as occluded
OCCLUSION_RATIO = 1.25

COMPONENTS = ("photometric", "smoothness", "consistency", "transfer_c_k1", "transfer_c_k2", "transfer_k1_k2")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # photometric
    beta: float = 0.001  # smoothness
    gamma: float = 1.0  # depth consistency
    mu: float = 1.0  # symmetric depth transfer

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.mu) < 0:
            raise InvalidConfig("loss weights must be non-negative")

    def of(self, component: str) -> float:
        if component == "photometric":
            return self.alpha
        if component == "smoothness":
            return self.beta
        if component == "consistency":
            return self.gamma
        return self.mu


@dataclass
class LossBreakdown:
    photometric: float = 0.0
    smoothness: float = 0.0
    consistency: float = 0.0
    transfer_c_k1: float = 0.0
    transfer_c_k2: float = 0.0
    transfer_k1_k2: float = 0.0
    total: float = 0.0
    absent: frozenset = frozenset()

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in COMPONENTS + ("total",)}

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        vals = {k: getattr(self, k) + getattr(other, k) for k in COMPONENTS + ("total",)}
        return LossBreakdown(**vals, absent=self.absent & other.absent)


def total_loss(components: dict, weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted sum of the loss components; missing or ``None`` entries count as 0 and absent."""
    weights = weights or LossWeights()
    vals = {}
    absent = set()
    for name in COMPONENTS:
        v = components.get(name)
        if v is None:
            absent.add(name)
            v = 0.0
        vals[name] = float(v)
    total = (
        weights.alpha * vals["photometric"]
        + weights.beta * vals["smoothness"]
        + weights.gamma * vals["consistency"]
        + weights.mu * (vals["transfer_c_k1"] + vals["transfer_c_k2"] + vals["transfer_k1_k2"])
    )
    return LossBreakdown(**vals, total=total, absent=frozenset(absent))


# ------------------------------------------------------------------ depth lookups


def _lookup(depth, u, v) -> BilinearSample:
    """Sample a depth grid (inverse-depth bilinear), or a lookup object via its ``sample``."""
    if isinstance(depth, np.ndarray):
        return sample_depth(depth, u, v)
    values, valid = depth.sample(u, v)
    n = len(values)
    z = np.zeros(n)
    return BilinearSample(values, z, z.copy(), valid, np.zeros((n, 4), dtype=np.int64), np.zeros((n, 4)))


def as_grid(depth) -> np.ndarray:
    """Dense (H, W) depth values of a grid or lookup object."""
    if isinstance(depth, np.ndarray):
        return depth
    H, W = depth.shape
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    values, _ = depth.sample(uu, vv)
    return values.reshape(H, W)


def _shape(depth) -> tuple[int, int]:
    return tuple(depth.shape)


# ------------------------------------------------------------------ photometric


@dataclass
class _Warp:
    values: np.ndarray  # synthesized image (target intensity where invalid)
    valid: np.ndarray
    dx_dd: np.ndarray  # derivative of synthesized intensity wrt depth, per pixel


def _warp_image(src: np.ndarray, target: np.ndarray, depth: np.ndarray, T: PoseSE3, K: CameraIntrinsics) -> _Warp:
    rays = K.rays()
    a = rays @ T.rotation.T
    Y = depth[..., None] * a + T.translation
    z = Y[..., 2]
    front = z > _MIN_Z
    zs = np.where(front, z, 1.0)
    u = K.fx * Y[..., 0] / zs + K.cx
    v = K.fy * Y[..., 1] / zs + K.cy
    u = np.where(front, u, -1.0)
    s = bilinear_sample(src, u, v)
    valid = (s.valid & front.ravel()).reshape(depth.shape)
    values = np.where(valid, s.values.reshape(depth.shape), target)
    du_dd = K.fx * (a[..., 0] * zs - Y[..., 0] * a[..., 2]) / zs**2
    dv_dd = K.fy * (a[..., 1] * zs - Y[..., 1] * a[..., 2]) / zs**2
    dx_dd = s.du.reshape(depth.shape) * du_dd + s.dv.reshape(depth.shape) * dv_dd
    return _Warp(values, valid, np.where(valid, dx_dd, 0.0))


def photometric_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel ``0.85/2 (1 - SSIM) + 0.15 |a - b|``."""
    return SSIM_WEIGHT / 2 * (1.0 - ssim(a, b)) + L1_WEIGHT * np.abs(a - b)


@dataclass
class TermResult:
    value: float | None  # None when the term is absent
    grads: dict = field(default_factory=dict)  # key -> gradient grid wrt that depth field


def photometric_loss(
    image_c: np.ndarray,
    image_prev: np.ndarray | None,
    image_next: np.ndarray | None,
    depth_c: np.ndarray,
    pose_c_to_prev: PoseSE3 | None,
    pose_c_to_next: PoseSE3 | None,
    K: CameraIntrinsics,
    grad: bool = False,
) -> TermResult:
    """Reconstruct the keyframe from its neighbours and score it.

    Poses map points from the keyframe camera into each source camera. The
    per-pixel minimum over sources is averaged over pixels with at least one
    valid warp. A source given as ``None`` is skipped.
    """
    depth_c = as_grid(depth_c)
    warps = []
    for img, T in ((image_prev, pose_c_to_prev), (image_next, pose_c_to_next)):
        if img is not None and T is not None:
            warps.append(_warp_image(img, image_c, depth_c, T, K))
    if not warps:
        return TermResult(None)
    pes = []
    for w in warps:
        pe = photometric_error(w.values, image_c)
        pes.append(np.where(w.valid, pe, np.inf))
    pes = np.stack(pes)
    best = np.argmin(pes, axis=0)
    pe_min = np.take_along_axis(pes, best[None], 0)[0]
    mask = np.isfinite(pe_min)
    n = int(mask.sum())
    if n == 0:
        return TermResult(None)
    value = float(pe_min[mask].mean())
    if not grad:
        return TermResult(value)
    g = np.zeros_like(depth_c)
    for k, w in enumerate(warps):
        up = ((best == k) & mask) / n
        if not up.any():
            continue
        g_x = ssim_backward(w.values, image_c, -SSIM_WEIGHT / 2 * up)
        g_x += L1_WEIGHT * np.sign(w.values - image_c) * up
        g += g_x * w.dx_dd
    return TermResult(value, {"c": g})


# ------------------------------------------------------------------ smoothness


def smoothness_loss(depth: np.ndarray, image: np.ndarray, grad: bool = False) -> TermResult:
    """Edge-aware first-order smoothness of the mean-normalized depth."""
    depth = as_grid(depth)
    m = depth.mean()
    dn = depth / m
    gx = dn[:, 1:] - dn[:, :-1]
    gy = dn[1:, :] - dn[:-1, :]
    wx = np.exp(-np.abs(image[:, 1:] - image[:, :-1]))
    wy = np.exp(-np.abs(image[1:, :] - image[:-1, :]))
    value = float(np.mean(np.abs(gx) * wx) + np.mean(np.abs(gy) * wy))
    if not grad:
        return TermResult(value)
    Gx = np.sign(gx) * wx / gx.size
    Gy = np.sign(gy) * wy / gy.size
    g_dn = np.zeros_like(depth)
    g_dn[:, 1:] += Gx
    g_dn[:, :-1] -= Gx
    g_dn[1:, :] += Gy
    g_dn[:-1, :] -= Gy
    g = g_dn / m - np.sum(g_dn * depth) / (m * m * depth.size)
    return TermResult(value, {"c": g})


# ------------------------------------------------------------------ depth consistency


def depth_consistency(depth_c: np.ndarray, keypoints_c, slam_depths, grad: bool = False) -> TermResult:
    """Mean absolute gap between field depths at keypoints and SLAM depths."""
    kp = np.asarray(keypoints_c, dtype=np.float64).reshape(-1, 2)
    sd = np.asarray(slam_depths, dtype=np.float64).ravel()
    if len(kp) == 0:
        return TermResult(None)
    s = _lookup(depth_c, kp[:, 0], kp[:, 1])
    ok = s.valid
    n = int(ok.sum())
    if n == 0:
        return TermResult(None)
    e = np.where(ok, s.values - sd, 0.0)
    value = float(np.abs(e).sum() / n)
    if not grad:
        return TermResult(value)
    return TermResult(value, {"c": s.scatter(np.sign(e) / n, _shape(depth_c))})


# ------------------------------------------------------------------ symmetric depth transfer


@dataclass
class _Directed:
    term: np.ndarray  # |transferred depth - target depth| per sample (0 where invalid)
    ok: np.ndarray
    src_sample: object
    dst_sample: object
    de_dd: np.ndarray
    sign: np.ndarray


def _directed_transfer(kp_src, depth_src, depth_dst, T: PoseSE3, K: CameraIntrinsics, offsets) -> _Directed:
    q = (kp_src[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    s_src = _lookup(depth_src, q[:, 0], q[:, 1])
    d = np.where(s_src.valid, s_src.values, 1.0)
    rays = np.stack([(q[:, 0] - K.cx) / K.fx, (q[:, 1] - K.cy) / K.fy, np.ones(len(q))], axis=1)
    a = rays @ T.rotation.T
    Y = d[:, None] * a + T.translation
    z = Y[:, 2]
    ok = s_src.valid & (z > _MIN_Z)
    zs = np.where(ok, z, 1.0)
    u = np.where(ok, K.fx * Y[:, 0] / zs + K.cx, -1.0)
    v = np.where(ok, K.fy * Y[:, 1] / zs + K.cy, -1.0)
    s_dst = _lookup(depth_dst, u, v)
    ok &= s_dst.valid & (z <= OCCLUSION_RATIO * s_dst.values)
    e = np.where(ok, z - s_dst.values, 0.0)
    du_dd = K.fx * (a[:, 0] * zs - Y[:, 0] * a[:, 2]) / zs**2
    dv_dd = K.fy * (a[:, 1] * zs - Y[:, 1] * a[:, 2]) / zs**2
    de_dd = a[:, 2] - (s_dst.du * du_dd + s_dst.dv * dv_dd)
    return _Directed(np.abs(e), ok, s_src, s_dst, de_dd, np.sign(e))


def _pair_transfer(kp_a, kp_b, depth_a, depth_b, T_ab: PoseSE3, K, offsets, grad: bool) -> TermResult:
    """Mean of renormalized symmetric transfer over keypoints and patch offsets."""
    fwd = _directed_transfer(kp_a, depth_a, depth_b, T_ab, K, offsets)
    bwd = _directed_transfer(kp_b, depth_b, depth_a, T_ab.inverse(), K, offsets)
    both = fwd.ok & bwd.ok
    any_ok = fwd.ok | bwd.ok
    n = int(any_ok.sum())
    if n == 0:
        return TermResult(None)
    # a pair with one skipped direction counts its surviving direction twice
    wf = np.where(fwd.ok, np.where(both, 1.0, 2.0), 0.0)
    wb = np.where(bwd.ok, np.where(both, 1.0, 2.0), 0.0)
    value = float((wf * fwd.term + wb * bwd.term).sum() / n)
    if not grad:
        return TermResult(value)
    shape = _shape(depth_a)
    ga = np.zeros(shape)
    gb = np.zeros(shape)
    for dirn, w, g_src, g_dst in ((fwd, wf, ga, gb), (bwd, wb, gb, ga)):
        up = w * dirn.sign / n
        g_src += dirn.src_sample.scatter(up * dirn.de_dd, shape)
        g_dst -= dirn.dst_sample.scatter(up, shape)
    return TermResult(value, {"a": ga, "b": gb})


def symmetric_transfer_pair(p_a, p_b, depth_a, depth_b, T_ab: PoseSE3, K: CameraIntrinsics) -> float:
    """Bidirectional L1 depth-transfer error of one keypoint between two frames.

    ``depth_a``/``depth_b`` are depth grids read bilinearly; ``T_ab`` maps
    frame-a camera points into frame b. Returns NaN when both directions are
    skipped (transfer behind the camera or out of view); one skipped
    direction doubles the other.
    """
    res = _pair_transfer(
        np.asarray(p_a, float).reshape(1, 2),
        np.asarray(p_b, float).reshape(1, 2),
        depth_a,
        depth_b,
        T_ab,
        K,
        np.zeros((1, 2)),
        grad=False,
    )
    return float("nan") if res.value is None else res.value


# ------------------------------------------------------------------ per-keyframe problem


@dataclass
class KeyframeProblem:
    """Everything the total loss of one keyframe needs, except the depth fields."""

    K: CameraIntrinsics
    c: int  # frame indices
    k1: int | None
    k2: int | None
    image_c: np.ndarray
    image_prev: np.ndarray | None
    image_next: np.ndarray | None
    pose_c_to_prev: PoseSE3 | None
    pose_c_to_next: PoseSE3 | None
    kp_c: np.ndarray  # common tracked keypoints in c, k1, k2 (n, 2)
    kp_k1: np.ndarray
    kp_k2: np.ndarray
    slam_c: np.ndarray  # SLAM depths of those keypoints in c
    T_c_k1: PoseSE3 | None = None
    T_c_k2: PoseSE3 | None = None
    T_k1_k2: PoseSE3 | None = None

    @property
    def frames(self) -> list[int]:
        return [f for f in (self.c, self.k1, self.k2) if f is not None]

    @property
    def wide(self) -> bool:
        return self.k1 is not None and len(self.kp_c) > 0


def build_problem(
    graph: KeyframeGraph,
    kf_id: int,
    images,
    poses,
    status=None,
    min_common: int = 20,
) -> KeyframeProblem:
    """Assemble the loss inputs for keyframe ``kf_id`` from SLAM outputs."""
    K = graph.intrinsics
    kf = graph.keyframe(kf_id)
    c = kf.frame_index
    n = len(images)

    def usable(j):
        return 0 <= j < n and poses[j] is not None and (status is None or status[j] == "tracked")

    Pc_inv = kf.pose.inverse()
    prev_ok, next_ok = usable(c - 1), usable(c + 1)
    empty = np.zeros((0, 2))
    prob = KeyframeProblem(
        K=K,
        c=c,
        k1=None,
        k2=None,
        image_c=images[c],
        image_prev=images[c - 1] if prev_ok else None,
        image_next=images[c + 1] if next_ok else None,
        pose_c_to_prev=(poses[c - 1] @ Pc_inv) if prev_ok else None,
        pose_c_to_next=(poses[c + 1] @ Pc_inv) if next_ok else None,
        kp_c=empty,
        kp_k1=empty,
        kp_k2=empty,
        slam_c=np.zeros(0),
    )
    nb = select_neighbors(graph, kf_id, min_common)
    if nb is None:
        return prob
    k1_id, k2_id = nb
    common = [t for t in common_tracked_keypoints(graph, k1_id, kf_id, k2_id) if t[0] in kf.slam_depths]
    if not common:
        return prob
    kf1, kf2 = graph.keyframe(k1_id), graph.keyframe(k2_id)
    prob.k1, prob.k2 = kf1.frame_index, kf2.frame_index
    prob.kp_k1 = np.array([t[1] for t in common])
    prob.kp_c = np.array([t[2] for t in common])
    prob.kp_k2 = np.array([t[3] for t in common])
    prob.slam_c = np.array([kf.slam_depths[t[0]] for t in common])
    prob.T_c_k1 = kf1.pose @ Pc_inv
    prob.T_c_k2 = kf2.pose @ Pc_inv
    prob.T_k1_k2 = kf2.pose @ kf1.pose.inverse()
    return prob


@dataclass
class KeyframeLoss:
    breakdown: LossBreakdown
    # component -> {frame index -> d(component)/d(depth grid)}
    component_grads: dict = field(default_factory=dict)

    def gradient(self, weights: LossWeights) -> dict[int, np.ndarray]:
        """d(total)/d(depth) per frame index."""
        out: dict[int, np.ndarray] = {}
        for comp, per_frame in self.component_grads.items():
            w = weights.of(comp)
            for f, g in per_frame.items():
                out[f] = out[f] + w * g if f in out else w * g
        return out


def evaluate_keyframe(
    prob: KeyframeProblem, fields, weights: LossWeights | None = None, grad: bool = False
) -> KeyframeLoss:
    """Total loss of one keyframe; ``fields`` maps frame index to depth grid."""
    weights = weights or LossWeights()
    K = prob.K
    dc = fields[prob.c]
    comps: dict[str, float | None] = {}
    cgrads: dict[str, dict[int, np.ndarray]] = {}

    def keep(name, res: TermResult, frame_of: dict):
        comps[name] = res.value
        if grad and res.value is not None:
            cgrads[name] = {frame_of[k]: g for k, g in res.grads.items()}

    keep(
        "photometric",
        photometric_loss(
            prob.image_c, prob.image_prev, prob.image_next, dc, prob.pose_c_to_prev, prob.pose_c_to_next, K, grad
        ),
        {"c": prob.c},
    )
    keep("smoothness", smoothness_loss(dc, prob.image_c, grad), {"c": prob.c})
    if prob.wide:
        d1, d2 = fields[prob.k1], fields[prob.k2]
        off = patch_offsets(PATCH_SIZE)
        keep("consistency", depth_consistency(dc, prob.kp_c, prob.slam_c, grad), {"c": prob.c})
        keep("transfer_c_k1", _pair_transfer(prob.kp_c, prob.kp_k1, dc, d1, prob.T_c_k1, K, off, grad),
             {"a": prob.c, "b": prob.k1})
        keep("transfer_c_k2", _pair_transfer(prob.kp_c, prob.kp_k2, dc, d2, prob.T_c_k2, K, off, grad),
             {"a": prob.c, "b": prob.k2})
        keep("transfer_k1_k2", _pair_transfer(prob.kp_k1, prob.kp_k2, d1, d2, prob.T_k1_k2, K, off, grad),
             {"a": prob.k1, "b": prob.k2})
    return KeyframeLoss(total_loss(comps, weights), cgrads)


def total_loss_gradient(prob: KeyframeProblem, fields, weights: LossWeights | None = None) -> dict[int, np.ndarray]:
    """Gradient of the keyframe's total loss wrt log-depth, per frame index."""
    weights = weights or LossWeights()
    res = evaluate_keyframe(prob, fields, weights, grad=True)
    return {f: g * fields[f] for f, g in res.gradient(weights).items()}


@dataclass
class TransferTotals:
    c_k1: float
    c_k2: float
    k1_k2: float
    absent: bool


def symmetric_transfer_total(graph: KeyframeGraph, c: int, k1: int, k2: int, depth_fields) -> TransferTotals:
    """Patch-averaged symmetric transfer losses for the keyframe triple (ids)."""
    K = graph.intrinsics
    common = common_tracked_keypoints(graph, k1, c, k2)
    if not common:
        return TransferTotals(0.0, 0.0, 0.0, True)
    kf_c, kf_1, kf_2 = graph.keyframe(c), graph.keyframe(k1), graph.keyframe(k2)
    p1 = np.array([t[1] for t in common])
    pc = np.array([t[2] for t in common])
    p2 = np.array([t[3] for t in common])
    dc, d1, d2 = (depth_fields[k.frame_index] for k in (kf_c, kf_1, kf_2))
    off = patch_offsets(PATCH_SIZE)
    Pc_inv = kf_c.pose.inverse()
    vals = [
        _pair_transfer(pc, p1, dc, d1, kf_1.pose @ Pc_inv, K, off, False).value,
        _pair_transfer(pc, p2, dc, d2, kf_2.pose @ Pc_inv, K, off, False).value,
        _pair_transfer(p1, p2, d1, d2, kf_2.pose @ kf_1.pose.inverse(), K, off, False).value,
    ]
    return TransferTotals(*(0.0 if v is None else v for v in vals), absent=all(v is None for v in vals))
