"""Depth-field refinement by gradient descent on the keyframe losses, poses held fixed."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .geometry import PoseSE3
from .imaging import sample_depth
from .keyframe_graph import KeyframeGraph
from .losses import KeyframeProblem, LossWeights, build_problem, evaluate_keyframe
from .pose_backend import TrackingResult

log = logging.getLogger(__name__)

DEPTH_MIN = 0.1
DEPTH_MAX = 120.0
MAX_HALVINGS = 8


@dataclass(frozen=True)
class RefinerConfig:
    step_size: float = 0.2  # log-depth units per unit (preconditioned) gradient
    epochs: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    depth_min: float = DEPTH_MIN
    depth_max: float = DEPTH_MAX
    min_common: int = 20
    precondition: str = "adam"  # "adam": per-pixel g / (|g| + eps), "none": raw gradient
    adam_eps: float = 1.0  # relative to the mean gradient magnitude

    def __post_init__(self):
        if not self.step_size >= 0:
            raise InvalidConfig("step_size must be non-negative")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be at least 1")
        if not 0 < self.depth_min < self.depth_max:
            raise InvalidConfig("bad clamp bounds")
        if self.precondition not in ("none", "adam"):
            raise InvalidConfig(f"unknown precondition {self.precondition!r}")


@dataclass
class RefineResult:
    fields: list[np.ndarray]
    loss_before: float
    loss_after: float
    steps_taken: int
    no_descent: bool
    breakdown: dict = field(default_factory=dict)  # summed component values after the sweep


def keyframe_problems(graph: KeyframeGraph, images, tracking: TrackingResult, min_common: int = 20):
    return [build_problem(graph, kf.id, images, tracking.poses, tracking.status, min_common) for kf in graph.keyframes]


def summed_loss(problems: list[KeyframeProblem], fields, weights: LossWeights) -> float:
    return float(sum(evaluate_keyframe(p, fields, weights).breakdown.total for p in problems))


def refine_depths(images, tracking: TrackingResult, depth_fields, config: RefinerConfig | None = None,
                  graph: KeyframeGraph | None = None) -> RefineResult:
    """One sweep (per epoch) of backtracked gradient steps over the keyframes.

    For each keyframe ``c`` in temporal order the log-depth fields of c and of
    its wide-baseline neighbours are moved along the negative gradient of its
    total loss. A step is accepted only if the summed loss of every keyframe
    touching those fields does not increase; otherwise it is halved, at most
    8 times. The summed loss over all keyframes is therefore monotone.
    ``graph`` defaults to the tracking graph and should be outlier-filtered.
    """
    config = config or RefinerConfig()
    graph = graph or tracking.graph
    fields = [np.asarray(f, dtype=np.float64).copy() for f in depth_fields]
    problems = keyframe_problems(graph, images, tracking, config.min_common)
    by_frame: dict[int, list[int]] = {}
    for i, p in enumerate(problems):
        for f in p.frames:
            by_frame.setdefault(f, []).append(i)

    W = config.weights
    loss_before = summed_loss(problems, fields, W)
    steps = 0
    attempted = 0
    for _ in range(config.epochs):
        for prob in problems:
            if config.step_size == 0:
                break
            attempted += 1
            res = evaluate_keyframe(prob, fields, W, grad=True)
            grads = {f: g * fields[f] for f, g in res.gradient(W).items()}  # log-depth
            if config.precondition == "adam":
                scale = config.adam_eps * np.mean([np.abs(g).mean() for g in grads.values()])
                grads = {f: g / (np.abs(g) + scale) for f, g in grads.items()} if scale > 0 else grads
            if not any(np.any(g != 0) for g in grads.values()):
                continue
            touched = sorted({i for f in grads for i in by_frame[f]})

            def local(fl):
                return sum(evaluate_keyframe(problems[i], fl, W).breakdown.total for i in touched)

            current = local(fields)
            eta = config.step_size
            for _ in range(MAX_HALVINGS + 1):
                trial = dict(enumerate(fields))
                for f, g in grads.items():
                    trial[f] = np.clip(fields[f] * np.exp(-eta * g), config.depth_min, config.depth_max)
                if local(trial) <= current:
                    for f in grads:
                        fields[f] = trial[f]
                    steps += 1
                    break
                eta *= 0.5
    no_descent = attempted > 0 and steps == 0
    if no_descent:
        log.warning("depth refinement made no descent step; fields left unchanged")
        fields = [np.asarray(f, dtype=np.float64).copy() for f in depth_fields]
    total = None
    for p in problems:
        b = evaluate_keyframe(p, fields, W).breakdown
        total = b if total is None else total + b
    loss_after = total.total if total is not None else 0.0
    return RefineResult(fields, loss_before, loss_after, steps, no_descent, total.as_dict() if total else {})


def transfer_field(depth_src: np.ndarray, T_src_dst: PoseSE3, K, init: np.ndarray, iterations: int = 3):
    """Express the depth map of one frame in another frame by inverse warping.

    Solves, per target pixel q, for the depth z such that back-projecting q
    at z and moving into the source frame lands on a point whose source depth
    agrees; a few fixed-point iterations started from ``init``. Returns the
    new field and the mask of pixels with a valid warp.
    """
    T_dst_src = T_src_dst.inverse()
    rays = K.rays()
    a = rays @ T_dst_src.rotation.T
    z = init.copy()
    valid = np.zeros(z.shape, dtype=bool)
    for _ in range(iterations):
        Y = z[..., None] * a + T_dst_src.translation
        zs = Y[..., 2]
        front = zs > 1e-6
        zsafe = np.where(front, zs, 1.0)
        u = np.where(front, K.fx * Y[..., 0] / zsafe + K.cx, -1.0)
        v = np.where(front, K.fy * Y[..., 1] / zsafe + K.cy, -1.0)
        s = sample_depth(depth_src, u, v)
        valid = s.valid.reshape(z.shape) & front
        d_src = s.values.reshape(z.shape)
        # a point at source depth d_src along the source ray through (u, v), seen from the target
        Xs = np.stack([(u.reshape(z.shape) - K.cx) / K.fx, (v.reshape(z.shape) - K.cy) / K.fy, np.ones(z.shape)], -1)
        Xt = T_src_dst.apply((Xs * d_src[..., None]).reshape(-1, 3)).reshape(z.shape + (3,))
        z = np.where(valid & (Xt[..., 2] > 1e-6), Xt[..., 2], z)
        valid &= Xt[..., 2] > 1e-6
    return np.where(valid, z, init), valid


def propagate_to_nonkeyframes(depth_fields, tracking: TrackingResult, graph: KeyframeGraph | None = None,
                              clamp=(DEPTH_MIN, DEPTH_MAX)) -> list[np.ndarray]:
    """Replace each tracked non-keyframe field by its nearest keyframe's field warped into it."""
    graph = graph or tracking.graph
    K = graph.intrinsics
    kf_frames = sorted(kf.frame_index for kf in graph.keyframes)
    out = [np.asarray(f, dtype=np.float64).copy() for f in depth_fields]
    if not kf_frames:
        return out
    kf_set = set(kf_frames)
    arr = np.asarray(kf_frames)
    for j in range(len(out)):
        if j in kf_set or tracking.status[j] != "tracked":
            continue
        k = int(arr[np.argmin(np.abs(arr - j))])  # ties go to the earlier keyframe
        T = tracking.poses[j] @ tracking.poses[k].inverse()
        new, _ = transfer_field(depth_fields[k], T, K, out[j])
        out[j] = np.clip(new, *clamp)
    return out
