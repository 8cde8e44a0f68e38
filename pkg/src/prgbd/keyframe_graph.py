"""Keyframes, map points and the queries the depth losses need."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, InvalidTriple, NotFound, OutOfBounds
from .geometry import CameraIntrinsics, PoseSE3, project

MIN_OBSERVATIONS = 3
MAX_REPROJ_PX = 3.0


@dataclass
class Keyframe:
    id: int
    frame_index: int
    pose: PoseSE3
    # map-point id -> depth of the bundle-adjusted point in this camera
    slam_depths: dict[int, float] = field(default_factory=dict)
    # map-point id -> pseudo depth read from the input depth field at the keypoint
    measured_depths: dict[int, float] = field(default_factory=dict)


@dataclass
class MapPoint:
    id: int
    world_position: np.ndarray
    # keyframe id -> observed pixel
    observations: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class KeyframeGraph:
    intrinsics: CameraIntrinsics
    keyframes: list[Keyframe] = field(default_factory=list)
    map_points: dict[int, MapPoint] = field(default_factory=dict)
    baseline: float = 0.0

    def keyframe(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise NotFound(f"keyframe {kf_id}")

    def keyframe_ids(self) -> list[int]:
        return [kf.id for kf in self.keyframes]

    def points_in(self, kf_id: int) -> set[int]:
        return {pid for pid, mp in self.map_points.items() if kf_id in mp.observations}

    @property
    def covisibility(self) -> dict[int, set[int]]:
        cov: dict[int, set[int]] = {kf.id: set() for kf in self.keyframes}
        for mp in self.map_points.values():
            ids = list(mp.observations)
            for a in ids:
                cov[a].update(b for b in ids if b != a)
        return cov

    def copy(self) -> "KeyframeGraph":
        return copy.deepcopy(self)

    def refresh_slam_depths(self, kf_ids=None) -> None:
        """Recompute d(SLAM) for the given keyframes (all by default)."""
        wanted = None if kf_ids is None else set(kf_ids)
        per_kf: dict[int, list[int]] = {}
        for pid, mp in self.map_points.items():
            for k in mp.observations:
                if wanted is None or k in wanted:
                    per_kf.setdefault(k, []).append(pid)
        for kf in self.keyframes:
            if wanted is not None and kf.id not in wanted:
                continue
            pids = per_kf.get(kf.id, [])
            kf.slam_depths = {}
            if not pids:
                continue
            X = np.array([self.map_points[p].world_position for p in pids])
            z = kf.pose.apply(X)[:, 2]
            kf.slam_depths = {p: float(d) for p, d in zip(pids, z) if d > 0}


def common_tracked_keypoints(graph: KeyframeGraph, k1: int, c: int, k2: int):
    """Map points seen in all three keyframes, as ``(id, p_k1, p_c, p_k2)`` sorted by id."""
    for k in (k1, c, k2):
        graph.keyframe(k)
    if not (k1 < c < k2):
        raise InvalidTriple(f"need k1 < c < k2, got {k1}, {c}, {k2}")
    out = []
    for pid in sorted(graph.map_points):
        obs = graph.map_points[pid].observations
        if k1 in obs and c in obs and k2 in obs:
            out.append((pid, obs[k1], obs[c], obs[k2]))
    return out


def reprojection_error(point: MapPoint, kf: Keyframe, K: CameraIntrinsics) -> float:
    if kf.id not in point.observations:
        raise NotFound(f"point {point.id} not observed in keyframe {kf.id}")
    uv, _ = project(K, kf.pose.apply(point.world_position))
    return float(np.linalg.norm(uv - point.observations[kf.id]))


def filter_outliers(graph: KeyframeGraph, current: int, max_error: float = MAX_REPROJ_PX) -> KeyframeGraph:
    """Drop map points seen in fewer than 3 keyframes or reprojecting badly in ``current``."""
    cur = graph.keyframe(current)
    K = graph.intrinsics
    drop = set()
    for pid, mp in graph.map_points.items():
        if len(mp.observations) < MIN_OBSERVATIONS:
            drop.add(pid)
        elif current in mp.observations:
            try:
                if reprojection_error(mp, cur, K) > max_error:
                    drop.add(pid)
            except BehindCamera:
                drop.add(pid)
    return _without(graph, drop)


def filter_outliers_all(graph: KeyframeGraph, max_error: float = MAX_REPROJ_PX) -> KeyframeGraph:
    """Apply :func:`filter_outliers` with every keyframe in turn as the current one."""
    for kf_id in graph.keyframe_ids():
        graph = filter_outliers(graph, kf_id, max_error)
    return graph


def _without(graph: KeyframeGraph, drop: set[int]) -> KeyframeGraph:
    out = graph.copy()
    for pid in drop:
        del out.map_points[pid]
    for kf in out.keyframes:
        kf.slam_depths = {p: d for p, d in kf.slam_depths.items() if p not in drop}
        kf.measured_depths = {p: d for p, d in kf.measured_depths.items() if p not in drop}
    return out


def patch_coordinates(p, size: int = 5, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Integer-offset ``size x size`` patch around ``p``, clipped to the image."""
    p = np.asarray(p, dtype=np.float64)
    if width is None or height is None:
        raise ValueError("image size required")
    if not (0 <= p[0] <= width - 1 and 0 <= p[1] <= height - 1):
        raise OutOfBounds(f"pixel {p} outside {width}x{height} image")
    r = size // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    du, dv = np.meshgrid(off, off)
    pts = np.stack([p[0] + du.ravel(), p[1] + dv.ravel()], axis=1)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)
    return pts[keep]


def patch_offsets(size: int = 5) -> np.ndarray:
    r = size // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    du, dv = np.meshgrid(off, off)
    return np.stack([du.ravel(), dv.ravel()], axis=1)


def select_neighbors(graph: KeyframeGraph, c: int, min_common: int = 20) -> tuple[int, int] | None:
    """Nearest earlier and later keyframes sharing at least ``min_common`` points with ``c``."""
    ids = graph.keyframe_ids()
    if c not in ids:
        raise NotFound(f"keyframe {c}")
    counts: dict[int, int] = {}
    for mp in graph.map_points.values():
        if c in mp.observations:
            for k in mp.observations:
                if k != c:
                    counts[k] = counts.get(k, 0) + 1
    before = [k for k in ids if k < c and counts.get(k, 0) >= min_common]
    after = [k for k in ids if k > c and counts.get(k, 0) >= min_common]
    if not before or not after:
        return None
    return max(before), min(after)


def dump_graph(graph: KeyframeGraph, path) -> None:
    """One map point per line: ``id x y z kf:u:v kf:u:v ...``."""
    lines = ["# id x y z then keyframe:u:v per observation"]
    for pid in sorted(graph.map_points):
        mp = graph.map_points[pid]
        obs = " ".join(f"{k}:{uv[0]:.4f}:{uv[1]:.4f}" for k, uv in sorted(mp.observations.items()))
        x, y, z = mp.world_position
        lines.append(f"{pid} {x:.6f} {y:.6f} {z:.6f} {obs}")
    Path(path).write_text("\n".join(lines) + "\n")
