"""Pinhole camera model, rigid/similarity transforms and depth transfer.

Pixels and points are plain numpy arrays: a pixel is ``(u, v)`` and a point
is ``(x, y, z)`` in a camera frame. Most helpers accept stacked inputs of
shape ``(N, 2)`` / ``(N, 3)`` as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateDepth, InvalidConfig

ORTHO_TOL = 1e-9

# Stereo rig the adaptive baseline mimics (KITTI): baseline and max depth, meters.
KITTI_BASELINE = 0.54
KITTI_MAX_DEPTH = 80.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidConfig("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise InvalidConfig("image must be at least 2x2")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidConfig("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer pixel coordinates ``(u, v)`` as float grids of shape (H, W)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def rays(self) -> np.ndarray:
        """Per-pixel rays ``K^-1 [u, v, 1]`` with unit z, shape (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise InvalidConfig(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise InvalidConfig("rotation is not orthonormal with det +1")


@dataclass(frozen=True)
class PoseSE3:
    """Rigid motion ``X' = R X + t``.

    Camera poses are stored world-to-camera throughout the package.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "PoseSE3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "PoseSE3":
        return cls(so3_exp(rotvec), translation)

    @classmethod
    def _unchecked(cls, R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        # re-orthonormalize to keep drift from accumulating through long chains
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return cls(R, t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3._unchecked(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def retract(self, xi) -> "PoseSE3":
        """Left perturbation: rotation increment ``xi[:3]``, translation ``xi[3:]``."""
        xi = np.asarray(xi, dtype=np.float64)
        dR = so3_exp(xi[:3])
        return PoseSE3._unchecked(dR @ self.rotation, dR @ self.translation + xi[3:])

    @property
    def center(self) -> np.ndarray:
        """Camera center in the source frame (for world-to-camera poses, the world)."""
        return -self.rotation.T @ self.translation

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(
            np.abs(self.rotation - other.rotation).max() <= atol
            and np.abs(self.translation - other.translation).max() <= atol
        )


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity ``X' = s R X + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidConfig("similarity scale must be positive")
        R = np.array(self.rotation, dtype=np.float64)
        _check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3Transform":
        Rt = self.rotation.T
        return Sim3Transform(1.0 / self.scale, Rt, -Rt @ self.translation / self.scale)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def to_se3(self) -> PoseSE3:
        if abs(self.scale - 1.0) > ORTHO_TOL:
            raise InvalidConfig("similarity has non-unit scale")
        return PoseSE3(self.rotation, self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    q = Rotation.from_matrix(R).as_quat()
    return -q if q[3] < 0 else q


def quaternion_to_rotation(q) -> np.ndarray:
    return Rotation.from_quat(np.asarray(q, dtype=np.float64)).as_matrix()


# ---------------------------------------------------------------- projection


def back_project(p, d, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) ``p`` with depth(s) ``d`` to camera-frame point(s)."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise DegenerateDepth("pixel coordinates must be finite")
    if np.any(~(d > 0)):
        raise DegenerateDepth("depth must be positive")
    x = (p[..., 0] - K.cx) / K.fx * d
    y = (p[..., 1] - K.cy) / K.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def project(K: CameraIntrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Pixel(s) and depth(s) of camera-frame point(s) ``X``."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    if np.any(~(z > 0)):
        raise BehindCamera("point at or behind the image plane")
    u = K.fx * X[..., 0] / z + K.cx
    v = K.fy * X[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def transfer_depth(p, d, T: PoseSE3, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Move pixel/depth from one camera into another related by ``T``."""
    return project(K, T.apply(back_project(p, d, K)))


def adaptive_baseline(d_max: float) -> float:
    """Virtual stereo baseline scaled so that ``d_max`` plays the role of KITTI's 80 m."""
    if not d_max > 0:
        raise DegenerateDepth("maximum depth must be positive")
    return KITTI_BASELINE / KITTI_MAX_DEPTH * d_max


def virtual_stereo_disparity(u_l, d, fx: float, b: float):
    """Right-view horizontal coordinate ``u_r = u_l - fx * b / d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DegenerateDepth("depth must be positive")
    if not (fx > 0 and b > 0):
        raise DegenerateDepth("focal length and baseline must be positive")
    u_r = np.asarray(u_l, dtype=np.float64) - fx * b / d
    return float(u_r) if u_r.ndim == 0 else u_r
