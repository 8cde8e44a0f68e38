"""Synthetic textured scenes, ray-cast ground truth and depth corruption.

A scene is a handful of planes and spheres carrying smooth procedural
solid textures (sums of sinusoids of the world point), so intensities are
view-independent and image gradients exist everywhere. Surfaces given the
same wavelength share one texture and meet without an intensity seam.
Frames are rendered along a piecewise-linear camera path.

Scene files are plain ``key = value`` text; repeated keys accumulate::

    width = 64
    height = 48
    fx = 60
    fy = 60
    cx = 32
    cy = 24
    frames = 200
    dt = 0.1
    seed = 42
    plane = 0 1 0 1.6 30           # nx ny nz offset wavelength  (n . X = offset)
    sphere = 0 -0.5 18 3 30        # cx cy cz radius wavelength
    waypoint = -6 0 0 10 0         # x y z yaw_deg pitch_deg (camera center, world)
    noise_sigma0 = 0.2
    noise_gamma = 1.0
    noise_seed = 7

World axes follow the camera convention (x right, y down, z forward).
Unknown keys are kept so other tools can share one file.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyView, InvalidConfig
from .geometry import CameraIntrinsics, PoseSE3

MAX_SCENE_DEPTH = 80.0
MIN_DEPTH = 0.1
TEXTURE_TERMS = 4
_TEXTURE_AMPLITUDES = (0.12, 0.08, 0.06, 0.04)
_TEXTURE_WAVELENGTH_FACTORS = (1.0, 0.71, 0.53, 1.37)


def parse_kv(text: str) -> dict[str, list[str]]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out.setdefault(key, []).append(value)
    return out


def _floats(value: str, n: int, key: str) -> list[float]:
    parts = value.split()
    if len(parts) != n:
        raise InvalidConfig(f"{key}: expected {n} numbers, got {value!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise InvalidConfig(f"{key}: {exc}") from None


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    offset: float
    wavelength: float


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    wavelength: float


@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0


@dataclass(frozen=True)
class NoiseModel:
    sigma0: float = 0.2
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma0 < 0 or self.gamma < 0:
            raise InvalidConfig("noise parameters must be non-negative")


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 48
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 32.0
    cy: float = 24.0
    frames: int = 200
    dt: float = 0.1
    seed: int = 42
    surfaces: tuple = ()
    waypoints: tuple = ()
    noise: NoiseModel = field(default_factory=NoiseModel)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @classmethod
    def from_kv(cls, kv: dict[str, list[str]]) -> "SceneConfig":
        base = default_scene_config()

        def scalar(key, cast, default):
            if key not in kv:
                return default
            try:
                return cast(kv[key][-1])
            except ValueError:
                raise InvalidConfig(f"{key}: cannot parse {kv[key][-1]!r}") from None

        surfaces = []
        for v in kv.get("plane", []):
            nx, ny, nz, off, wl = _floats(v, 5, "plane")
            surfaces.append(Plane((nx, ny, nz), off, wl))
        for v in kv.get("sphere", []):
            x, y, z, r, wl = _floats(v, 5, "sphere")
            surfaces.append(Sphere((x, y, z), r, wl))
        waypoints = []
        for v in kv.get("waypoint", []):
            x, y, z, yaw, pitch = _floats(v, 5, "waypoint")
            waypoints.append(Waypoint((x, y, z), yaw, pitch))
        noise = NoiseModel(
            scalar("noise_sigma0", float, base.noise.sigma0),
            scalar("noise_gamma", float, base.noise.gamma),
            scalar("noise_seed", int, base.noise.seed),
        )
        return cls(
            width=scalar("width", int, base.width),
            height=scalar("height", int, base.height),
            fx=scalar("fx", float, base.fx),
            fy=scalar("fy", float, base.fy),
            cx=scalar("cx", float, base.cx),
            cy=scalar("cy", float, base.cy),
            frames=scalar("frames", int, base.frames),
            dt=scalar("dt", float, base.dt),
            seed=scalar("seed", int, base.seed),
            surfaces=tuple(surfaces) if surfaces else base.surfaces,
            waypoints=tuple(waypoints) if waypoints else base.waypoints,
            noise=noise,
        )

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        return cls.from_kv(parse_kv(Path(path).read_text()))


def default_scene_config(**overrides) -> SceneConfig:
    """Ground plane, far wall and a side wall seen from a sideways-forward path."""
    cfg = SceneConfig(
        surfaces=(
            Plane((0.0, 1.0, 0.0), 1.6, 30.0),
            Plane((0.0, 0.0, 1.0), 45.0, 30.0),
            Plane((1.0, 0.0, 0.0), -14.0, 30.0),
        ),
        waypoints=(
            Waypoint((-6.0, 0.0, 0.0), 10.0, 0.0),
            Waypoint((-1.0, -0.4, 6.0), 0.0, 2.0),
            Waypoint((6.0, 0.0, 8.0), -10.0, 0.0),
        ),
    )
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


# ------------------------------------------------------------------ textures


class _Texture:
    """Solid texture: a sum of sinusoids of the 3D world point."""

    def __init__(self, wavelength: float, rng: np.random.Generator):
        dirs = rng.standard_normal((TEXTURE_TERMS, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wl = wavelength * np.asarray(_TEXTURE_WAVELENGTH_FACTORS)
        self.freqs = 2 * np.pi * dirs / wl[:, None]
        self.phases = rng.uniform(0, 2 * np.pi, TEXTURE_TERMS)
        self.base = rng.uniform(0.4, 0.6)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        val = np.full(X.shape[0], self.base)
        for k in range(TEXTURE_TERMS):
            val += _TEXTURE_AMPLITUDES[k] * np.sin(X @ self.freqs[k] + self.phases[k])
        return val


class _Surface:
    """A surface bound to its texture."""

    def __init__(self, spec, texture: _Texture):
        self.spec = spec
        self.texture = texture

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the nearest hit (inf on miss). ``dirs`` is (N, 3)."""
        s = self.spec
        if isinstance(s, Plane):
            n = np.asarray(s.normal, dtype=np.float64)
            n = n / np.linalg.norm(n)
            off = s.offset / np.linalg.norm(s.normal)
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (off - origin @ n) / denom
            return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        c = np.asarray(s.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        cc = oc @ oc - s.radius**2
        disc = b * b - a * cc
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - root) / a
        t_far = (-b + root) / a
        t = np.where(t_near > 1e-9, t_near, np.where(t_far > 1e-9, t_far, np.inf))
        return np.where(disc >= 0, t, np.inf)


def build_surfaces(config: SceneConfig) -> list[_Surface]:
    """Bind textures to surfaces; surfaces with equal wavelength share one texture.

    Sharing keeps intensity continuous across creases where such surfaces meet.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    textures: dict[float, _Texture] = {}
    out = []
    for spec in config.surfaces:
        wl = float(spec.wavelength)
        if wl not in textures:
            textures[wl] = _Texture(wl, rng)
        out.append(_Surface(spec, textures[wl]))
    return out


def render(surfaces, pose: PoseSE3, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast intensity and z-depth for a world-to-camera ``pose``.

    Pixels whose ray hits nothing get intensity 0 and depth NaN.
    """
    rays_c = K.rays().reshape(-1, 3)
    dirs_w = rays_c @ pose.rotation  # R^T applied to each row
    origin = pose.center
    best = np.full(rays_c.shape[0], np.inf)
    owner = np.full(rays_c.shape[0], -1)
    for i, surf in enumerate(surfaces):
        t = surf.intersect(origin, dirs_w)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = i
    hit = np.isfinite(best)
    if not hit.any():
        raise EmptyView("no surface in view")
    image = np.zeros(rays_c.shape[0])
    X = origin + dirs_w * np.where(hit, best, 0.0)[:, None]
    for i, surf in enumerate(surfaces):
        m = owner == i
        if m.any():
            image[m] = surf.texture(X[m])
    # rays have unit camera-z, so the ray parameter is the z-depth
    depth = np.where(hit, best, np.nan)
    return image.reshape(K.shape), depth.reshape(K.shape)


def cast_depth(surfaces, pose: PoseSE3, K: CameraIntrinsics, u, v) -> np.ndarray:
    """Exact z-depth of the nearest surface along continuous pixel rays (NaN on a miss)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    rays_c = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1)
    dirs_w = rays_c @ pose.rotation
    best = np.full(len(u), np.inf)
    for surf in surfaces:
        best = np.minimum(best, surf.intersect(pose.center, dirs_w))
    return np.where(np.isfinite(best), best, np.nan)


class SceneDepthLookup:
    """Continuous ground-truth depth of one frame, usable wherever a depth grid is.

    Sampling ray-casts the scene instead of interpolating, so transfers and
    keypoint lookups at ground truth are exact.
    """

    def __init__(self, surfaces, pose: PoseSE3, K: CameraIntrinsics):
        self.surfaces = surfaces
        self.pose = pose
        self.K = K
        self.shape = K.shape

    def sample(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=np.float64).ravel()
        v = np.asarray(v, dtype=np.float64).ravel()
        H, W = self.shape
        valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
        d = cast_depth(self.surfaces, self.pose, self.K, u, v)
        valid &= np.isfinite(d)
        return np.where(valid, d, 0.0), valid


def gt_depth_lookups(sequence: "SceneSequence") -> list[SceneDepthLookup]:
    if sequence.config is None:
        raise InvalidConfig("sequence has no scene description")
    surfaces = build_surfaces(sequence.config)
    return [SceneDepthLookup(surfaces, f.gt_pose, sequence.intrinsics) for f in sequence.frames]


# ------------------------------------------------------------------ sequences


@dataclass(frozen=True)
class Frame:
    image: np.ndarray
    gt_depth: np.ndarray
    gt_pose: PoseSE3
    timestamp: float


@dataclass(frozen=True)
class SceneSequence:
    frames: tuple[Frame, ...]
    intrinsics: CameraIntrinsics
    d_max_gt: float
    config: SceneConfig | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def images(self) -> list[np.ndarray]:
        return [f.image for f in self.frames]

    @property
    def gt_depths(self) -> list[np.ndarray]:
        return [f.gt_depth for f in self.frames]

    @property
    def gt_poses(self) -> list[PoseSE3]:
        return [f.gt_pose for f in self.frames]

    @property
    def timestamps(self) -> list[float]:
        return [f.timestamp for f in self.frames]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for f in self.frames:
            h.update(np.ascontiguousarray(f.image).tobytes())
            h.update(np.ascontiguousarray(f.gt_depth).tobytes())
            h.update(f.gt_pose.matrix().tobytes())
        return h.hexdigest()


def camera_pose(position, yaw_deg: float, pitch_deg: float) -> PoseSE3:
    """World-to-camera pose of a camera at ``position`` with yaw about y, then pitch about x."""
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    R_cw = Ry @ Rx
    R = R_cw.T
    return PoseSE3(R, -R @ np.asarray(position, dtype=np.float64))


def trajectory(config: SceneConfig) -> list[PoseSE3]:
    """Piecewise-linear interpolation of the waypoints over ``config.frames``."""
    wps = config.waypoints
    if len(wps) == 0:
        raise InvalidConfig("trajectory needs at least one waypoint")
    return [camera_pose(st[:3], st[3], st[4]) for st in _path_states(config)]


def _path_states(config: SceneConfig) -> np.ndarray:
    wps = config.waypoints
    knots = np.array([[*w.position, w.yaw_deg, w.pitch_deg] for w in wps])
    if len(wps) == 1:
        return np.repeat(knots, config.frames, axis=0)
    s = np.linspace(0.0, len(wps) - 1, config.frames)
    idx = np.minimum(np.floor(s).astype(int), len(wps) - 2)
    f = (s - idx)[:, None]
    return (1 - f) * knots[idx] + f * knots[idx + 1]


def prefix_config(config: SceneConfig, frames: int) -> SceneConfig:
    """The first ``frames`` frames of ``config`` as a scene of its own, same per-frame motion."""
    from dataclasses import replace

    if not 1 <= frames <= config.frames:
        raise InvalidConfig(f"prefix length must be within 1..{config.frames}")
    states = _path_states(config)[:frames]
    wps = tuple(Waypoint(tuple(st[:3]), float(st[3]), float(st[4])) for st in states)
    return replace(config, frames=frames, waypoints=wps)


def generate_scene(config: SceneConfig) -> SceneSequence:
    if config.frames < 3:
        raise InvalidConfig("need at least 3 frames")
    if len(config.surfaces) < 2:
        raise InvalidConfig("need at least 2 surfaces")
    if config.width < 32 or config.height < 24:
        raise InvalidConfig("image must be at least 32x24")
    K = config.intrinsics
    poses = trajectory(config)
    centers = np.array([p.center for p in poses])
    rots = np.array([p.rotation for p in poses])
    if np.ptp(centers, axis=0).max() == 0 and np.ptp(rots, axis=0).max() == 0:
        raise InvalidConfig("degenerate trajectory: all poses identical")
    surfaces = build_surfaces(config)
    frames = []
    for i, pose in enumerate(poses):
        try:
            image, depth = render(surfaces, pose, K)
        except EmptyView:
            raise InvalidConfig(f"frame {i}: no surface in view") from None
        if not np.all(np.isfinite(depth)):
            raise InvalidConfig(f"frame {i}: some pixels see no surface")
        frames.append(Frame(image, depth, pose, i * config.dt))
    d_max = float(max(f.gt_depth.max() for f in frames))
    if d_max > MAX_SCENE_DEPTH:
        raise InvalidConfig(f"scene depth {d_max:.2f} m exceeds the {MAX_SCENE_DEPTH:.0f} m cap")
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    if steps.size and steps.max() >= 0.1 * d_max:
        raise InvalidConfig("consecutive camera motion exceeds 10% of the scene extent")
    return SceneSequence(tuple(frames), K, d_max, config)


# ------------------------------------------------------------------ depth noise


def corrupt_depth(gt: np.ndarray, model: NoiseModel, d_max_gt: float, stream: int = 0) -> np.ndarray:
    """Multiplicative Gaussian noise whose std grows with depth.

    ``stream`` selects an independent random stream under the same seed, so a
    sequence can corrupt each frame differently yet reproducibly.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if np.any(~(gt > 0)):
        raise InvalidConfig("ground-truth depth must be positive")
    if model.sigma0 == 0:
        return gt.copy()
    rng = np.random.default_rng(np.random.SeedSequence([model.seed, stream]))
    std = model.sigma0 * (gt / d_max_gt) ** model.gamma
    noisy = gt * (1.0 + std * rng.standard_normal(gt.shape))
    return np.clip(noisy, MIN_DEPTH, 1.5 * d_max_gt)


def corrupt_sequence(sequence: SceneSequence, model: NoiseModel) -> list[np.ndarray]:
    return [corrupt_depth(f.gt_depth, model, sequence.d_max_gt, stream=i) for i, f in enumerate(sequence.frames)]


def save_sequence(sequence: SceneSequence, path) -> None:
    K = sequence.intrinsics
    np.savez_compressed(
        path,
        images=np.stack(sequence.images),
        gt_depths=np.stack(sequence.gt_depths),
        gt_poses=np.stack([p.matrix() for p in sequence.gt_poses]),
        timestamps=np.asarray(sequence.timestamps),
        intrinsics=np.array([K.fx, K.fy, K.cx, K.cy, K.width, K.height], dtype=np.float64),
        d_max_gt=np.float64(sequence.d_max_gt),
    )


def load_sequence(path) -> SceneSequence:
    with np.load(path) as z:
        fx, fy, cx, cy, w, h = z["intrinsics"]
        K = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
        frames = tuple(
            Frame(img, dep, PoseSE3.from_matrix(M), float(ts))
            for img, dep, M, ts in zip(z["images"], z["gt_depths"], z["gt_poses"], z["timestamps"])
        )
        return SceneSequence(frames, K, float(z["d_max_gt"]))
