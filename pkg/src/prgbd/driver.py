"""The self-improving loop: track on current depths, refine depths on the SLAM output, repeat."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .depth_refiner import RefinerConfig, keyframe_problems, propagate_to_nonkeyframes, refine_depths
from .errors import DegenerateConfiguration, InvalidConfig, LostTracking
from .evaluation import (
    KITTI_LENGTHS,
    DepthMetrics,
    TrajectoryMetrics,
    path_length,
    sequence_depth_metrics,
    trajectory_metrics,
    umeyama_align,
)
from .keyframe_graph import filter_outliers_all
from .losses import COMPONENTS, LossWeights, evaluate_keyframe
from .pose_backend import TrackingParams, TrackingResult, track_sequence, write_tum
from .scene_sim import NoiseModel, SceneConfig, SceneSequence, corrupt_sequence, default_scene_config, generate_scene, parse_kv

log = logging.getLogger(__name__)

CAP_PERCENTS = (30, 40, 50, 60, 70, 80, 100)
FULL_CAP = 100
CSV_METRICS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
CSV_HEADER = ("loop", "cap_pct", "cap_m") + CSV_METRICS + ("ate_rmse", "rel_tr", "rel_rot", "lost_fraction", "loss_total")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=default_scene_config)
    keyframe_stride: int = 5
    ba_window: int = 7
    noise: NoiseModel = field(default_factory=NoiseModel)
    weights: LossWeights = field(default_factory=LossWeights)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    max_loops: int = 5
    eps_improve: float = 0.005
    seed: int = 0  # root seed for depth corruption and correspondence noise
    pixel_noise: float = 0.0
    outlier_ratio: float = 0.0
    grid_step: int = 4  # keypoint grid spacing, px
    with_scale: bool = True
    scene_path: str | None = None

    def __post_init__(self):
        if self.max_loops < 1:
            raise InvalidConfig("max_loops must be at least 1")
        if not self.eps_improve > 0:
            raise InvalidConfig("eps_improve must be positive")

    def derived_seeds(self) -> tuple[int, int]:
        """(depth-noise seed, tracking seed) split from the root seed."""
        a, b = np.random.SeedSequence(self.seed).generate_state(2)
        return int(a), int(b)

    def noise_model(self) -> NoiseModel:
        return replace(self.noise, seed=self.derived_seeds()[0])

    def tracking_params(self) -> TrackingParams:
        return TrackingParams(
            keyframe_stride=self.keyframe_stride,
            ba_window=self.ba_window,
            pixel_noise=self.pixel_noise,
            outlier_ratio=self.outlier_ratio,
            grid_step=self.grid_step,
            seed=self.derived_seeds()[1],
        )

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        text = Path(path).read_text()
        kv = parse_kv(text)
        scene = SceneConfig.from_kv(kv)

        def get(key, cast, default):
            if key not in kv:
                return default
            try:
                return cast(kv[key][-1])
            except ValueError:
                raise InvalidConfig(f"{key}: cannot parse {kv[key][-1]!r}") from None

        base = cls()
        weights = LossWeights(
            get("alpha", float, base.weights.alpha),
            get("beta", float, base.weights.beta),
            get("gamma", float, base.weights.gamma),
            get("mu", float, base.weights.mu),
        )
        refiner = RefinerConfig(
            step_size=get("step_size", float, base.refiner.step_size),
            epochs=get("epochs", int, base.refiner.epochs),
            weights=weights,
            precondition=get("precondition", str, base.refiner.precondition),
            adam_eps=get("adam_eps", float, base.refiner.adam_eps),
            min_common=get("min_common", int, base.refiner.min_common),
        )
        cfg = cls(
            scene=scene,
            keyframe_stride=get("keyframe_stride", int, base.keyframe_stride),
            ba_window=get("ba_window", int, base.ba_window),
            noise=scene.noise,
            weights=weights,
            refiner=refiner,
            max_loops=get("max_loops", int, base.max_loops),
            eps_improve=get("eps_improve", float, base.eps_improve),
            seed=get("run_seed", int, base.seed),
            pixel_noise=get("pixel_noise", float, base.pixel_noise),
            outlier_ratio=get("outlier_ratio", float, base.outlier_ratio),
            grid_step=get("grid_step", int, base.grid_step),
            scene_path=str(path),
        )
        return replace(cfg, **overrides) if overrides else cfg

    def echo(self) -> dict:
        d = asdict(self)
        d["scene"]["surfaces"] = [
            {"kind": type(s).__name__.lower(), **asdict(s)} for s in self.scene.surfaces
        ]
        return d


def indoor_preset(**overrides) -> RunConfig:
    """Shorter runs with 3 loops, as used for the indoor sequences."""
    return RunConfig(max_loops=3, **overrides)


@dataclass
class LoopReport:
    loop_index: int
    depth: dict[int, DepthMetrics]  # cap percent -> metrics
    trajectory: TrajectoryMetrics
    losses: dict[str, float]
    lost_fraction: float
    wall_time: float
    poses: list = field(default_factory=list, repr=False)
    status: list = field(default_factory=list, repr=False)


@dataclass
class RunResult:
    reports: list[LoopReport]
    termination: str
    sequence: SceneSequence | None = None
    config: RunConfig | None = None
    fields: list = field(default_factory=list, repr=False)  # depth fields of the last loop

    def __len__(self) -> int:
        return len(self.reports)

    def __getitem__(self, i) -> LoopReport:
        return self.reports[i]

    def __iter__(self):
        return iter(self.reports)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PRGBD_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_depths(sequence: SceneSequence, fields, with_caps=CAP_PERCENTS) -> dict[int, DepthMetrics]:
    gts = sequence.gt_depths

    def one(pct):
        return pct, sequence_depth_metrics(fields, gts, cap=sequence.d_max_gt * pct / 100.0)

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            return dict(ex.map(one, with_caps))
    return dict(map(one, with_caps))


def loss_sums(sequence: SceneSequence, tracking: TrackingResult, fields, weights: LossWeights, graph=None,
              min_common: int = 20) -> dict[str, float]:
    graph = graph or tracking.graph
    problems = keyframe_problems(graph, sequence.images, tracking, min_common)
    sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
    fd = dict(enumerate(fields))
    for p in problems:
        for k, v in evaluate_keyframe(p, fd, weights).breakdown.as_dict().items():
            sums[k] += v
    return sums


def _check_tracking(tracking: TrackingResult, loop: int) -> None:
    if all(s != "tracked" for s in tracking.status[1:]):
        raise LostTracking(f"tracking lost on every frame in loop {loop}")


def trajectory_report(tracking: TrackingResult, sequence: SceneSequence, with_scale: bool = True) -> TrajectoryMetrics:
    try:
        return trajectory_metrics(tracking.poses, sequence.gt_poses, with_scale=with_scale)
    except DegenerateConfiguration as e:
        # a straight path leaves the alignment underdetermined; depth metrics are still meaningful
        log.warning("trajectory metrics unavailable: %s", e)
        return TrajectoryMetrics(float("nan"), float("nan"), float("nan"), path_length(sequence.gt_poses) / KITTI_LENGTHS[-1])


def _report(loop, sequence, fields, tracking, losses, with_scale, t0) -> LoopReport:
    traj = trajectory_report(tracking, sequence, with_scale)
    return LoopReport(
        loop_index=loop,
        depth=evaluate_depths(sequence, fields),
        trajectory=traj,
        losses=losses,
        lost_fraction=tracking.lost_fraction,
        wall_time=time.perf_counter() - t0,
        poses=list(tracking.poses),
        status=list(tracking.status),
    )


def run_self_improving(config: RunConfig, sequence: SceneSequence | None = None, initial_depths=None) -> RunResult:
    """Alternate pose and depth refinement until Abs Rel stops improving.

    Loop 0 tracks on the corrupted depths; each later loop filters outliers,
    refines the keyframe depths, propagates them to the other frames and
    tracks again. Stops after ``max_loops`` or when the relative Abs Rel
    improvement at the full depth cap drops below ``eps_improve``.
    """
    if sequence is None:
        sequence = generate_scene(config.scene)
    params = config.tracking_params()
    refiner = replace(config.refiner, weights=config.weights)
    fields = initial_depths if initial_depths is not None else corrupt_sequence(sequence, config.noise_model())
    fields = [np.asarray(f, dtype=np.float64) for f in fields]

    t0 = time.perf_counter()
    tracking = track_sequence(sequence, fields, params)
    _check_tracking(tracking, 0)
    losses = loss_sums(sequence, tracking, fields, config.weights, min_common=refiner.min_common)
    reports = [_report(0, sequence, fields, tracking, losses, config.with_scale, t0)]
    log.info("loop 0: abs_rel %.4f ate %.4f", reports[0].depth[FULL_CAP].abs_rel, reports[0].trajectory.ate_rmse)
    termination = "max_loops"
    for loop in range(1, config.max_loops + 1):
        t0 = time.perf_counter()
        graph = filter_outliers_all(tracking.graph)
        refined = refine_depths(sequence.images, tracking, fields, refiner, graph=graph)
        fields = propagate_to_nonkeyframes(refined.fields, tracking, graph)
        tracking = track_sequence(sequence, fields, params)
        _check_tracking(tracking, loop)
        reports.append(_report(loop, sequence, fields, tracking, refined.breakdown, config.with_scale, t0))
        prev = reports[-2].depth[FULL_CAP].abs_rel
        cur = reports[-1].depth[FULL_CAP].abs_rel
        log.info("loop %d: abs_rel %.4f ate %.4f", loop, cur, reports[-1].trajectory.ate_rmse)
        if prev <= 1e-12 or (prev - cur) / prev < config.eps_improve:
            termination = "no_improvement"
            break
    return RunResult(reports, termination, sequence, config, fields)


# ------------------------------------------------------------------ outputs


def _fmt(x) -> str:
    return f"{x:.9g}"


def metrics_rows(result: RunResult) -> list[list[str]]:
    d_max = result.sequence.d_max_gt
    rows = []
    for rep in result.reports:
        for pct in sorted(rep.depth):
            m = rep.depth[pct]
            rows.append(
                [str(rep.loop_index), str(pct), _fmt(d_max * pct / 100.0)]
                + [_fmt(getattr(m, k)) for k in CSV_METRICS]
                + [_fmt(rep.trajectory.ate_rmse), _fmt(rep.trajectory.rel_tr), _fmt(rep.trajectory.rel_rot),
                   _fmt(rep.lost_fraction), _fmt(rep.losses.get("total", 0.0))]
            )
    return rows


def emit_reports(result: RunResult, out_dir) -> dict[str, Path]:
    """Write metrics.csv, per-loop TUM trajectories, summary.json and plots.svg."""
    if not result.reports:
        raise ValueError("no reports to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    csv_path = out / "metrics.csv"
    lines = [",".join(CSV_HEADER)] + [",".join(r) for r in metrics_rows(result)]
    csv_path.write_text("\n".join(lines) + "\n")
    paths["metrics"] = csv_path
    stamps = result.sequence.timestamps
    for rep in result.reports:
        p = out / f"trajectory_loop{rep.loop_index}.txt"
        write_tum(p, stamps, rep.poses)
        paths[f"trajectory_loop{rep.loop_index}"] = p
    summary = {
        "termination": result.termination,
        "loops": len(result.reports) - 1,
        "d_max_gt": result.sequence.d_max_gt,
        "relative_error_length_scale": result.reports[0].trajectory.length_scale,
        "config": result.config.echo() if result.config else None,
        "reports": [
            {
                "loop": r.loop_index,
                "wall_time_s": r.wall_time,
                "lost_fraction": r.lost_fraction,
                "trajectory": asdict(r.trajectory),
                "losses": r.losses,
                "depth": {str(k): v.as_dict() for k, v in r.depth.items()},
            }
            for r in result.reports
        ],
    }
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, default=str) + "\n")
    paths["plots"] = out / "plots.svg"
    paths["plots"].write_text(render_svg(result))
    return paths


SVG_PANELS = ("abs_rel", "sq_rel", "rmse", "a1")
_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#555555")


def _polyline(xs, ys, box, color, extra="") -> str:
    x0, y0, w, h = box
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    xr = (xs.min(), xs.max()) if xs.max() > xs.min() else (xs.min() - 1, xs.max() + 1)
    yr = (ys.min(), ys.max()) if ys.max() > ys.min() else (ys.min() - 1, ys.max() + 1)
    px = x0 + (xs - xr[0]) / (xr[1] - xr[0]) * w
    py = y0 + h - (ys - yr[0]) / (yr[1] - yr[0]) * h
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>'


def render_svg(result: RunResult) -> str:
    """Metric-vs-loop panels (one line per cap), an ATE panel and a top-down trajectory overlay."""
    reps = result.reports
    caps = sorted(reps[0].depth)
    loops = [r.loop_index for r in reps]
    pw, ph, pad = 260, 180, 40
    parts = []
    panels = list(SVG_PANELS) + ["ate_rmse", "trajectory"]
    for i, name in enumerate(panels):
        col, row = i % 3, i // 3
        x0, y0 = pad + col * (pw + pad), pad + row * (ph + pad)
        box = (x0, y0, pw, ph)
        parts.append(f'<g class="panel" id="{name}">')
        parts.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0}" y="{y0 - 6}" font-size="12">{name}</text>')
        if name in SVG_PANELS:
            # shared y range across caps so curves are comparable
            allv = [getattr(r.depth[c], name) for r in reps for c in caps]
            lo, hi = min(allv), max(allv)
            for j, c in enumerate(caps):
                ys = [getattr(r.depth[c], name) for r in reps]
                parts.append(_scaled_line(loops, ys, box, (lo, hi), _COLORS[j % len(_COLORS)], f' data-cap="{c}"'))
        elif name == "ate_rmse":
            parts.append(_polyline(loops, [r.trajectory.ate_rmse for r in reps], box, "#000"))
        else:
            gt = np.array([p.center for p in result.sequence.gt_poses])
            curves = [("gt", gt)] + [(f"loop{r.loop_index}", np.array([p.center for p in r.poses])) for r in reps]
            xs_all, zs_all = [], []
            aligned = []
            for label, P in curves:
                if label != "gt":
                    try:
                        P = umeyama_align(P, gt, result.config.with_scale if result.config else True).apply(P)
                    except DegenerateConfiguration:
                        pass  # straight path: draw the SLAM frame as is
                aligned.append((label, P))
                xs_all.append(P[:, 0])
                zs_all.append(P[:, 2])
            xs_all = np.concatenate(xs_all)
            zs_all = np.concatenate(zs_all)
            span = max(np.ptp(xs_all), np.ptp(zs_all), 1e-9)
            for j, (label, P) in enumerate(aligned):
                px = x0 + (P[:, 0] - xs_all.min()) / span * pw
                py = y0 + ph - (P[:, 2] - zs_all.min()) / span * ph
                pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
                color = "#000" if label == "gt" else _COLORS[j % len(_COLORS)]
                parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" data-label="{label}"/>')
        parts.append("</g>")
    width = pad + 3 * (pw + pad)
    height = pad + 3 * (ph + pad)
    legend = " ".join(f'<text x="{pad + k * 70}" y="{height - 10}" font-size="11" fill="{_COLORS[k % len(_COLORS)]}">cap {c}%</text>'
                      for k, c in enumerate(caps))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            + "\n".join(parts) + "\n" + legend + "\n</svg>\n")


def _scaled_line(xs, ys, box, yrange, color, extra="") -> str:
    x0, y0, w, h = box
    lo, hi = yrange
    if hi <= lo:
        lo, hi = lo - 1, hi + 1
    xs = np.asarray(xs, float)
    span = xs.max() - xs.min() if xs.max() > xs.min() else 1.0
    px = x0 + (xs - xs.min()) / span * w
    py = y0 + h - (np.asarray(ys, float) - lo) / (hi - lo) * h
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>'
