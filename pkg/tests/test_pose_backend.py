import numpy as np
import pytest

from prgbd.errors import DegenerateConfiguration, InitializationFailure, InvalidConfig, PreconditionError
from prgbd.evaluation import read_tum
from prgbd.geometry import CameraIntrinsics, PoseSE3, project
from prgbd.keyframe_graph import Keyframe, KeyframeGraph, MapPoint
from prgbd.pose_backend import (
    TrackingParams,
    estimate_pose_gn,
    local_bundle_adjust,
    seed_map_from_depth,
    track_sequence,
    write_tum,
)
from prgbd.scene_sim import NoiseModel, corrupt_sequence, default_scene_config, generate_scene, prefix_config

K = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


@pytest.fixture(scope="module")
def seq50():
    return generate_scene(prefix_config(default_scene_config(), 50))


def planted_pose(rng):
    w = rng.standard_normal(3)
    w *= np.radians(rng.uniform(0, 10)) / np.linalg.norm(w)
    t = rng.standard_normal(3)
    t *= rng.uniform(0, 1) / np.linalg.norm(t)
    return PoseSE3.from_rotvec(w, t)


def scene_points(rng, n):
    return np.stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(8, 15, n)], axis=1)


def test_seed_map_examples():
    depth = np.full((48, 64), 10.0)
    mps = seed_map_from_depth([[K.cx, K.cy]] * 20, depth, K)
    np.testing.assert_allclose(mps[0].world_position, [0, 0, 10])
    rng = np.random.default_rng(0)
    uv = np.stack([rng.uniform(0, 63, 100), rng.uniform(0, 47, 100)], axis=1)
    assert len(seed_map_from_depth(uv, depth, K)) == 100
    with pytest.raises(InitializationFailure):
        seed_map_from_depth(uv, np.full((48, 64), np.nan), K)


def test_pnp_identity():
    rng = np.random.default_rng(1)
    X = scene_points(rng, 30)
    uv, _ = project(K, X)
    pose = estimate_pose_gn(X, uv, K, PoseSE3.identity())
    assert pose.allclose(PoseSE3.identity(), atol=1e-10)


def test_pnp_recovers_planted_poses():
    rng = np.random.default_rng(2)
    for _ in range(100):
        T = planted_pose(rng)
        X = T.inverse().apply(scene_points(rng, 30))
        uv, _ = project(K, T.apply(X))
        est = estimate_pose_gn(X, uv, K, PoseSE3.identity())
        assert np.linalg.norm(est.rotation - T.rotation) < 1e-8
        assert np.linalg.norm(est.translation - T.translation) < 1e-8


def test_pnp_needs_six():
    rng = np.random.default_rng(3)
    X = scene_points(rng, 5)
    uv, _ = project(K, X)
    with pytest.raises(DegenerateConfiguration):
        estimate_pose_gn(X, uv, K)


def small_ba_graph(noise_px=0.0, seed=4, n_kf=4, n_pts=60):
    rng = np.random.default_rng(seed)
    poses = [PoseSE3.from_rotvec((0, 0.01 * i, 0), (-0.4 * i, 0.0, 0.0)) for i in range(n_kf)]
    g = KeyframeGraph(K, [Keyframe(i, 5 * i, p) for i, p in enumerate(poses)], baseline=0.3)
    X = scene_points(rng, n_pts)
    for pid, x in enumerate(X):
        mp = MapPoint(pid, x.copy())
        for k, p in enumerate(poses):
            uv, z = project(K, p.apply(x))
            mp.observations[k] = uv + noise_px * rng.standard_normal(2)
            if k == 0:
                g.keyframes[0].measured_depths[pid] = float(z)
        g.map_points[pid] = mp
    return g


def test_ba_noiseless_is_fixed_point():
    g = small_ba_graph()
    res = local_bundle_adjust(g, [0, 1, 2, 3], K)
    assert res.final_cost < 1e-16
    for a, b in zip(g.keyframes, res.graph.keyframes):
        assert a.pose.allclose(b.pose, atol=1e-8)
    for p in g.map_points:
        np.testing.assert_allclose(res.graph.map_points[p].world_position, g.map_points[p].world_position, atol=1e-8)


def test_ba_noisy_decreases_and_keeps_gauge():
    g = small_ba_graph(noise_px=0.5)
    # start from perturbed poses so there is something to do
    rng = np.random.default_rng(5)
    for kf in g.keyframes[1:]:
        kf.pose = kf.pose.retract(np.concatenate([0.002 * rng.standard_normal(3), 0.02 * rng.standard_normal(3)]))
    first = g.keyframes[0].pose
    res = local_bundle_adjust(g, [0, 1, 2, 3], K)
    assert res.final_cost < res.initial_cost
    R0, t0 = res.graph.keyframes[0].pose.rotation, res.graph.keyframes[0].pose.translation
    assert np.array_equal(R0, first.rotation) and np.array_equal(t0, first.translation)
    # the input graph is not modified
    assert g.keyframes[0].pose is first


def test_ba_refreshes_slam_depths():
    g = small_ba_graph(noise_px=0.3)
    res = local_bundle_adjust(g, [0, 1, 2, 3], K)
    kf = res.graph.keyframes[2]
    for pid, d in kf.slam_depths.items():
        assert d == pytest.approx(kf.pose.apply(res.graph.map_points[pid].world_position)[2])


def test_ba_window_of_one():
    with pytest.raises(PreconditionError):
        local_bundle_adjust(small_ba_graph(), [0], K)


def anchored_ate(poses, gt_poses):
    """Position RMSE after the SE3 that maps the gt world onto the frame-0 camera (the SLAM world)."""
    g0 = gt_poses[0]
    est = np.array([p.center for p in poses])
    ref = g0.apply(np.array([p.center for p in gt_poses]))
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def test_track_gt_depths_exact(seq50):
    res = track_sequence(seq50, seq50.gt_depths)
    assert res.lost_fraction == 0.0
    assert anchored_ate(res.poses, seq50.gt_poses) < 1e-6
    # keyframes every 5 frames, consistent with per-frame poses
    assert res.keyframe_frames() == list(range(0, 50, 5))
    for kf in res.graph.keyframes:
        assert kf.pose.allclose(res.poses[kf.frame_index], atol=0)


def test_track_corrupted_is_worse(seq50):
    clean = track_sequence(seq50, seq50.gt_depths)
    noisy = track_sequence(seq50, corrupt_sequence(seq50, NoiseModel(0.2, 1.0, 0)))
    a = anchored_ate(clean.poses, seq50.gt_poses)
    b = anchored_ate(noisy.poses, seq50.gt_poses)
    assert b > a


def test_track_scale_covariance(seq50):
    fields = corrupt_sequence(seq50, NoiseModel(0.2, 1.0, 1))
    s = 2.5
    a = track_sequence(seq50, fields)
    b = track_sequence(seq50, [s * f for f in fields])
    assert b.baseline == pytest.approx(s * a.baseline)
    for pa, pb in zip(a.poses, b.poses):
        assert np.abs(pa.rotation - pb.rotation).max() < 1e-6
        assert np.abs(s * pa.translation - pb.translation).max() < 1e-6 * s * max(1.0, np.abs(pa.translation).max())


def test_track_rejects_empty(seq50):
    with pytest.raises(InvalidConfig):
        track_sequence(None, [])
    with pytest.raises(InvalidConfig):
        track_sequence(seq50, seq50.gt_depths[:3])


def test_params_validation():
    with pytest.raises(InvalidConfig):
        TrackingParams(keyframe_stride=0)
    with pytest.raises(InvalidConfig):
        TrackingParams(ba_window=1)


def test_tum_round_trip(tmp_path, seq50):
    poses = seq50.gt_poses[:10]
    write_tum(tmp_path / "t.txt", seq50.timestamps[:10], poses)
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 10 and all(len(l.split()) == 8 for l in lines)
    _, back = read_tum(tmp_path / "t.txt")
    for a, b in zip(poses, back):
        assert a.allclose(b, atol=1e-7)
