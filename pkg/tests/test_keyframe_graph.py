import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prgbd.errors import BehindCamera, InvalidTriple, NotFound, OutOfBounds
from prgbd.geometry import CameraIntrinsics, PoseSE3, project
from prgbd.keyframe_graph import (
    Keyframe,
    KeyframeGraph,
    MapPoint,
    common_tracked_keypoints,
    dump_graph,
    filter_outliers,
    filter_outliers_all,
    patch_coordinates,
    reprojection_error,
    select_neighbors,
)

K = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)


def kf_pose(i):
    return PoseSE3(np.eye(3), (-0.3 * i, 0.0, 0.0))


def make_graph(n_kf=5):
    return KeyframeGraph(K, [Keyframe(i, 5 * i, kf_pose(i)) for i in range(n_kf)])


def add_point(g, pid, X, kf_ids, offset=None):
    """Observe world point X exactly in the given keyframes; ``offset`` maps kf id -> pixel shift."""
    mp = MapPoint(pid, np.asarray(X, dtype=np.float64))
    for k in kf_ids:
        uv, _ = project(K, g.keyframe(k).pose.apply(mp.world_position))
        if offset and k in offset:
            uv = uv + np.asarray(offset[k])
        mp.observations[k] = uv
    g.map_points[pid] = mp
    return mp


def test_common_tracked_examples():
    g = make_graph()
    add_point(g, 0, (0, 0, 10), [0, 1, 2])
    add_point(g, 1, (0.5, 0, 10), [0, 1])
    ids = [t[0] for t in common_tracked_keypoints(g, 0, 1, 2)]
    assert ids == [0]


def test_common_tracked_planted_against_brute_force():
    rng = np.random.default_rng(0)
    g = make_graph()
    expected = set()
    for pid in range(10):
        X = (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(8, 12))
        if pid < 6:
            kfs = [0, 2, 4] + ([1] if pid % 2 else [])
            expected.add(pid)
        else:
            kfs = [0, 2] if pid % 2 else [2, 4, 3]
        add_point(g, pid, X, kfs)
    got = common_tracked_keypoints(g, 0, 2, 4)
    brute = {p for p, mp in g.map_points.items() if {0, 2, 4} <= set(mp.observations)}
    assert {t[0] for t in got} == brute == expected
    assert len(got) == 6
    for pid, a, c, b in got:
        obs = g.map_points[pid].observations
        assert np.array_equal(a, obs[0]) and np.array_equal(c, obs[2]) and np.array_equal(b, obs[4])


def test_common_tracked_errors():
    g = make_graph()
    with pytest.raises(NotFound):
        common_tracked_keypoints(g, 0, 1, 9)
    with pytest.raises(InvalidTriple):
        common_tracked_keypoints(g, 2, 1, 3)


def test_common_tracked_subset_of_pairs():
    rng = np.random.default_rng(1)
    g = make_graph()
    for pid in range(30):
        kfs = sorted(rng.choice(5, size=rng.integers(1, 6), replace=False).tolist())
        add_point(g, pid, (rng.uniform(-1, 1), 0, 10), kfs)
    triple = {t[0] for t in common_tracked_keypoints(g, 1, 2, 3)}
    for a, b in ((1, 2), (2, 3), (1, 3)):
        assert triple <= g.points_in(a) & g.points_in(b)


def test_reprojection_error_examples():
    g = make_graph()
    mp = add_point(g, 0, (0.2, 0.1, 10), [0])
    assert reprojection_error(mp, g.keyframe(0), K) == pytest.approx(0.0, abs=1e-12)
    mp.observations[0] = mp.observations[0] + (3.0, 4.0)
    assert reprojection_error(mp, g.keyframe(0), K) == pytest.approx(5.0, abs=1e-12)
    behind = MapPoint(1, np.array([0.0, 0.0, -5.0]), {0: np.array([32.0, 24.0])})
    with pytest.raises(BehindCamera):
        reprojection_error(behind, g.keyframe(0), K)


def test_filter_outliers_rules():
    g = make_graph()
    add_point(g, 0, (0, 0, 10), [0, 1])  # too few observations
    add_point(g, 1, (0.3, 0, 10), [0, 1, 2, 3, 4], offset={2: (3.5, 0.0)})  # 3.5 px in current
    add_point(g, 2, (-0.3, 0, 10), [0, 1, 2, 4], offset={2: (0.3, 0.4)})  # 0.5 px
    out = filter_outliers(g, current=2)
    assert set(out.map_points) == {2}
    assert set(g.map_points) == {0, 1, 2}  # input untouched


def test_filter_exact_planted_set():
    rng = np.random.default_rng(2)
    g = make_graph()
    planted = set()
    for pid in range(40):
        X = (rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(8, 12))
        kind = pid % 4
        if kind == 0:
            add_point(g, pid, X, [1, 2])
            planted.add(pid)
        elif kind == 1:
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(3.01, 6.0)
            add_point(g, pid, X, [0, 2, 3], offset={2: (r * np.cos(ang), r * np.sin(ang))})
            planted.add(pid)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.0, 2.99)
            add_point(g, pid, X, [0, 1, 2, 3, 4], offset={2: (r * np.cos(ang), r * np.sin(ang))})
    out = filter_outliers(g, current=2)
    assert set(g.map_points) - set(out.map_points) == planted
    for mp in out.map_points.values():
        assert len(mp.observations) >= 3
        assert reprojection_error(mp, out.keyframe(2), K) <= 3.0


def test_filter_idempotent():
    rng = np.random.default_rng(3)
    g = make_graph()
    for pid in range(30):
        kfs = sorted(rng.choice(5, size=rng.integers(1, 6), replace=False).tolist())
        off = {k: rng.normal(0, 2.5, 2) for k in kfs}
        add_point(g, pid, (rng.uniform(-1, 1), 0, 10), kfs, offset=off)
    once = filter_outliers_all(g)
    twice = filter_outliers_all(once)
    assert set(once.map_points) == set(twice.map_points)


def test_patch_coordinates_examples():
    center = patch_coordinates((32.0, 24.0), 5, 64, 48)
    assert len(center) == 25
    corner = patch_coordinates((0.0, 0.0), 5, 64, 48)
    assert len(corner) == 9
    pts = patch_coordinates((2.0, 2.0), 5, 64, 48)
    assert len(pts) == 25
    np.testing.assert_array_equal(pts.min(0), [0, 0])
    np.testing.assert_array_equal(pts.max(0), [4, 4])
    with pytest.raises(OutOfBounds):
        patch_coordinates((64.0, 10.0), 5, 64, 48)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 63), st.floats(0, 47))
def test_patch_inside_image(u, v):
    pts = patch_coordinates((u, v), 5, 64, 48)
    assert 1 <= len(pts) <= 25
    assert pts[:, 0].min() >= 0 and pts[:, 0].max() <= 63
    assert pts[:, 1].min() >= 0 and pts[:, 1].max() <= 47


def test_select_neighbors():
    g = make_graph()
    for pid in range(25):
        add_point(g, pid, (0.04 * pid - 0.5, 0, 10), [0, 1, 2, 3])
    assert select_neighbors(g, 2, min_common=20) == (1, 3)
    assert select_neighbors(g, 0, min_common=20) is None
    assert select_neighbors(g, 2, min_common=26) is None


def test_covisibility_symmetric_and_refresh():
    g = make_graph()
    add_point(g, 0, (0, 0, 10), [0, 3])
    cov = g.covisibility
    assert 3 in cov[0] and 0 in cov[3]
    g.refresh_slam_depths()
    assert g.keyframe(0).slam_depths[0] == pytest.approx(10.0)


def test_dump_graph(tmp_path):
    g = make_graph()
    add_point(g, 7, (0, 0, 10), [0, 1])
    dump_graph(g, tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert lines[1].startswith("7 ") and lines[1].count(":") == 4
