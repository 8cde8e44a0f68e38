import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prgbd.errors import AssociationError, DegenerateConfiguration, EmptyEvaluation
from prgbd.evaluation import (
    KITTI_LENGTHS,
    ate_rmse,
    depth_metrics,
    relative_errors,
    sequence_depth_metrics,
    umeyama_align,
)
from prgbd.geometry import PoseSE3, Sim3Transform, so3_exp


def random_rotation(rng):
    return so3_exp(rng.uniform(-np.pi, np.pi) * _unit(rng))


def _unit(rng):
    w = rng.standard_normal(3)
    return w / np.linalg.norm(w)


def random_sim3(rng, smin=0.5, smax=2.0):
    return Sim3Transform(float(rng.uniform(smin, smax)), random_rotation(rng), rng.uniform(-5, 5, 3))


def spread_points(rng, n=20):
    return rng.uniform(-3, 3, (n, 3))


# ---------------------------------------------------------------- depth metrics


def test_depth_metrics_identity():
    gt = np.random.default_rng(0).uniform(1, 50, (6, 7))
    m = depth_metrics(gt, gt)
    assert (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) == (0.0, 0.0, 0.0, 0.0)
    assert (m.a1, m.a2, m.a3) == (1.0, 1.0, 1.0)


def test_depth_metrics_single_pixel():
    m = depth_metrics(np.array([[1.3]]), np.array([[1.0]]), median_scale=False)
    assert m.abs_rel == pytest.approx(0.3, abs=1e-12)
    assert m.sq_rel == pytest.approx(0.09, abs=1e-12)
    assert m.rmse == pytest.approx(0.3, abs=1e-12)
    assert m.rmse_log == pytest.approx(math.log(1.3), abs=1e-12)
    assert (m.a1, m.a2, m.a3) == (0.0, 1.0, 1.0)


def test_depth_metrics_two_by_two():
    pred = np.array([[2.0, 4.0], [3.0, 1.0]])
    gt = np.array([[1.0, 4.0], [2.0, 2.0]])
    m = depth_metrics(pred, gt, median_scale=False)
    assert m.abs_rel == pytest.approx(0.5, abs=1e-12)
    assert m.sq_rel == pytest.approx(0.5, abs=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(0.75), abs=1e-12)
    ref_log = math.sqrt((2 * math.log(2) ** 2 + math.log(1.5) ** 2) / 4)
    assert m.rmse_log == pytest.approx(ref_log, abs=1e-12)
    # ratios 2, 1, 1.5, 2
    assert (m.a1, m.a2, m.a3) == (0.25, 0.5, 0.5)


def test_depth_metrics_cap_masks_gt():
    pred = np.array([[5.0, 5.0]])
    gt = np.array([[5.0, 90.0]])
    m = depth_metrics(pred, gt, cap=80.0, median_scale=False)
    assert m.abs_rel == 0.0
    with pytest.raises(EmptyEvaluation):
        depth_metrics(pred, np.array([[0.0, 90.0]]))


def test_median_scaling_invariance():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 70, (24, 32))
    pred = gt * np.exp(0.3 * rng.standard_normal(gt.shape))
    base = depth_metrics(pred, gt).as_dict()
    for s in rng.uniform(0.05, 20.0, 20):
        # s * pred is itself rounded, so agreement is to the last few ulps
        m = depth_metrics(s * pred, gt).as_dict()
        for k, v in base.items():
            assert m[k] == pytest.approx(v, rel=1e-14, abs=1e-300)


def test_median_scaling_removes_factor_two():
    gt = np.random.default_rng(2).uniform(1, 70, (5, 5))
    assert depth_metrics(2 * gt, gt) == depth_metrics(gt, gt)


def test_threshold_ordering_random_fields():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        gt = rng.uniform(0.5, 80, (4, 5))
        pred = rng.uniform(0.1, 100, (4, 5))
        m = depth_metrics(pred, gt, median_scale=bool(rng.integers(2)))
        assert 0 <= m.a1 <= m.a2 <= m.a3 <= 1
        assert min(m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) >= 0


def test_sequence_metrics_average():
    rng = np.random.default_rng(4)
    gts = [rng.uniform(1, 50, (3, 3)) for _ in range(3)]
    preds = [g * 1.1 for g in gts]
    m = sequence_depth_metrics(preds, gts, median_scale=False)
    assert m.abs_rel == pytest.approx(0.1, abs=1e-12)


# ---------------------------------------------------------------- alignment


def test_umeyama_identity():
    X = spread_points(np.random.default_rng(5))
    sim = umeyama_align(X, X)
    assert sim.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sim.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(sim.translation, 0.0, atol=1e-12)


def test_umeyama_planted_scale():
    rng = np.random.default_rng(6)
    gt = spread_points(rng)
    planted = Sim3Transform(1.7, random_rotation(rng), rng.uniform(-5, 5, 3))
    sim = umeyama_align(planted.apply(gt), gt)
    inv = planted.inverse()
    assert sim.scale == pytest.approx(inv.scale, abs=1e-9)
    np.testing.assert_allclose(sim.rotation, inv.rotation, atol=1e-9)
    np.testing.assert_allclose(sim.translation, inv.translation, atol=1e-9)


def test_umeyama_recovers_100_planted():
    rng = np.random.default_rng(7)
    for _ in range(100):
        gt = spread_points(rng)
        planted = random_sim3(rng)
        sim = umeyama_align(gt, planted.apply(gt))
        assert abs(sim.scale - planted.scale) < 1e-9
        assert np.abs(sim.rotation - planted.rotation).max() < 1e-9
        assert np.abs(sim.translation - planted.translation).max() < 1e-9


def test_umeyama_without_scale():
    rng = np.random.default_rng(8)
    gt = spread_points(rng)
    rigid = Sim3Transform(1.0, random_rotation(rng), rng.uniform(-5, 5, 3))
    sim = umeyama_align(gt, rigid.apply(gt), with_scale=False)
    assert sim.scale == 1.0
    np.testing.assert_allclose(sim.rotation, rigid.rotation, atol=1e-9)


def test_umeyama_degenerate():
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(np.zeros((2, 3)), np.ones((2, 3)))
    line = np.outer(np.arange(10.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(line, line)


# ---------------------------------------------------------------- ATE


def test_ate_examples():
    rng = np.random.default_rng(9)
    gt = spread_points(rng)
    assert ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)
    assert ate_rmse(gt + [1.0, 0.0, 0.0], gt, align=False) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(AssociationError):
        ate_rmse(gt[:5], gt)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ate_sim3_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = spread_points(rng)
    est = gt + 0.05 * rng.standard_normal(gt.shape)
    base = ate_rmse(est, gt)
    moved = ate_rmse(random_sim3(rng).apply(est), gt)
    assert abs(moved - base) <= 1e-9
    assert ate_rmse(random_sim3(rng).apply(gt), gt) < 1e-9


# ---------------------------------------------------------------- relative errors


def straight_path(n=100, step=0.1):
    return [PoseSE3(np.eye(3), (0.0, 0.0, -step * i)) for i in range(n)]


def yaw_drift_path(n=100, step=0.1, theta_deg=0.5):
    out = []
    for i in range(n):
        R_wc = so3_exp(np.radians(theta_deg) * step * i * np.array([0.0, 1.0, 0.0]))
        c = np.array([0.0, 0.0, step * i])
        out.append(PoseSE3(R_wc.T, -R_wc.T @ c))
    return out


def test_relative_errors_zero_for_identical():
    gt = yaw_drift_path(theta_deg=2.0)
    rel = relative_errors(gt, gt, align=False)
    assert rel.rel_tr == pytest.approx(0.0, abs=1e-9)
    assert rel.rel_rot == pytest.approx(0.0, abs=1e-9)
    assert rel.length_scale == pytest.approx(9.9 / 800)


def test_relative_rotation_drift_closed_form():
    theta = 0.5
    gt = straight_path()
    est = yaw_drift_path(theta_deg=theta)
    rel = relative_errors(est, gt, align=False)
    assert rel.rel_rot == pytest.approx(theta, rel=0.05)


def test_relative_errors_unscaled_too_short():
    gt = straight_path(n=101)
    with pytest.raises(EmptyEvaluation):
        relative_errors(gt, gt, lengths=KITTI_LENGTHS, align=False)
