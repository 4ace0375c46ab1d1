import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from handmim.errors import InsufficientPointsError
from handmim.metrics import (
    MetricReport,
    auc,
    evaluate_arrays,
    f_score,
    mp_align,
    pck_curve,
    point_error,
    procrustes_align,
    write_curves_csv,
)
from oracles import brute_force_nearest, random_rotation


def sse(a, b):
    return float(((a - b) ** 2).sum())


def test_identity_alignment(rng):
    gt = rng.normal(size=(21, 3))
    assert np.abs(procrustes_align(gt, gt) - gt).max() < 1e-12


def test_recovers_exact_similarity(rng):
    for _ in range(20):
        gt = rng.normal(size=(21, 3))
        pred = 2 * gt @ random_rotation(rng).T + np.array([1.0, 2.0, 3.0])
        assert sse(procrustes_align(pred, gt), gt) < 1e-9


def test_reflection_is_not_used(rng):
    gt = rng.normal(size=(10, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    # the best proper rotation cannot undo a mirror image, so a residual remains
    assert sse(procrustes_align(mirrored, gt), gt) > 1e-3


def test_needs_three_points():
    with pytest.raises(InsufficientPointsError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_point_error_examples(rng):
    a = rng.normal(size=(21, 3))
    assert point_error(a, a) == 0.0
    assert point_error(np.array([[0.003, 0.004, 0.0]]), np.zeros((1, 3))) == pytest.approx(5.0, abs=1e-12)
    b = rng.normal(size=(21, 3))
    naive = sum(sum((a[i, d] - b[i, d]) ** 2 for d in range(3)) ** 0.5 for i in range(21)) / 21 * 1000
    assert point_error(a, b) == pytest.approx(naive, abs=1e-9)


def test_mp_align_examples(rng):
    gt = rng.normal(size=(21, 3))
    assert sse(mp_align(3 * gt + 5, gt), gt) < 1e-20
    R90 = Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()
    assert sse(mp_align(gt @ R90.T, gt), gt) > 1e-3


def test_mp_align_scale_matches_scan(rng):
    gt, pred = rng.normal(size=(2, 21, 3))
    X, Y = pred - pred.mean(0), gt - gt.mean(0)
    best = minimize_scalar(lambda s: sse(s * X, Y), bracket=(-10, 10), method="golden", tol=1e-12).x
    aligned = mp_align(pred, gt)
    s = (aligned - aligned.mean(0))[0, 0] / X[0, 0]
    assert s == pytest.approx(best, abs=1e-6)


def test_f_score_examples():
    gt = np.array([[0.0, 0, 0], [20.0, 0, 0]])
    pred = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    assert f_score(pred, gt, 5.0, to_mm=1.0) == pytest.approx(0.5)
    assert f_score(gt, gt, 0.1, to_mm=1.0) == 1.0


def test_f_score_matches_exhaustive(rng):
    for _ in range(5):
        a, b = rng.uniform(0, 60, size=(2, 50, 3))
        for thr in (5.0, 15.0):
            p = (brute_force_nearest(a, b) <= thr).mean()
            r = (brute_force_nearest(b, a) <= thr).mean()
            want = 0.0 if p + r == 0 else 2 * p * r / (p + r)
            assert f_score(a, b, thr, to_mm=1.0) == want
            assert f_score(b, a, thr, to_mm=1.0) == want


def test_auc_examples():
    assert auc(np.zeros(10)) == 1.0
    assert auc(np.full(10, 50.1)) == 0.0
    thresholds = [50.0 * i / 100 for i in range(1, 101)]
    direct = sum(sum(1 for e in (10.0, 30.0) if e <= t) / 2 for t in thresholds) / 100
    assert auc([10.0, 30.0]) == pytest.approx(direct, abs=1e-15)
    assert direct == pytest.approx(0.61)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 80), min_size=1, max_size=30))
def test_auc_zero_error_never_hurts(errors):
    assert auc(errors + [0.0]) >= auc(errors) - 1e-15


def test_pck_curve_is_monotone(rng):
    _, pck = pck_curve(rng.uniform(0, 60, 200))
    assert (np.diff(pck) >= 0).all() and 0 <= pck.min() and pck.max() <= 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_pajpe_invariant_to_similarity(seed):
    r = np.random.default_rng(seed)
    gt, pred = r.normal(size=(2, 21, 3)) * 0.05
    moved = r.uniform(0.3, 3) * pred @ random_rotation(r).T + r.normal(size=3)
    a = point_error(procrustes_align(pred, gt), gt)
    b = point_error(procrustes_align(moved, gt), gt)
    assert abs(a - b) < 1e-6


def test_pajpe_not_above_mp_error(rng):
    for _ in range(1000):
        gt = rng.normal(size=(21, 3)) * 0.05
        pred = gt + rng.normal(size=(21, 3)) * 0.01
        pred = pred @ random_rotation(rng).T * rng.uniform(0.5, 2)
        assert point_error(procrustes_align(pred, gt), gt) <= point_error(mp_align(pred, gt), gt) + 1e-9


def test_evaluate_arrays_composition(rng):
    gt_j = rng.normal(size=(3, 21, 3)) * 0.05
    gt_v = rng.normal(size=(3, 63, 3)) * 0.05
    pj = gt_j + rng.normal(size=gt_j.shape) * 0.004
    pv = gt_v + rng.normal(size=gt_v.shape) * 0.004
    report, je, ve = evaluate_arrays(pj, gt_j, pv, gt_v)
    manual_pa = np.mean([point_error(procrustes_align(a, b), b) for a, b in zip(pj, gt_j)])
    manual_pv = np.mean([point_error(procrustes_align(a, b), b) for a, b in zip(pv, gt_v)])
    manual_f5 = np.mean([f_score(procrustes_align(a, b), b, 5.0) for a, b in zip(pv, gt_v)])
    assert report.pajpe == pytest.approx(manual_pa, abs=1e-12)
    assert report.pavpe == pytest.approx(manual_pv, abs=1e-12)
    assert report.f5 == pytest.approx(manual_f5, abs=1e-12)
    assert report.auc_pose == auc(je) and report.n_samples == 3
    for v in (report.f5, report.f15, report.auc_pose, report.auc_mesh):
        assert 0 <= v <= 1


def test_report_round_trip(tmp_path):
    r = MetricReport(1.0, 2.0, 3.0, 0.5, 0.9, 0.7, 0.6, 4)
    r.save(tmp_path / "m.json")
    assert MetricReport.load(tmp_path / "m.json") == r


def test_curves_csv(tmp_path):
    write_curves_csv(tmp_path / "c.csv", np.array([1.0, 10.0]), np.array([60.0]))
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold_mm,pck_pose,pck_mesh" and len(lines) == 101
