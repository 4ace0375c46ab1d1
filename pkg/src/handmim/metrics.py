"""Pose and mesh evaluation metrics: PA/MP-aligned point errors, F-scores, AUC."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPointsError

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    pajpe: float
    pavpe: float
    mpjpe: float
    f5: float
    f15: float
    auc_pose: float
    auc_mesh: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))


def similarity_transform(pred, gt):
    """Closed-form ``(s, R, t)`` minimising ``sum ||s R pred_i + t - gt_i||^2``."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape[0] < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {pred.shape[0]}")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    X, Y = pred - mu_p, gt - mu_g
    var_p = (X**2).sum()
    U, S, Vt = np.linalg.svd(X.T @ Y)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0] * (pred.shape[1] - 1) + [d])
    R = (U @ D @ Vt).T
    s = (S * np.diag(D)).sum() / var_p if var_p > 0 else 1.0
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred, gt):
    s, R, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=float) @ R.T + t


def mp_align(pred, gt):
    """Scale-and-translation alignment (no rotation)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    X = pred - pred.mean(0)
    Y = gt - gt.mean(0)
    denom = (X * X).sum()
    if denom <= 0:
        log.warning("mp_align: prediction has zero variance, using unit scale")
        s = 1.0
    else:
        s = (X * Y).sum() / denom
    return s * X + gt.mean(0)


def point_error(pred_aligned, gt, to_mm: float = 1000.0) -> float:
    """Mean Euclidean distance in millimeters (inputs in meters by default)."""
    diff = np.asarray(pred_aligned, dtype=float) - np.asarray(gt, dtype=float)
    return float(np.linalg.norm(diff, axis=-1).mean() * to_mm)


def f_score(pred, gt, threshold_mm: float, to_mm: float = 1000.0) -> float:
    pred = np.asarray(pred, dtype=float) * to_mm
    gt = np.asarray(gt, dtype=float) * to_mm
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    precision = float((d_pg <= threshold_mm).mean())
    recall = float((d_gp <= threshold_mm).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pck_curve(errors_mm, max_threshold: float = 50.0, steps: int = 100):
    """Fraction of errors at or below each of ``steps`` equally spaced thresholds in ``(0, max]``."""
    errors = np.asarray(errors_mm, dtype=float).ravel()
    thresholds = np.linspace(max_threshold / steps, max_threshold, steps)
    if errors.size == 0:
        return thresholds, np.zeros(steps)
    pck = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, pck


def auc(errors_mm, max_threshold: float = 50.0, steps: int = 100) -> float:
    return float(pck_curve(errors_mm, max_threshold, steps)[1].mean())


def per_point_errors(pred_aligned, gt, to_mm: float = 1000.0) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred_aligned) - np.asarray(gt), axis=-1) * to_mm


def evaluate_arrays(pred_j3d, gt_j3d, pred_verts, gt_verts, max_threshold=50.0, steps=100):
    """Score stacked predictions ``[N, 21, 3]`` / ``[N, P, 3]`` (meters).

    Returns the report plus per-point PA errors for joints and vertices (mm),
    which feed the PCK curves.
    """
    pa_j, pa_v, mp_j, f5, f15 = [], [], [], [], []
    joint_errs, vert_errs = [], []
    for pj, gj, pv, gv in zip(pred_j3d, gt_j3d, pred_verts, gt_verts):
        aj = procrustes_align(pj, gj)
        av = procrustes_align(pv, gv)
        ej, ev = per_point_errors(aj, gj), per_point_errors(av, gv)
        joint_errs.append(ej)
        vert_errs.append(ev)
        pa_j.append(ej.mean())
        pa_v.append(ev.mean())
        mp_j.append(point_error(mp_align(pj, gj), gj))
        f5.append(f_score(av, gv, 5.0))
        f15.append(f_score(av, gv, 15.0))
    joint_errs = np.concatenate(joint_errs) if joint_errs else np.zeros(0)
    vert_errs = np.concatenate(vert_errs) if vert_errs else np.zeros(0)
    report = MetricReport(
        pajpe=float(np.mean(pa_j)) if pa_j else 0.0,
        pavpe=float(np.mean(pa_v)) if pa_v else 0.0,
        mpjpe=float(np.mean(mp_j)) if mp_j else 0.0,
        f5=float(np.mean(f5)) if f5 else 0.0,
        f15=float(np.mean(f15)) if f15 else 0.0,
        auc_pose=auc(joint_errs, max_threshold, steps),
        auc_mesh=auc(vert_errs, max_threshold, steps),
        n_samples=len(pa_j),
    )
    return report, joint_errs, vert_errs


def write_curves_csv(path, joint_errs, vert_errs, max_threshold=50.0, steps=100):
    th, pck_pose = pck_curve(joint_errs, max_threshold, steps)
    _, pck_mesh = pck_curve(vert_errs, max_threshold, steps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "pck_pose", "pck_mesh"])
        for row in zip(th, pck_pose, pck_mesh):
            w.writerow([repr(float(v)) for v in row])
