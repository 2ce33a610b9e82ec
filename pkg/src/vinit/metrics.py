"""Initialization metrics and the success gate.

Failure taxonomy used throughout (exactly one category per failed window):

- ``Obs``:  insufficient observations (frames, samples, IMU coverage)
- ``Lin``:  rank-deficient or unsolvable linear system, non-positive scale
- ``NL``:   nonlinear refinement diverged or failed to converge
- ``Cov``:  state covariance could not be recovered at the optimum
- ``ATE``:  window position ATE above the threshold (default 0.5 m)

Window ATE aligns the estimate to ground truth with a yaw-plus-translation
(4-DoF) transform fitted at the first pose; gravity is shared by construction
so roll/pitch are comparable without alignment.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .geometry import Rotation3, rotmat_exp, rotmat_log

FAILURE_CATEGORIES = ("Obs", "Lin", "NL", "Cov", "ATE")


class NearZeroMotion(ValueError):
    """Scale error undefined: ground-truth displacement below 1 mm."""


@dataclass
class InitReport:
    """Per-window metrics row. NaN marks quantities that never got computed."""

    window_id: int = 0
    gravity_error_deg: float = math.nan
    velocity_error_mps: float = math.nan
    scale_error_lin_pct: float = math.nan
    scale_error_nl_pct: float = math.nan
    ate_deg: float = math.nan
    ate_m: float = math.nan
    success: bool = False
    fail_category: str = ""
    t_lin_ms: float = 0.0
    t_nl_ms: float = 0.0

    def __post_init__(self):
        if not self.success and self.fail_category not in FAILURE_CATEGORIES:
            raise ValueError(f"unsuccessful report needs one failure category, "
                             f"got '{self.fail_category}'")
        if self.success and self.fail_category:
            raise ValueError("successful report must not carry a failure category")


METRICS_CSV_COLUMNS = ["window_id", "grav_deg", "vel_mps", "scale_lin_pct",
                       "scale_nl_pct", "ate_deg", "ate_m", "success",
                       "fail_category", "t_lin_ms", "t_nl_ms"]


def gravity_error_deg(r_est: Rotation3, r_gt: Rotation3) -> float:
    """Angle between gravity directions implied by two world-from-body rotations.

    Both arguments map the first body frame into their gravity-aligned world
    (+z up); the body-frame gravity direction is R^T e_z, and the error is the
    angle between the two unit vectors. Invariant to yaw on either side.
    """
    ez = np.array([0.0, 0.0, 1.0])
    g_est = r_est.matrix.T @ ez
    g_gt = r_gt.matrix.T @ ez
    c = float(g_est @ g_gt / (np.linalg.norm(g_est) * np.linalg.norm(g_gt)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def scale_error_pct(s_est: float, pred_displacement: float,
                    gt_displacement: float) -> float:
    """Relative scale error against the displacement-ratio ground truth.

    The true scale is |gt displacement| / |predicted displacement| (the factor
    turning up-to-scale geometry metric). Requires > 1 mm of true motion.
    """
    if gt_displacement <= 1e-3:
        raise NearZeroMotion(f"ground-truth displacement {gt_displacement:.4g} m")
    s_gt = gt_displacement / pred_displacement
    return 100.0 * abs(s_est - s_gt) / s_gt


def window_ate(est_rotations: list[Rotation3], est_positions: np.ndarray,
               gt_rotations: list[Rotation3], gt_positions: np.ndarray) -> tuple[float, float]:
    """RMS rotation (deg) and translation (m) error after 4-DoF alignment.

    The alignment rotates the estimate about world z and translates it so the
    first poses match: psi* is the best-fit z-rotation of R_gt0 R_est0^T
    (Frobenius sense), t* = p_gt0 - Rz(psi*) p_est0.
    """
    if len(est_rotations) != len(gt_rotations) or len(est_positions) != len(gt_positions):
        raise ValueError("pose list length mismatch")
    est_positions = np.asarray(est_positions, dtype=float)
    gt_positions = np.asarray(gt_positions, dtype=float)
    r_err0 = gt_rotations[0].matrix @ est_rotations[0].matrix.T
    psi = math.atan2(r_err0[1, 0] - r_err0[0, 1], r_err0[0, 0] + r_err0[1, 1])
    rz = rotmat_exp([0.0, 0.0, psi])
    t = gt_positions[0] - rz @ est_positions[0]

    ang_sq = 0.0
    trans_sq = 0.0
    n = len(est_rotations)
    for i in range(n):
        r_al = rz @ est_rotations[i].matrix
        ang = np.linalg.norm(rotmat_log(r_al @ gt_rotations[i].matrix.T))
        ang_sq += ang * ang
        d = rz @ est_positions[i] + t - gt_positions[i]
        trans_sq += float(d @ d)
    return math.degrees(math.sqrt(ang_sq / n)), math.sqrt(trans_sq / n)


def chi_square_gate(whitened_residuals: np.ndarray, dof: int,
                    level: float = 0.95) -> bool:
    """Total whitened squared residual against the chi-square quantile.

    dof is residual dimension minus variable dimension and must be positive.
    """
    if dof <= 0:
        raise ValueError(f"non-positive degrees of freedom: {dof}")
    total = float(np.asarray(whitened_residuals) @ np.asarray(whitened_residuals))
    return total <= float(chi2.ppf(level, dof))


def success_gate(window_id: int,
                 obs_ok: bool,
                 lin_ok: bool,
                 nl_converged: bool,
                 cov_ok: bool,
                 ate: tuple[float, float] | None,
                 ate_threshold_m: float = 0.5,
                 gravity_error: float = math.nan,
                 velocity_error: float = math.nan,
                 scale_error_lin: float = math.nan,
                 scale_error_nl: float = math.nan,
                 t_lin_ms: float = 0.0,
                 t_nl_ms: float = 0.0) -> InitReport:
    """Assemble the per-window report; first failing stage names the category.

    ate=None means ground truth was unavailable: the ATE criterion is then
    skipped (weaker gate, flagged by NaN ATE columns in the report).
    """
    report = InitReport(window_id=window_id, gravity_error_deg=gravity_error,
                        velocity_error_mps=velocity_error,
                        scale_error_lin_pct=scale_error_lin,
                        scale_error_nl_pct=scale_error_nl,
                        success=True, t_lin_ms=t_lin_ms, t_nl_ms=t_nl_ms)
    if ate is not None:
        report.ate_deg, report.ate_m = ate
    if not obs_ok:
        category = "Obs"
    elif not lin_ok:
        category = "Lin"
    elif not nl_converged:
        category = "NL"
    elif not cov_ok:
        category = "Cov"
    elif ate is not None and report.ate_m > ate_threshold_m:
        category = "ATE"
    else:
        return report
    report.success = False
    report.fail_category = category
    return report


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9g}"
    return str(v)


def write_metrics_csv(path, reports: list[InitReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_CSV_COLUMNS)
        for r in reports:
            writer.writerow([_fmt(v) for v in (
                r.window_id, r.gravity_error_deg, r.velocity_error_mps,
                r.scale_error_lin_pct, r.scale_error_nl_pct, r.ate_deg, r.ate_m,
                r.success, r.fail_category, r.t_lin_ms, r.t_nl_ms)])
