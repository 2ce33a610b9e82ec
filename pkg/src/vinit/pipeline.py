"""End-to-end orchestration: data -> linear init -> refinement -> evaluation.

The pipeline is a pure function of (config, data, seed); stage failures are
captured into the per-window report under the failure taxonomy of
:mod:`vinit.metrics` rather than raised, so sweeps keep running. Hard user
errors (invalid config, unreadable files) do raise.

Outputs under --out: ``run.json`` (config, stage summaries, chi-square),
``metrics.csv`` (one row per window), ``states.json`` (linear and refined
estimates), ``lm_log.csv`` (iter, cost, damping, step_norm, accepted).
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cloud as cloudmod
from . import linear_init as lin
from . import metrics as metricsmod
from . import refine as refinemod
from . import sim as simmod
from .geometry import (GRAVITY_MAGNITUDE, PinholeCamera, RigidTransform,
                       Rotation3, NonPositiveDepth, gravity_align)
from .imu import Biases, ImuNoise, ImuPreintegration, ImuSample, \
    compose_preintegrations, preintegrate, slice_samples

VARIANTS = ("ff", "sc", "dongsi")

CONSUMER_NOISE = ImuNoise(gyro_density=2e-3, accel_density=2e-2,
                          gyro_walk=4e-5, accel_walk=4e-4)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_keyframes: int = 5
    window: float = 0.5
    window_start: float = 0.0
    k_samples: int = 100
    variant: str = "ff"
    use_ransac: bool = True
    ransac: lin.RansacConfig = field(default_factory=lin.RansacConfig)
    region_dims: tuple[int, int] = (3, 3)
    conf_min: float = 1.5
    conf_cap: float = 100.0
    conf_power: float = 1.0
    pixel_sigma: float = 1.0
    cloud_sigma0: float = 0.05
    smooth_sigma: float = 0.05
    solver: refinemod.SolverConfig = field(default_factory=refinemod.SolverConfig)
    prior: refinemod.PriorConfig = field(default_factory=refinemod.PriorConfig)
    imu_noise: ImuNoise = CONSUMER_NOISE
    gravity_mag: float = GRAVITY_MAGNITUDE
    ate_threshold: float = 0.5
    chi2_level: float = 0.95
    max_features: int = 100
    seed: int = 0
    record_timings: bool = True

    def validate(self) -> None:
        if self.n_keyframes < 3:
            raise ConfigError(f"FewerThanThreeFrames: n_keyframes={self.n_keyframes}, "
                              "the linear system needs at least 3 keyframes")
        if self.window <= 0:
            raise ConfigError("window must be positive")
        if self.k_samples < 2:
            raise ConfigError("k_samples must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if min(self.region_dims) < 1:
            raise ConfigError("region dims must be >= 1")


@dataclass
class PipelineResult:
    report: metricsmod.InitReport
    linear_state: lin.LinearInitState | None = None
    rank: lin.RankReport | None = None
    inlier_mask: np.ndarray | None = None
    refine_result: refinemod.RefineResult | None = None
    refined_scale: float = math.nan
    chi2_pass: bool | None = None
    error: str = ""


def default_extrinsics() -> RigidTransform:
    """Camera-from-IMU: optical axis along body x, small lever arm."""
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return RigidTransform(Rotation3(r), np.array([0.015, -0.01, 0.02]))


@dataclass(frozen=True)
class Scenario:
    """Simulation recipe used by the CLI and ablations."""

    trajectory: simmod.TrajectorySpec = field(default_factory=simmod.TrajectorySpec)
    sensor: simmod.SensorSpec = field(default_factory=simmod.SensorSpec)
    camera: PinholeCamera = PinholeCamera(450.0, 450.0, 320.0, 240.0, 640, 480)
    t_cam_imu: RigidTransform = field(default_factory=default_extrinsics)


def simulate_scenario(scenario: Scenario, cfg: RunConfig, seed: int):
    """IMU stream, cloud, ground truth, and tracks for one window."""
    kf_times = simmod.keyframe_times(cfg.window, cfg.n_keyframes,
                                     scenario.sensor.cam_rate, cfg.window_start)
    samples = simmod.synthesize_imu(scenario.trajectory, scenario.sensor, seed=seed)
    cloud, gt, tracks = simmod.synthesize_cloud(
        scenario.trajectory, scenario.sensor, scenario.camera,
        scenario.t_cam_imu, kf_times, seed=seed + 7919)
    return samples, cloud, gt, tracks


def keyframe_preintegrations(samples: list[ImuSample], kf_times: np.ndarray,
                             noise: ImuNoise, biases: Biases | None = None):
    """Consecutive-pair and composed-to-frame-0 preintegrations (zero biases
    by default: the closed form carries no bias states)."""
    biases = biases or Biases.zero()
    pairs = []
    for t0, t1 in zip(kf_times[:-1], kf_times[1:]):
        seg = slice_samples(samples, float(t0), float(t1))
        pairs.append(preintegrate(seg, biases, noise))
    to0 = [ImuPreintegration.identity(biases)]
    for p in pairs:
        to0.append(compose_preintegrations(to0[-1], p))
    return pairs, to0


def _subsample_features(tracks: dict, max_features: int):
    ids = np.unique(tracks["features"])
    if ids.size > max_features:
        keep = ids[np.linspace(0, ids.size - 1, max_features).round().astype(int)]
    else:
        keep = ids
    sel = np.isin(tracks["features"], keep)
    remap = {int(f): i for i, f in enumerate(keep)}
    feats = np.array([remap[int(f)] for f in tracks["features"][sel]])
    return tracks["frames"][sel], feats, tracks["uv"][sel], keep


def run_pipeline(cfg: RunConfig, samples: list[ImuSample],
                 cloud: cloudmod.PredictedCloud,
                 t_cam_imu: RigidTransform | None = None,
                 gt: simmod.GroundTruth | None = None,
                 tracks: dict | None = None,
                 out_dir=None, window_id: int = 0,
                 write_lm_log: bool = True) -> PipelineResult:
    """Run one initialization window; never raises on stage failures."""
    cfg.validate()
    t_cam_imu = t_cam_imu or default_extrinsics()
    camera = cloud.camera
    if camera is None:
        raise ConfigError("cloud carries no intrinsics")
    if cloud.reference_index != 0:
        raise ConfigError("only reference_frame_index 0 is supported")
    if cfg.variant in ("sc", "dongsi") and tracks is None:
        raise ConfigError(f"variant '{cfg.variant}' needs feature tracks")

    result = PipelineResult(report=metricsmod.InitReport(
        window_id=window_id, success=False, fail_category="Obs"))
    kf_times = np.array([f.timestamp for f in cloud.frames])

    def finish(category: str, err: str = "", t_lin_ms: float = 0.0, **metrics) -> PipelineResult:
        result.report = metricsmod.InitReport(
            window_id=window_id, success=False, fail_category=category,
            gravity_error_deg=metrics.get("gravity_error", math.nan),
            velocity_error_mps=metrics.get("velocity_error", math.nan),
            scale_error_lin_pct=metrics.get("scale_error_lin", math.nan),
            t_lin_ms=t_lin_ms)
        result.error = err
        _write_outputs(out_dir, cfg, result, write_lm_log)
        return result

    t_start = time.perf_counter()
    try:
        if len(kf_times) < 3:
            return finish("Obs", f"{len(kf_times)} keyframes in cloud")
        pairs, to0 = keyframe_preintegrations(samples, kf_times, cfg.imu_noise)
        sampled = cloudmod.filter_and_sample(cloud, camera, cfg.k_samples, cfg.conf_min)
        grid = cloudmod.assign_regions(sampled, camera, cfg.region_dims)
    except (cloudmod.InsufficientPoints, ValueError) as e:
        return finish("Obs", str(e))

    # Linear stage -----------------------------------------------------------
    inlier_mask = None
    dongsi_features = None
    try:
        if cfg.variant == "dongsi":
            of, ofe, ouv, _ = _subsample_features(tracks, cfg.max_features)
            a, b = lin.build_feature_based_system(of, ofe, ouv, to0, t_cam_imu)
            sol = lin.solve_feature_based(a, b, cfg.gravity_mag)
            dongsi_features = sol.features
            dongsi_obs = (of, ofe, ouv)
            linear_state = sol.state
            system = lin.build_feature_free_system(sampled, to0, t_cam_imu,
                                                   cfg.conf_cap, cfg.conf_power)
            result.rank = lin.rank_diagnostics(system)
        else:
            system = lin.build_feature_free_system(sampled, to0, t_cam_imu,
                                                   cfg.conf_cap, cfg.conf_power)
            result.rank = lin.rank_diagnostics(system)
            if result.rank.rank < 7:
                return finish("Lin", f"rank {result.rank.rank} < 7")
            if cfg.use_ransac:
                linear_state, inlier_mask = lin.ransac_solve(
                    system, cfg.ransac, seed=cfg.seed, g_mag=cfg.gravity_mag)
            else:
                linear_state = lin.solve_constrained(system, cfg.gravity_mag)
    except (lin.FewerThanThreeFrames, lin.RankDeficient, lin.RootFindFailed,
            lin.NoValidHypothesis, ValueError) as e:
        return finish("Lin", str(e))
    result.linear_state = linear_state
    result.inlier_mask = inlier_mask
    scale_ok = cfg.variant == "dongsi" or linear_state.scale > 0
    t_lin_ms = (time.perf_counter() - t_start) * 1e3 if cfg.record_timings else 0.0
    if not scale_ok:
        return finish("Lin", f"non-positive scale {linear_state.scale:.4g}",
                      t_lin_ms=t_lin_ms)

    # Metrics available right after the linear stage --------------------------
    lin_metrics = {}
    if gt is not None:
        r_est = gravity_align(linear_state.gravity)
        lin_metrics["gravity_error"] = metricsmod.gravity_error_deg(r_est, gt.rotations[0])
        v_gt = gt.rotations[0].matrix.T @ gt.velocities[0]
        lin_metrics["velocity_error"] = float(np.linalg.norm(linear_state.velocity - v_gt))
        if cfg.variant != "dongsi":
            lin_metrics["scale_error_lin"] = metricsmod.scale_error_pct(
                linear_state.scale, gt.pred_displacement, gt.gt_displacement)

    # Nonlinear refinement -----------------------------------------------------
    t_nl_start = time.perf_counter()
    noise_cfg = refinemod.RefineNoise(
        reproj_sigma=cfg.pixel_sigma / camera.fx,
        cloud_sigma0=cfg.cloud_sigma0, smooth_sigma=cfg.smooth_sigma)
    walk = (cfg.imu_noise.gyro_walk, cfg.imu_noise.accel_walk)
    try:
        states0 = refinemod.states_from_linear(linear_state, to0, cfg.gravity_mag) \
            if cfg.variant != "dongsi" else _dongsi_states(linear_state, to0, cfg.gravity_mag)
        if cfg.variant == "ff":
            scales = refinemod.ScaleField.from_scale(max(linear_state.scale, 1e-3), grid)
            problem = refinemod.build_feature_free_problem(
                states0, scales, pairs, sampled, t_cam_imu, noise_cfg, cfg.prior,
                walk, cfg.gravity_mag, inlier_mask)
        elif cfg.variant == "sc":
            scales = refinemod.ScaleField.from_scale(max(linear_state.scale, 1e-3), grid)
            problem = _build_sc_problem(cfg, cloud, camera, tracks, linear_state,
                                        states0, scales, grid, pairs, t_cam_imu,
                                        noise_cfg, walk)
        else:
            r0 = states0[0].rotation.matrix
            feats_w = dongsi_features @ r0.T
            problem = refinemod.build_feature_based_problem(
                states0, feats_w, *dongsi_obs, pairs, t_cam_imu, noise_cfg,
                cfg.prior, walk, cfg.gravity_mag)
        refined = refinemod.solve_lm(problem, cfg.solver)
        result.refine_result = refined
    except (refinemod.DivergedNaN, NonPositiveDepth, ValueError) as e:
        return finish("NL", str(e), t_lin_ms=t_lin_ms, **lin_metrics)
    t_nl_ms = (time.perf_counter() - t_nl_start) * 1e3 if cfg.record_timings else 0.0

    if problem.scales is not None:
        result.refined_scale = float(np.median(problem.scales.values()))
    dof = refined.residual_dim - refined.variable_dim
    result.chi2_pass = metricsmod.chi_square_gate(
        refined.final_residual, dof, cfg.chi2_level) if dof > 0 else None

    nl_metrics = dict(lin_metrics)
    ate = None
    if gt is not None:
        if not math.isnan(result.refined_scale):
            nl_metrics["scale_error_nl"] = metricsmod.scale_error_pct(
                result.refined_scale, gt.pred_displacement, gt.gt_displacement)
        ate = metricsmod.window_ate(
            [s.rotation for s in refined.states],
            np.array([s.position for s in refined.states]),
            gt.rotations, gt.positions)

    result.report = metricsmod.success_gate(
        window_id, True, True, refined.converged, refined.covariance_ok, ate,
        cfg.ate_threshold, t_lin_ms=t_lin_ms, t_nl_ms=t_nl_ms,
        **{"gravity_error": nl_metrics.get("gravity_error", math.nan),
           "velocity_error": nl_metrics.get("velocity_error", math.nan),
           "scale_error_lin": nl_metrics.get("scale_error_lin", math.nan),
           "scale_error_nl": nl_metrics.get("scale_error_nl", math.nan)})
    _write_outputs(out_dir, cfg, result, write_lm_log)
    return result


def _dongsi_states(linear_state, to0, g_mag):
    return refinemod.states_from_linear(
        lin.LinearInitState(1.0, linear_state.velocity, linear_state.gravity),
        to0, g_mag)


def _build_sc_problem(cfg, cloud, camera, tracks, linear_state, states0, scales,
                      grid, pairs, t_cam_imu, noise_cfg, walk,
                      lookup_tol_px: float = 1.5):
    # the anchor residual is metric while the cloud noise is up-to-scale:
    # fold the scale estimate into the anchor standard deviation
    noise_cfg = dataclasses.replace(
        noise_cfg,
        cloud_sigma0=noise_cfg.cloud_sigma0 * max(linear_state.scale, 1e-3))
    of, ofe, ouv, _ = _subsample_features(tracks, cfg.max_features)
    m = int(ofe.max()) + 1
    anchors = []
    feat_init = np.full((m, 3), np.nan)
    r0 = states0[0].rotation
    for i, fm, uv in zip(of, ofe, ouv):
        frame = cloud.frames[int(i)]
        px = camera.normalized_to_pixel(uv)
        try:
            pbar, conf = cloudmod.lookup_point(frame, px, tol=lookup_tol_px)
        except (cloudmod.OutOfBounds, cloudmod.NeighborInvalid, ValueError):
            continue
        region, _ = cloudmod.region_of_points(pbar[None, :], camera, grid)
        anchors.append((int(fm), pbar, int(region[0]), float(conf)))
        if np.isnan(feat_init[fm, 0]):
            lifted = cloudmod.lift_to_I0(pbar, max(linear_state.scale, 1e-3),
                                         t_cam_imu.inverse())
            feat_init[fm] = r0.apply(lifted) + states0[0].position
    # features without any anchor carry no scale information; drop them
    have = ~np.isnan(feat_init[:, 0])
    if np.count_nonzero(have) < 8:
        raise ValueError(f"only {np.count_nonzero(have)} features have cloud "
                         "anchors; cannot initialize the scale-constrained problem")
    remap = -np.ones(m, dtype=int)
    remap[have] = np.arange(np.count_nonzero(have))
    keep_obs = have[ofe]
    of, ofe, ouv = of[keep_obs], remap[ofe[keep_obs]], ouv[keep_obs]
    anchors = [(int(remap[fm]), p, reg, c) for fm, p, reg, c in anchors]
    return refinemod.build_scale_constrained_problem(
        states0, feat_init[have], scales, of, ofe, ouv, anchors, pairs,
        t_cam_imu, noise_cfg, cfg.prior, walk, cfg.gravity_mag)


# ---------------------------------------------------------------------------
# Output serialization
# ---------------------------------------------------------------------------

def _config_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["region_dims"] = list(cfg.region_dims)
    return d


def _write_outputs(out_dir, cfg: RunConfig, result: PipelineResult,
                   write_lm_log: bool = True) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metricsmod.write_metrics_csv(out / "metrics.csv", [result.report])

    run = {"config": _config_dict(cfg), "error": result.error,
           "chi2_pass": result.chi2_pass,
           "rank": None if result.rank is None else result.rank.rank,
           "success": result.report.success,
           "fail_category": result.report.fail_category}
    with open(out / "run.json", "w") as f:
        json.dump(run, f, indent=2, sort_keys=True, default=str)

    states: dict = {}
    if result.linear_state is not None and not math.isnan(result.linear_state.scale):
        states["linear"] = {"scale": result.linear_state.scale,
                            "velocity": result.linear_state.velocity.tolist(),
                            "gravity": result.linear_state.gravity.tolist()}
    elif result.linear_state is not None:
        states["linear"] = {"velocity": result.linear_state.velocity.tolist(),
                            "gravity": result.linear_state.gravity.tolist()}
    rr = result.refine_result
    if rr is not None:
        states["refined"] = {
            "states": [{"quaternion": s.rotation.quaternion.tolist(),
                        "position": s.position.tolist(),
                        "velocity": s.velocity.tolist(),
                        "gyro_bias": s.gyro_bias.tolist(),
                        "accel_bias": s.accel_bias.tolist()}
                       for s in rr.states],
            "scales": None if rr.scales is None else rr.scales.values().tolist(),
            "scale_median": result.refined_scale,
            "converged": rr.converged,
            "covariance_ok": rr.covariance_ok,
            "cost": rr.cost}
    with open(out / "states.json", "w") as f:
        json.dump(states, f, indent=2, sort_keys=True)

    if write_lm_log:
        with open(out / "lm_log.csv", "w") as f:
            f.write("iter,cost,damping,step_norm,accepted\n")
            if rr is not None:
                for rec in rr.iterations:
                    f.write(f"{rec.iteration},{rec.cost:.12g},{rec.damping:.6g},"
                            f"{rec.step_norm:.9g},{int(rec.accepted)}\n")


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ["param", "value", "n_seeds", "success_rate",
                    "med_grav_deg", "med_vel_mps", "med_scale_lin_pct",
                    "med_scale_nl_pct", "med_ate_deg", "med_ate_m",
                    "med_t_lin_ms", "med_t_nl_ms"]


def run_ablation(base_cfg: RunConfig, scenario: Scenario, param: str,
                 values: list, seeds: list[int], out_path=None) -> list[dict]:
    """One-parameter sweep; per cell the median metrics over the seed list.

    `param` may name any RunConfig field (window and n_keyframes re-simulate
    the data accordingly); deterministic for a fixed seed list.
    """
    rows = []
    for value in values:
        if param == "use_ransac":
            value = bool(value)
        cfg = replace(base_cfg, **{param: value})
        reports = []
        for seed in seeds:
            cfg_seed = replace(cfg, seed=seed)
            samples, cloud, gt, tracks = simulate_scenario(scenario, cfg_seed, seed)
            res = run_pipeline(cfg_seed, samples, cloud, scenario.t_cam_imu,
                               gt=gt, tracks=tracks)
            reports.append(res.report)
        def med(attr):
            vals = [getattr(r, attr) for r in reports
                    if not math.isnan(getattr(r, attr))]
            return float(np.median(vals)) if vals else math.nan
        rows.append({
            "param": param, "value": value, "n_seeds": len(seeds),
            "success_rate": sum(r.success for r in reports) / len(reports),
            "med_grav_deg": med("gravity_error_deg"),
            "med_vel_mps": med("velocity_error_mps"),
            "med_scale_lin_pct": med("scale_error_lin_pct"),
            "med_scale_nl_pct": med("scale_error_nl_pct"),
            "med_ate_deg": med("ate_deg"),
            "med_ate_m": med("ate_m"),
            "med_t_lin_ms": med("t_lin_ms"),
            "med_t_nl_ms": med("t_nl_ms")})
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write(",".join(ABLATION_COLUMNS) + "\n")
            for row in rows:
                f.write(",".join(metricsmod._fmt(row[c]) if isinstance(row[c], (int, float, bool))
                                 else str(row[c]) for c in ABLATION_COLUMNS) + "\n")
    return rows
