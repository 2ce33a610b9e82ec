"""Command-line interface.

Subcommands: simulate, init, ablate, check-jacobians, check-rank, bench.
Exit codes: 0 success; 2 usage/config error; on pipeline failure the failure
category maps to 3=Obs, 4=Lin, 5=NL, 6=Cov, 7=ATE; 1 for unexpected errors.
Flags mirror RunConfig fields; --config takes a JSON file keyed by the same
names (flags given on the command line win).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import cloud as cloudmod
from . import linear_init as lin
from . import refine as refinemod
from . import sim as simmod
from .geometry import RigidTransform, Rotation3
from .imu import ImuNoise, load_imu_csv, save_imu_csv
from .metrics import FAILURE_CATEGORIES
from .pipeline import (CONSUMER_NOISE, ConfigError, RunConfig, Scenario,
                       default_extrinsics, keyframe_preintegrations,
                       run_ablation, run_pipeline, simulate_scenario)

CATEGORY_EXIT = {cat: 3 + i for i, cat in enumerate(FAILURE_CATEGORIES)}


def _add_runconfig_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (RunConfig keys)")
    p.add_argument("--n-keyframes", type=int)
    p.add_argument("--window", type=float)
    p.add_argument("--k-samples", type=int)
    p.add_argument("--variant", choices=["ff", "sc", "dongsi"])
    p.add_argument("--ransac", dest="use_ransac", action="store_true", default=None)
    p.add_argument("--no-ransac", dest="use_ransac", action="store_false")
    p.add_argument("--ransac-iters", type=int)
    p.add_argument("--ransac-tau", type=float)
    p.add_argument("--regions", type=str, help="grid dims, e.g. 3x3")
    p.add_argument("--conf-min", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.add_argument("--log", action="store_true", help="keep the LM iteration log")


def _parse_regions(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except Exception as e:
        raise ConfigError(f"bad region dims '{text}' (want RxC)") from e


def _build_config(args) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            raw = json.load(f)
        field_names = {f.name for f in dataclasses.fields(RunConfig)}
        for key, val in raw.items():
            if key not in field_names:
                raise ConfigError(f"unknown config key '{key}'")
            if key == "region_dims":
                val = tuple(val)
            if key == "ransac":
                val = lin.RansacConfig(**val)
            if key == "solver":
                val = refinemod.SolverConfig(**val)
            if key == "prior":
                val = refinemod.PriorConfig(**val)
            if key == "imu_noise":
                val = ImuNoise(**val)
            values[key] = val
    for flag, key in [("n_keyframes", "n_keyframes"), ("window", "window"),
                      ("k_samples", "k_samples"), ("variant", "variant"),
                      ("use_ransac", "use_ransac"), ("conf_min", "conf_min"),
                      ("seed", "seed")]:
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "regions", None):
        values["region_dims"] = _parse_regions(args.regions)
    if getattr(args, "ransac_iters", None) or getattr(args, "ransac_tau", None):
        base = values.get("ransac", lin.RansacConfig())
        values["ransac"] = lin.RansacConfig(
            iterations=args.ransac_iters or base.iterations,
            threshold=args.ransac_tau or base.threshold,
            min_points_per_frame=base.min_points_per_frame)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _scenario_from_args(args) -> Scenario:
    noise = CONSUMER_NOISE if args.noise == "consumer" else ImuNoise()
    sensor = simmod.SensorSpec(
        imu_rate=args.imu_rate, cam_rate=args.cam_rate, noise=noise,
        scale=args.scale, cloud_sigma=args.cloud_sigma,
        outlier_ratio=args.outlier_ratio)
    traj = simmod.TrajectorySpec(pattern=args.traj, amplitude=args.amplitude,
                                 angular_frequency=args.ang_freq,
                                 orientation_amplitude=args.orient_amp,
                                 duration=args.duration)
    return Scenario(trajectory=traj, sensor=sensor)


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--traj", choices=["figure8", "sinusoid", "twist"], default="figure8")
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--amplitude", type=float, default=0.5)
    p.add_argument("--ang-freq", type=float, default=2.0 * np.pi * 0.6)
    p.add_argument("--orient-amp", type=float, default=0.25)
    p.add_argument("--imu-rate", type=float, default=200.0)
    p.add_argument("--cam-rate", type=float, default=30.0)
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--cloud-sigma", type=float, default=0.0)
    p.add_argument("--outlier-ratio", type=float, default=0.0)
    p.add_argument("--noise", choices=["noiseless", "consumer"], default="noiseless")


def _save_extrinsics(path, t: RigidTransform) -> None:
    with open(path, "w") as f:
        json.dump({"rotation": t.rotation.matrix.tolist(),
                   "translation": t.translation.tolist()}, f, indent=2)


def _load_extrinsics(path) -> RigidTransform:
    with open(path) as f:
        d = json.load(f)
    return RigidTransform(Rotation3.from_matrix(np.array(d["rotation"])),
                          np.array(d["translation"], dtype=float))


def cmd_simulate(args) -> int:
    cfg = _build_config(args)
    scenario = _scenario_from_args(args)
    out = args.out or Path("simdata")
    out.mkdir(parents=True, exist_ok=True)
    samples, cloud, gt, tracks = simulate_scenario(scenario, cfg, args.seed)
    save_imu_csv(out / "imu.csv", samples)
    cloudmod.save_cloud(out / "cloud", cloud)
    simmod.save_gt_csv(out / "gt.csv", gt)
    simmod.save_tracks_csv(out / "tracks.csv", tracks, scenario.camera)
    _save_extrinsics(out / "extrinsics.json", scenario.t_cam_imu)
    manifest = {
        "trajectory": dataclasses.asdict(scenario.trajectory),
        "sensor": {"imu_rate": scenario.sensor.imu_rate,
                   "cam_rate": scenario.sensor.cam_rate,
                   "cloud_sigma": scenario.sensor.cloud_sigma,
                   "outlier_ratio": scenario.sensor.outlier_ratio},
        "scale": gt.scale,
        "gyro_bias": gt.biases.gyro.tolist(),
        "accel_bias": gt.biases.accel.tolist(),
        "gt_displacement": gt.gt_displacement,
        "pred_displacement": gt.pred_displacement,
        "seed": args.seed,
    }
    with open(out / "scenario.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {out}/imu.csv, cloud/, gt.csv, tracks.csv, scenario.json")
    return 0


def _load_gt_for_cloud(args, cloud):
    if not args.gt:
        return None
    manifest = args.scenario if args.scenario else None
    gt = simmod.load_gt_csv(args.gt, manifest)
    kf_times = [f.timestamp for f in cloud.frames]
    idx = []
    for t in kf_times:
        j = int(np.argmin(np.abs(gt.times - t)))
        if abs(gt.times[j] - t) > 1e-6:
            raise ConfigError(f"ground truth has no row at keyframe time {t}")
        idx.append(j)
    gt.times = gt.times[idx]
    gt.rotations = [gt.rotations[j] for j in idx]
    gt.positions = gt.positions[idx]
    gt.velocities = gt.velocities[idx]
    return gt


def cmd_init(args) -> int:
    cfg = _build_config(args)
    samples = load_imu_csv(args.imu)
    cloud = cloudmod.load_cloud(args.cloud)
    t_cam_imu = _load_extrinsics(args.extrinsics) if args.extrinsics \
        else default_extrinsics() if args.default_extrinsics else RigidTransform.identity()
    tracks = None
    if args.tracks:
        if cloud.camera is None:
            raise ConfigError("tracks need intrinsics in the cloud manifest")
        tracks = simmod.load_tracks_csv(args.tracks, cloud.camera)
    gt = _load_gt_for_cloud(args, cloud)
    result = run_pipeline(cfg, samples, cloud, t_cam_imu, gt=gt, tracks=tracks,
                          out_dir=args.out, write_lm_log=args.log)
    r = result.report
    if r.success:
        print(f"success: grav {r.gravity_error_deg:.3g} deg, "
              f"vel {r.velocity_error_mps:.3g} m/s, "
              f"scale lin/nl {r.scale_error_lin_pct:.3g}/{r.scale_error_nl_pct:.3g} %, "
              f"ATE {r.ate_deg:.3g} deg / {r.ate_m:.3g} m")
        return 0
    print(f"failure at stage category '{r.fail_category}': {result.error}")
    return CATEGORY_EXIT.get(r.fail_category, 1)


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    scenario = _scenario_from_args(args)
    values: list = []
    for tok in args.values.split(","):
        tok = tok.strip()
        if args.param == "region_dims":
            values.append(_parse_regions(tok))
        elif args.param in ("window",):
            values.append(float(tok))
        elif args.param in ("use_ransac",):
            values.append(tok.lower() in ("1", "true", "yes", "on"))
        else:
            values.append(int(tok) if tok.isdigit() else float(tok))
    seeds = list(range(args.n_seeds))
    out = args.out or Path("ablation.csv")
    rows = run_ablation(cfg, scenario, args.param, values, seeds, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_check_jacobians(args) -> int:
    import dataclasses as _dc
    cfg = _dc.replace(_build_config(args), use_ransac=False)
    scenario = _scenario_from_args(args)
    samples, cloud, gt, tracks = simulate_scenario(scenario, cfg, args.seed)
    res = run_pipeline(cfg, samples, cloud, scenario.t_cam_imu, gt=gt, tracks=tracks)
    if res.refine_result is None:
        print(f"pipeline failed before refinement: {res.error}")
        return 1
    kf_times = np.array([f.timestamp for f in cloud.frames])
    pairs, to0 = keyframe_preintegrations(samples, kf_times, cfg.imu_noise)
    sampled = cloudmod.filter_and_sample(cloud, scenario.camera, cfg.k_samples,
                                         cfg.conf_min)
    grid = cloudmod.assign_regions(sampled, scenario.camera, cfg.region_dims)
    states = refinemod.states_from_linear(res.linear_state, to0, cfg.gravity_mag)
    scales = refinemod.ScaleField.from_scale(max(res.linear_state.scale, 1e-3), grid)
    problem = refinemod.build_feature_free_problem(
        states, scales, pairs, sampled, scenario.t_cam_imu,
        refinemod.RefineNoise(reproj_sigma=cfg.pixel_sigma / scenario.camera.fx),
        cfg.prior, (cfg.imu_noise.gyro_walk, cfg.imu_noise.accel_walk),
        cfg.gravity_mag)
    worst = 0.0
    for label, err in refinemod.check_jacobians(problem):
        print(f"{label:36s} max rel err {err:.3e}")
        worst = max(worst, err)
    print(f"worst block: {worst:.3e}")
    return 0 if worst < 1e-5 else 1


def cmd_check_rank(args) -> int:
    cfg = _build_config(args)
    scenario = _scenario_from_args(args)
    rng = np.random.default_rng(args.seed)
    counts: dict[int, int] = {}
    for trial in range(args.count):
        seed = int(rng.integers(0, 2 ** 31))
        kf_times = simmod.keyframe_times(cfg.window, args.frames,
                                         scenario.sensor.cam_rate)
        samples = simmod.synthesize_imu(scenario.trajectory, scenario.sensor, seed)
        cloud, _, _ = simmod.synthesize_cloud(
            scenario.trajectory, scenario.sensor, scenario.camera,
            scenario.t_cam_imu, kf_times, seed=seed + 1, n_points=max(cfg.k_samples, 8))
        pairs, to0 = keyframe_preintegrations(samples, kf_times, cfg.imu_noise)
        sampled = cloudmod.filter_and_sample(cloud, scenario.camera,
                                             min(cfg.k_samples, 8), 1.0)
        system = lin.build_feature_free_system(sampled, to0, scenario.t_cam_imu,
                                               require_observable=False)
        rep = lin.rank_diagnostics(system)
        counts[rep.rank] = counts.get(rep.rank, 0) + 1
    for rank in sorted(counts):
        print(f"rank {rank}: {counts[rank]}/{args.count} systems")
    return 0


def cmd_bench(args) -> int:
    cfg = _build_config(args)
    scenario = _scenario_from_args(args)
    t0 = time.perf_counter()
    lin_ms = []
    nl_ms = []
    for seed in range(args.n_seeds):
        samples, cloud, gt, tracks = simulate_scenario(scenario, cfg, seed)
        res = run_pipeline(cfg, samples, cloud, scenario.t_cam_imu, gt=gt,
                           tracks=tracks)
        lin_ms.append(res.report.t_lin_ms)
        nl_ms.append(res.report.t_nl_ms)
    total = time.perf_counter() - t0
    print(f"{args.n_seeds} runs in {total:.2f}s; median linear "
          f"{np.median(lin_ms):.1f} ms, refinement {np.median(nl_ms):.1f} ms")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vinit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_runconfig_flags(p)
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", help="run initialization on on-disk data")
    _add_runconfig_flags(p)
    p.add_argument("--imu", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--tracks", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--scenario", type=Path, help="scenario.json with scale/bias truth")
    p.add_argument("--extrinsics", type=Path, help="camera-from-IMU JSON")
    p.add_argument("--default-extrinsics", action="store_true",
                   help="use the simulator's default camera mounting")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("ablate", help="sweep one config parameter")
    _add_runconfig_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check-jacobians", help="finite-difference Jacobian audit")
    _add_runconfig_flags(p)
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_check_jacobians)

    p = sub.add_parser("check-rank", help="rank diagnostics over random systems")
    _add_runconfig_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_check_rank)

    p = sub.add_parser("bench", help="per-stage timing over seeds")
    _add_runconfig_flags(p)
    _add_scenario_flags(p)
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
