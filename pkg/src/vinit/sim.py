"""Synthetic ground truth: analytic trajectories, IMU synthesis, cloud rendering.

Trajectories are closed-form in position, velocity, acceleration, and body
angular velocity, so every derivative used downstream is exact. The gyro
reads the body angular velocity plus bias and noise; the accelerometer reads
R_bw^T (a_world + g) + bias + noise with g = (0, 0, 9.81), matching the
propagation model in :mod:`vinit.imu` (free fall measures zero).

Clouds mimic a per-pixel feed-forward predictor: for every keyframe each
visible scene point contributes its exact pixel plus the point expressed in
the *reference* camera frame divided by the true scale, perturbed by Gaussian
noise scaled with 1/sqrt(confidence); a configurable fraction is replaced by
gross outliers with low (or adversarially high) confidence. Everything is
seeded and byte-reproducible.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import CloudFrame, PredictedCloud
from .geometry import (PinholeCamera, RigidTransform, Rotation3, rotmat_exp,
                       skew)
from .imu import Biases, ImuNoise, ImuPreintegration, ImuSample, GRAVITY_W


@dataclass(frozen=True)
class TrajectorySpec:
    """Analytic motion pattern over [0, duration] seconds.

    figure8: horizontal figure-eight with a vertical bob and oscillating
    attitude; sinusoid: translation along x with a roll oscillation; twist:
    constant body-frame velocity A*w along x and yaw rate orient*w.
    """

    pattern: str = "figure8"
    amplitude: float = 0.5
    angular_frequency: float = 2.0 * math.pi * 0.6
    orientation_amplitude: float = 0.25
    duration: float = 3.0

    def __post_init__(self):
        if self.pattern not in ("figure8", "sinusoid", "twist"):
            raise ValueError(f"unknown trajectory pattern '{self.pattern}'")


@dataclass(frozen=True)
class SensorSpec:
    imu_rate: float = 200.0
    cam_rate: float = 30.0
    noise: ImuNoise = field(default_factory=ImuNoise)
    biases: Biases = field(default_factory=Biases.zero)
    scale: float = 2.0                  # true metric scale of the cloud
    cloud_sigma: float = 0.0            # point noise, up-to-scale units
    outlier_ratio: float = 0.0
    adversarial_outliers: bool = False
    conf_mean: float = 5.0
    conf_cap: float = 100.0
    track_pixel_sigma: float = 0.0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ValueError("sensor rates must be positive")
        if self.scale <= 0:
            raise ValueError("true scale must be positive")
        if not (0.0 <= self.outlier_ratio < 1.0):
            raise ValueError("outlier ratio must be in [0, 1)")


@dataclass(frozen=True)
class TrajectorySample:
    rotation: Rotation3            # body-to-world
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    angular_velocity: np.ndarray   # body frame


@dataclass
class GroundTruth:
    """Keyframe truth plus the scalars the metrics need."""

    times: np.ndarray
    rotations: list[Rotation3]
    positions: np.ndarray
    velocities: np.ndarray
    biases: Biases
    scale: float
    gravity_in_body0: np.ndarray
    gt_displacement: float = 0.0       # first->last camera center, meters
    pred_displacement: float = 0.0     # same, in cloud (up-to-scale) units


def _angles(spec: TrajectorySpec, t: float):
    """Euler angles (yaw, pitch, roll) and rates for the oscillating attitude."""
    a = spec.orientation_amplitude
    w = spec.angular_frequency
    if spec.pattern == "sinusoid":
        roll = a * math.sin(w * t)
        droll = a * w * math.cos(w * t)
        return (0.0, 0.0, roll), (0.0, 0.0, droll)
    yaw = a * math.sin(w * t)
    dyaw = a * w * math.cos(w * t)
    pitch = 0.7 * a * math.sin(0.8 * w * t + 0.3)
    dpitch = 0.7 * a * 0.8 * w * math.cos(0.8 * w * t + 0.3)
    roll = 0.5 * a * math.sin(1.1 * w * t + 1.1)
    droll = 0.5 * a * 1.1 * w * math.cos(1.1 * w * t + 1.1)
    return (yaw, pitch, roll), (dyaw, dpitch, droll)


def generate_trajectory(spec: TrajectorySpec, t: float) -> TrajectorySample:
    """Closed-form kinematics at time t in [0, duration]."""
    if not (0.0 <= t <= spec.duration + 1e-9):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    aa = spec.amplitude
    w = spec.angular_frequency

    if spec.pattern == "twist":
        v_body = np.array([aa * w, 0.0, 0.0])
        w_body = np.array([0.0, 0.0, spec.orientation_amplitude * w])
        rot = rotmat_exp(w_body * t)
        wn = np.linalg.norm(w_body)
        k = skew(w_body)
        if wn * t < 1e-6:
            integral = t * np.eye(3) + 0.5 * t * t * k + (t ** 3 / 6.0) * (k @ k)
        else:
            integral = (t * np.eye(3) + (1 - math.cos(wn * t)) / wn ** 2 * k
                        + (t - math.sin(wn * t) / wn) / wn ** 2 * (k @ k))
        pos = integral @ v_body
        vel = rot @ v_body
        acc = rot @ (k @ v_body)
        return TrajectorySample(Rotation3(rot), pos, vel, acc, w_body)

    if spec.pattern == "sinusoid":
        s, c = math.sin(w * t), math.cos(w * t)
        pos = np.array([aa * s, 0.0, 0.0])
        vel = np.array([aa * w * c, 0.0, 0.0])
        acc = np.array([-aa * w * w * s, 0.0, 0.0])
    else:  # figure8
        s1, c1 = math.sin(w * t), math.cos(w * t)
        s2, c2 = math.sin(2 * w * t), math.cos(2 * w * t)
        sz, cz = math.sin(w * t + 0.5), math.cos(w * t + 0.5)
        pos = np.array([aa * s1, 0.5 * aa * s2, 0.25 * aa * sz])
        vel = np.array([aa * w * c1, aa * w * c2, 0.25 * aa * w * cz])
        acc = np.array([-aa * w * w * s1, -2 * aa * w * w * s2, -0.25 * aa * w * w * sz])

    (yaw, pitch, roll), (dy, dp, dr) = _angles(spec, t)
    rot = (rotmat_exp([0, 0, yaw]) @ rotmat_exp([0, pitch, 0])
           @ rotmat_exp([roll, 0, 0]))
    # Body rates for the z-y-x Euler parameterization.
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    w_body = np.array([dr - dy * sp,
                       dp * cr + dy * cp * sr,
                       dy * cp * cr - dp * sr])
    return TrajectorySample(Rotation3(rot), pos, vel, acc, w_body)


def synthesize_imu(spec: TrajectorySpec, sensor: SensorSpec, seed: int = 0) -> list[ImuSample]:
    """Sampled IMU stream over the trajectory, with bias and seeded noise."""
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration * sensor.imu_rate)) + 1
    times = np.arange(n) / sensor.imu_rate
    sg = sensor.noise.gyro_density * math.sqrt(sensor.imu_rate)
    sa = sensor.noise.accel_density * math.sqrt(sensor.imu_rate)
    ng = rng.standard_normal((n, 3)) * sg
    na = rng.standard_normal((n, 3)) * sa
    out = []
    for i, t in enumerate(times):
        ts = generate_trajectory(spec, float(t))
        gyro = ts.angular_velocity + sensor.biases.gyro + ng[i]
        accel = (ts.rotation.matrix.T @ (ts.acceleration + GRAVITY_W)
                 + sensor.biases.accel + na[i])
        out.append(ImuSample(float(t), gyro, accel))
    return out


def exact_preintegration(spec: TrajectorySpec, t0: float, t1: float) -> ImuPreintegration:
    """Zero-error preintegration straight from the analytic trajectory.

    Inverts the propagation equations at the true states; covariance and bias
    Jacobians are zero (there is no measurement path). Used as the
    integration-free oracle in tests and for noiseless system assembly.
    """
    a = generate_trajectory(spec, t0)
    b = generate_trajectory(spec, t1)
    dt = t1 - t0
    r0t = a.rotation.matrix.T
    drot = r0t @ b.rotation.matrix
    dv = r0t @ (b.velocity - a.velocity + GRAVITY_W * dt)
    dp = r0t @ (b.position - a.position - a.velocity * dt + 0.5 * GRAVITY_W * dt * dt)
    return ImuPreintegration(Rotation3(drot), dv, dp, dt,
                             np.zeros((9, 9)), np.zeros((9, 6)), Biases.zero())


def keyframe_times(window: float, n: int, cam_rate: float, start: float = 0.0) -> np.ndarray:
    """n keyframe times, uniform over [start, start+window], snapped to the camera grid."""
    if n < 2:
        raise ValueError("need at least 2 keyframes")
    total_ticks = int(round(window * cam_rate))
    if total_ticks < n - 1:
        raise ValueError(f"window {window}s at {cam_rate}Hz has only "
                         f"{total_ticks} camera intervals; need {n - 1}")
    ticks = np.round(np.linspace(0, total_ticks, n)).astype(int)
    if len(np.unique(ticks)) != n:
        raise ValueError("keyframe snapping produced duplicate frames")
    return start + ticks / cam_rate


def camera_pose(spec: TrajectorySpec, t: float, t_cam_imu: RigidTransform) -> RigidTransform:
    """World-from-camera pose at time t."""
    ts = generate_trajectory(spec, t)
    t_w_i = RigidTransform(ts.rotation, ts.position)
    return t_w_i @ t_cam_imu.inverse()


def make_scene(spec: TrajectorySpec, kf_times: np.ndarray, camera: PinholeCamera,
               t_cam_imu: RigidTransform, seed: int = 0, n_points: int = 200,
               margin_px: float = 4.0, max_rounds: int = 200) -> np.ndarray:
    """World-frame scene points visible from every keyframe.

    Candidates are drawn uniformly in a 4 x 6 x 4 m box 1-5 m ahead (world x)
    of the trajectory centroid and rejection-filtered for visibility. Raises
    after max_rounds if the configuration cannot supply enough points.
    """
    rng = np.random.default_rng(seed)
    centroid = np.mean([generate_trajectory(spec, float(t)).position
                        for t in kf_times], axis=0)
    poses = [camera_pose(spec, float(t), t_cam_imu).inverse() for t in kf_times]

    accepted: list[np.ndarray] = []
    for _ in range(max_rounds):
        if len(accepted) >= n_points:
            break
        cand = centroid + rng.uniform([1.0, -3.0, -2.0], [5.0, 3.0, 2.0],
                                      size=(4 * n_points, 3))
        ok = np.ones(len(cand), dtype=bool)
        for pose in poses:
            pc = pose.apply(cand)
            ok &= pc[:, 2] > 0.3
            z = np.where(pc[:, 2] > 0.3, pc[:, 2], 1.0)
            px = camera.normalized_to_pixel(pc[:, :2] / z[:, None])
            ok &= camera.contains(px, margin=margin_px)
        accepted.extend(cand[ok])
    if len(accepted) < n_points:
        raise RuntimeError(f"only {len(accepted)} scene points visible from all "
                           f"keyframes after {max_rounds} rounds")
    return np.array(accepted[:n_points])


def synthesize_cloud(spec: TrajectorySpec, sensor: SensorSpec, camera: PinholeCamera,
                     t_cam_imu: RigidTransform, kf_times: np.ndarray, seed: int = 0,
                     scene: np.ndarray | None = None, n_points: int = 200):
    """Render scene points into a predicted cloud plus ground truth and tracks.

    Returns (cloud, gt, tracks) where tracks is a dict with flat observation
    arrays frames/features/uv (normalized bearings), usable by the
    feature-based paths. Feature ids index the scene array.
    """
    rng = np.random.default_rng(seed)
    if scene is None:
        scene = make_scene(spec, kf_times, camera, t_cam_imu,
                           seed=seed + 101, n_points=n_points)
    n = len(kf_times)
    cam_poses = [camera_pose(spec, float(t), t_cam_imu) for t in kf_times]
    t_c0_w = cam_poses[0].inverse()

    frames: list[CloudFrame] = []
    obs_frames: list[int] = []
    obs_features: list[int] = []
    obs_uv: list[np.ndarray] = []
    for i in range(n):
        pc = cam_poses[i].inverse().apply(scene)
        uv = pc[:, :2] / pc[:, 2][:, None]
        px = camera.normalized_to_pixel(uv)
        if not np.all(camera.contains(px)):
            raise RuntimeError(f"scene point left the view in keyframe {i}")

        p_c0 = t_c0_w.apply(scene) / sensor.scale
        conf = np.minimum(1.0 + rng.exponential(sensor.conf_mean, size=len(scene)),
                          sensor.conf_cap)
        noisy = p_c0 + rng.standard_normal(p_c0.shape) * (
            sensor.cloud_sigma / np.sqrt(conf))[:, None]
        n_out = int(math.floor(sensor.outlier_ratio * len(scene)))
        if n_out > 0:
            idx = rng.choice(len(scene), size=n_out, replace=False)
            box = 3.0 * np.max(np.abs(p_c0))
            noisy[idx] = rng.uniform(-box, box, size=(n_out, 3))
            if sensor.adversarial_outliers:
                conf[idx] = rng.uniform(50.0, sensor.conf_cap, size=n_out)
            else:
                conf[idx] = np.minimum(1.0 + rng.exponential(0.3, size=n_out), 2.0)
        frames.append(CloudFrame(float(kf_times[i]), px, noisy, conf))

        uv_obs = uv.copy()
        if sensor.track_pixel_sigma > 0:
            uv_obs += rng.standard_normal(uv.shape) * np.array(
                [sensor.track_pixel_sigma / camera.fx,
                 sensor.track_pixel_sigma / camera.fy])
        obs_frames.extend([i] * len(scene))
        obs_features.extend(range(len(scene)))
        obs_uv.extend(uv_obs)

    states = [generate_trajectory(spec, float(t)) for t in kf_times]
    r0 = states[0].rotation.matrix
    cam_centers = np.array([p.translation for p in cam_poses])
    gt_disp = float(np.linalg.norm(cam_centers[-1] - cam_centers[0]))
    gt = GroundTruth(
        times=np.asarray(kf_times, dtype=float),
        rotations=[s.rotation for s in states],
        positions=np.array([s.position for s in states]),
        velocities=np.array([s.velocity for s in states]),
        biases=sensor.biases,
        scale=sensor.scale,
        gravity_in_body0=r0.T @ GRAVITY_W,
        gt_displacement=gt_disp,
        pred_displacement=gt_disp / sensor.scale,
    )
    cloud = PredictedCloud(frames, camera.width, camera.height, camera, 0)
    tracks = {"frames": np.array(obs_frames), "features": np.array(obs_features),
              "uv": np.array(obs_uv)}
    return cloud, gt, tracks


# ---------------------------------------------------------------------------
# File output for the `simulate` CLI
# ---------------------------------------------------------------------------

GT_CSV_HEADER = "#t,qw,qx,qy,qz,px,py,pz,vx,vy,vz"


def save_gt_csv(path, gt: GroundTruth) -> None:
    with open(path, "w", newline="") as f:
        f.write(GT_CSV_HEADER + "\n")
        for i, t in enumerate(gt.times):
            q = gt.rotations[i].quaternion
            row = [t, *q, *gt.positions[i], *gt.velocities[i]]
            f.write(",".join(f"{v:.12g}" for v in row) + "\n")


def load_gt_csv(path, manifest_path=None) -> GroundTruth:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    rotations = [Rotation3.from_quat(row[1:5]) for row in data]
    meta = {}
    if manifest_path is not None:
        with open(manifest_path) as f:
            meta = json.load(f)
    biases = Biases(np.array(meta.get("gyro_bias", [0, 0, 0]), dtype=float),
                    np.array(meta.get("accel_bias", [0, 0, 0]), dtype=float))
    return GroundTruth(
        times=data[:, 0], rotations=rotations, positions=data[:, 5:8],
        velocities=data[:, 8:11], biases=biases,
        scale=float(meta.get("scale", 1.0)),
        gravity_in_body0=rotations[0].matrix.T @ GRAVITY_W,
        gt_displacement=float(meta.get("gt_displacement", 0.0)),
        pred_displacement=float(meta.get("pred_displacement", 0.0)))


def save_tracks_csv(path, tracks: dict, camera: PinholeCamera) -> None:
    px = camera.normalized_to_pixel(tracks["uv"])
    with open(path, "w", newline="") as f:
        f.write("#feature_id,frame_index,u_px,v_px\n")
        for fid, fr, p in zip(tracks["features"], tracks["frames"], px):
            f.write(f"{fid},{fr},{p[0]:.9g},{p[1]:.9g}\n")


def load_tracks_csv(path, camera: PinholeCamera) -> dict:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return {"features": data[:, 0].astype(int), "frames": data[:, 1].astype(int),
            "uv": camera.pixel_to_normalized(data[:, 2:4])}
