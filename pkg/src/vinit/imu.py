"""IMU measurement model, preintegration, and state propagation.

Preintegration accumulates relative rotation/velocity/position deltas between
two times, independent of the global state. Gravity is *not* inside the
deltas; it enters in :func:`propagate`:

    R_{i+1} = R_i dR
    v_{i+1} = v_i - g dt + R_i dv
    p_{i+1} = p_i + v_i dt - 1/2 g dt^2 + R_i dp

with R_i the body-to-world rotation and g = (0, 0, 9.81).

The integrator is a midpoint rule over consecutive sample pairs. Each step is
itself a tiny preintegration segment and the running state is updated through
:func:`compose_preintegrations`; splitting a stream anywhere and composing the
halves therefore reproduces the single-pass result exactly (deltas, covariance,
and bias Jacobians alike).

Covariance is 9x9 over the error state (dtheta, dv, dp), in that order.
Bias Jacobians are 9x6, columns ordered (gyro bias, accel bias).
All functions are pure; inputs are never mutated.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (Rotation3, rotmat_exp, skew, so3_right_jacobian,
                       GRAVITY_MAGNITUDE)

GRAVITY_W = np.array([0.0, 0.0, GRAVITY_MAGNITUDE])


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: timestamp (s), gyro (rad/s), accel (m/s^2)."""

    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities; all units per sqrt(Hz)."""

    gyro_density: float = 0.0
    accel_density: float = 0.0
    gyro_walk: float = 0.0
    accel_walk: float = 0.0

    def __post_init__(self):
        if min(self.gyro_density, self.accel_density, self.gyro_walk, self.accel_walk) < 0:
            raise ValueError("noise densities must be non-negative")


@dataclass(frozen=True)
class Biases:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zero(cls) -> "Biases":
        return cls()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class ImuPreintegration:
    """Preintegrated deltas with covariance and first-order bias Jacobians.

    delta_rot maps the later body frame into the earlier one; delta_vel and
    delta_pos are expressed in the earlier body frame. covariance is over
    (dtheta, dv, dp); bias_jacobian maps (d bias_gyro, d bias_accel) increments
    relative to `biases` (the linearization point) onto the same error state.
    """

    delta_rot: Rotation3
    delta_vel: np.ndarray
    delta_pos: np.ndarray
    dt: float
    covariance: np.ndarray
    bias_jacobian: np.ndarray
    biases: Biases

    @classmethod
    def identity(cls, biases: Biases | None = None) -> "ImuPreintegration":
        return cls(Rotation3.identity(), np.zeros(3), np.zeros(3), 0.0,
                   np.zeros((9, 9)), np.zeros((9, 6)), biases or Biases.zero())


@dataclass(frozen=True)
class NavState:
    """Pose + velocity in the world frame; rotation is body-to-world."""

    rotation: Rotation3
    position: np.ndarray
    velocity: np.ndarray


def compose_preintegrations(a: ImuPreintegration, b: ImuPreintegration) -> ImuPreintegration:
    """Chain two consecutive segments (a spans 0->t, b spans t->T).

    The error state of `a` is transported through `b` with the exact
    first-order transition, so composing equals single-pass propagation.
    Both segments must share the linearization biases.
    """
    ra = a.delta_rot.matrix
    rb = b.delta_rot.matrix
    rot = ra @ rb
    vel = a.delta_vel + ra @ b.delta_vel
    pos = a.delta_pos + a.delta_vel * b.dt + ra @ b.delta_pos

    f = np.eye(9)
    f[0:3, 0:3] = rb.T
    f[3:6, 0:3] = -ra @ skew(b.delta_vel)
    f[6:9, 0:3] = -ra @ skew(b.delta_pos)
    f[6:9, 3:6] = b.dt * np.eye(3)
    g = np.eye(9)
    g[3:6, 3:6] = ra
    g[6:9, 6:9] = ra

    cov = f @ a.covariance @ f.T + g @ b.covariance @ g.T
    jac = f @ a.bias_jacobian + g @ b.bias_jacobian
    return ImuPreintegration(Rotation3(rot), vel, pos, a.dt + b.dt,
                             0.5 * (cov + cov.T), jac, a.biases)


def _step_preintegration(w0, w1, a0, a1, dt, biases: Biases, noise: ImuNoise) -> ImuPreintegration:
    """One midpoint-rule step between two consecutive samples."""
    wm = 0.5 * (w0 + w1) - biases.gyro
    ac0 = a0 - biases.accel
    ac1 = a1 - biases.accel
    phi = wm * dt
    rot = rotmat_exp(phi)
    jr = so3_right_jacobian(phi)
    a_loc = 0.5 * (ac0 + rot @ ac1)
    vel = a_loc * dt
    pos = 0.5 * a_loc * dt * dt

    # d(rot @ ac1)/d bias_gyro = rot [ac1]x Jr dt (right-perturbation chain)
    da_dbg = 0.5 * rot @ skew(ac1) @ jr * dt
    da_dba = -0.5 * (np.eye(3) + rot)
    jac = np.zeros((9, 6))
    jac[0:3, 0:3] = -jr * dt
    jac[3:6, 0:3] = da_dbg * dt
    jac[3:6, 3:6] = da_dba * dt
    jac[6:9, 0:3] = da_dbg * 0.5 * dt * dt
    jac[6:9, 3:6] = da_dba * 0.5 * dt * dt

    # Measurement noise enters where the bias does, with opposite sign.
    gmat = np.zeros((9, 6))
    gmat[:, 0:3] = -jac[:, 0:3]
    gmat[:, 3:6] = -jac[:, 3:6]
    q = np.zeros(6)
    q[0:3] = noise.gyro_density ** 2 / dt
    q[3:6] = noise.accel_density ** 2 / dt
    cov = gmat @ np.diag(q) @ gmat.T
    return ImuPreintegration(Rotation3(rot), vel, pos, dt, cov, jac, biases)


def preintegrate(samples: list[ImuSample], biases: Biases | None = None,
                 noise: ImuNoise | None = None) -> ImuPreintegration:
    """Integrate an ordered sample stream into one preintegration.

    Requires at least two samples with non-decreasing timestamps; zero-length
    intervals are skipped (two identical-time samples yield the identity).
    """
    biases = biases or Biases.zero()
    noise = noise or ImuNoise()
    if len(samples) < 2:
        raise ValueError(f"need >= 2 samples to preintegrate, got {len(samples)}")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) < 0):
        raise ValueError("sample timestamps are not monotone")

    out = ImuPreintegration.identity(biases)
    for k in range(len(samples) - 1):
        dt = samples[k + 1].timestamp - samples[k].timestamp
        if dt == 0.0:
            continue
        step = _step_preintegration(samples[k].gyro, samples[k + 1].gyro,
                                    samples[k].accel, samples[k + 1].accel,
                                    dt, biases, noise)
        out = compose_preintegrations(out, step)
    return out


def propagate(state: NavState, preint: ImuPreintegration,
              gravity: np.ndarray = GRAVITY_W) -> NavState:
    """Advance a world-frame state through a preintegrated segment."""
    r = state.rotation.matrix
    dt = preint.dt
    rot = Rotation3(r @ preint.delta_rot.matrix)
    vel = state.velocity - gravity * dt + r @ preint.delta_vel
    pos = state.position + state.velocity * dt - 0.5 * gravity * dt * dt + r @ preint.delta_pos
    return NavState(rot, pos, vel)


def correct_for_bias(preint: ImuPreintegration, new_biases: Biases) -> ImuPreintegration:
    """First-order update of the deltas to a new bias estimate.

    Valid for small bias increments; warns above 0.1 (second-order terms of
    the stored Jacobians become noticeable there).
    """
    db = new_biases.as_vector() - preint.biases.as_vector()
    n = float(np.linalg.norm(db))
    if n > 0.1:
        warnings.warn(f"bias increment norm {n:.3f} exceeds 0.1; "
                      "first-order correction may be inaccurate", stacklevel=2)
    j = preint.bias_jacobian
    rot = preint.delta_rot.matrix @ rotmat_exp(j[0:3, 0:3] @ db[0:3])
    vel = preint.delta_vel + j[3:6] @ db
    pos = preint.delta_pos + j[6:9] @ db
    return ImuPreintegration(Rotation3(rot), vel, pos, preint.dt,
                             preint.covariance, preint.bias_jacobian, new_biases)


def slice_samples(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1], with linearly interpolated boundary samples.

    The returned stream starts exactly at t0 and ends exactly at t1 so the
    preintegrated dt equals t1 - t0.
    """
    if t1 < t0:
        raise ValueError("t1 < t0")
    times = np.array([s.timestamp for s in samples])
    if t0 < times[0] - 1e-9 or t1 > times[-1] + 1e-9:
        raise ValueError(f"window [{t0}, {t1}] not covered by samples "
                         f"[{times[0]}, {times[-1]}]")

    def interp(t: float) -> ImuSample:
        k = int(np.searchsorted(times, t, side="right")) - 1
        k = min(max(k, 0), len(samples) - 2)
        a, b = samples[k], samples[k + 1]
        span = b.timestamp - a.timestamp
        w = 0.0 if span == 0 else (t - a.timestamp) / span
        return ImuSample(t, (1 - w) * a.gyro + w * b.gyro,
                         (1 - w) * a.accel + w * b.accel)

    inner = [s for s in samples if t0 < s.timestamp < t1]
    return [interp(t0)] + inner + [interp(t1)]


IMU_CSV_HEADER = "#timestamp [ns],w_x [rad s^-1],w_y [rad s^-1],w_z [rad s^-1],a_x [m s^-2],a_y [m s^-2],a_z [m s^-2]"


def load_imu_csv(path) -> list[ImuSample]:
    """Read an IMU CSV with columns timestamp_ns, wx, wy, wz, ax, ay, az."""
    out = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].lstrip().startswith("#"):
                continue
            vals = [float(v) for v in row[:7]]
            out.append(ImuSample(vals[0] * 1e-9, np.array(vals[1:4]), np.array(vals[4:7])))
    return out


def save_imu_csv(path, samples: list[ImuSample]) -> None:
    with open(path, "w", newline="") as f:
        f.write(IMU_CSV_HEADER + "\n")
        for s in samples:
            ns = int(round(s.timestamp * 1e9))
            fields = [f"{v:.9g}" for v in (*s.gyro, *s.accel)]
            f.write(",".join([str(ns)] + fields) + "\n")
