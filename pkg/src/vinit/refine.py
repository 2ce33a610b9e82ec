"""Nonlinear visual-inertial refinement: residuals, Jacobians, dense LM solver.

Three problem variants share one machinery:

- ``fb``: classical feature-based bundle adjustment (IMU + feature
  reprojection + prior), features as explicit 3D states.
- ``sc``: scale-constrained: feature-based plus per-region scale parameters
  tied to the predicted cloud through 3D anchor residuals.
- ``ff``: feature-free: no feature states; reprojection is parameterized by
  the per-region scales applied to the predicted cloud, which is rigidly
  attached to the frame-0 state (so the classical 4-DoF gauge survives).

States are 15-dimensional (rotation, position, velocity, gyro bias, accel
bias); the tangent ordering is [dtheta, dp, dv, dbg, dba] with the rotation
retraction R <- R Exp(dtheta) (body-frame perturbation). Scales use a softplus
reparameterization s = eps + log(1 + exp(s_tilde)) with eps = 1e-5, keeping
them strictly positive under unconstrained optimization.

Gravity is a constant (0, 0, 9.81) here; the linear stage's gravity estimate
enters through the initial orientation of frame 0 and the solver adjusts
orientations rather than gravity.

All residuals are whitened at construction; the solver's cost is the summed
squared whitened residual. Evaluation is pure: a Problem may be shared
between threads, but only one solver may mutate its values at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

from .cloud import RegionGrid, SampledSet
from .geometry import (GRAVITY_MAGNITUDE, RigidTransform, Rotation3,
                       NonPositiveDepth, project_points, rotmat_exp, rotmat_log,
                       skew, so3_left_jacobian_inv, so3_right_jacobian,
                       so3_right_jacobian_inv, gravity_align)
from .imu import Biases, ImuPreintegration, correct_for_bias
from .linear_init import LinearInitState


class DivergedNaN(RuntimeError):
    """Optimization produced a non-finite cost at the current values."""


SOFTPLUS_EPS = 1e-5


def softplus_scale(s_tilde, eps: float = SOFTPLUS_EPS):
    """Realized scale eps + log(1 + exp(s_tilde)); strictly above eps."""
    return eps + np.logaddexp(0.0, s_tilde)


def softplus_scale_inv(s, eps: float = SOFTPLUS_EPS):
    """Inverse of softplus_scale for s > eps; stable for large s."""
    x = np.asarray(s, dtype=float) - eps
    if np.any(x <= 0):
        raise ValueError(f"scale must exceed eps={eps}")
    return x + np.log1p(-np.exp(-x))


def softplus_deriv(s_tilde):
    """d(realized)/d(s_tilde) = sigmoid(s_tilde)."""
    return expit(np.asarray(s_tilde, dtype=float))


@dataclass(frozen=True)
class ImuState:
    """Per-frame 15-dimensional state; rotation is body-to-world."""

    rotation: Rotation3
    position: np.ndarray
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    def retract(self, d: np.ndarray) -> "ImuState":
        """Apply a 15-vector tangent step [dtheta, dp, dv, dbg, dba]."""
        return ImuState(
            Rotation3(self.rotation.matrix @ rotmat_exp(d[0:3])),
            self.position + d[3:6],
            self.velocity + d[6:9],
            self.gyro_bias + d[9:12],
            self.accel_bias + d[12:15])

    def biases(self) -> Biases:
        return Biases(self.gyro_bias, self.accel_bias)


@dataclass
class ScaleField:
    """Per-region softplus-parameterized scales over a region grid."""

    s_tilde: np.ndarray
    grid: RegionGrid
    eps: float = SOFTPLUS_EPS

    @classmethod
    def from_scale(cls, s: float, grid: RegionGrid, eps: float = SOFTPLUS_EPS) -> "ScaleField":
        st = float(softplus_scale_inv(s, eps))
        return cls(np.full(grid.num_regions, st), grid, eps)

    def values(self) -> np.ndarray:
        return softplus_scale(self.s_tilde, self.eps)

    def derivs(self) -> np.ndarray:
        return softplus_deriv(self.s_tilde)

    @property
    def num_regions(self) -> int:
        return self.s_tilde.shape[0]


@dataclass(frozen=True)
class PriorConfig:
    """Standard deviations anchoring frame 0 (position, yaw) and its biases.

    Roll/pitch are observable through gravity and velocity through the IMU,
    so only the four gauge freedoms plus biases are constrained.
    """

    sigma_position: float = 1e-3
    sigma_yaw: float = 1e-3
    sigma_gyro_bias: float = 0.02
    sigma_accel_bias: float = 0.2

    def __post_init__(self):
        if min(self.sigma_position, self.sigma_yaw,
               self.sigma_gyro_bias, self.sigma_accel_bias) <= 0:
            raise ValueError("prior sigmas must be positive")


@dataclass(frozen=True)
class RefineNoise:
    """Residual standard deviations (whitening) for the visual/scale terms."""

    reproj_sigma: float = 1.0 / 450.0   # normalized units; 1 px at f=450
    cloud_sigma0: float = 0.05          # anchor sigma at confidence 1, cloud units
    smooth_sigma: float = 0.05
    cov_floor: float = 1e-12            # added to IMU covariances before whitening


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    cost_tolerance: float = 1e-10       # relative decrease per accepted step
    step_tolerance: float = 1e-10


@dataclass
class Problem:
    """A refinement problem: variables plus whitened residual blocks."""

    variant: str
    states: list[ImuState]
    features: np.ndarray | None
    scales: ScaleField | None
    blocks: list
    t_cam_imu: RigidTransform
    gravity: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def dim(self) -> int:
        d = 15 * self.n_states
        if self.features is not None:
            d += 3 * self.features.shape[0]
        if self.scales is not None:
            d += self.scales.num_regions
        return d

    def column_of(self, key) -> slice:
        kind = key[0]
        if kind == "state":
            return slice(15 * key[1], 15 * key[1] + 15)
        base = 15 * self.n_states
        if kind == "feature":
            return slice(base + 3 * key[1], base + 3 * key[1] + 3)
        if kind == "scales":
            if self.features is not None:
                base += 3 * self.features.shape[0]
            return slice(base, base + self.scales.num_regions)
        raise KeyError(key)

    def snapshot(self):
        return (list(self.states),
                None if self.features is None else self.features.copy(),
                None if self.scales is None else self.scales.s_tilde.copy())

    def restore(self, snap) -> None:
        states, features, s_tilde = snap
        self.states = list(states)
        if features is not None:
            self.features = features.copy()
        if s_tilde is not None:
            self.scales.s_tilde = s_tilde.copy()

    def apply_delta(self, dx: np.ndarray) -> None:
        for i in range(self.n_states):
            self.states[i] = self.states[i].retract(dx[15 * i:15 * i + 15])
        if self.features is not None:
            sl = self.column_of(("feature", 0))
            m = self.features.shape[0]
            self.features = self.features + dx[sl.start:sl.start + 3 * m].reshape(m, 3)
        if self.scales is not None:
            self.scales.s_tilde = self.scales.s_tilde + dx[self.column_of(("scales",))]


def _whitener_from_cov(cov: np.ndarray):
    chol = scipy.linalg.cholesky(cov, lower=True)

    def whiten(x):
        return scipy.linalg.solve_triangular(chol, x, lower=True)

    return whiten


class ImuResidualBlock:
    """15-dim preintegration + bias random-walk residual between frames i, j."""

    def __init__(self, i: int, j: int, preint: ImuPreintegration,
                 noise_walk: tuple[float, float], gravity: np.ndarray,
                 cov_floor: float = 1e-12):
        self.i = i
        self.j = j
        self.preint = preint
        self.gravity = gravity
        gw, aw = noise_walk
        cov = np.zeros((15, 15))
        cov[:9, :9] = preint.covariance
        cov[9:12, 9:12] = (gw ** 2 * preint.dt) * np.eye(3)
        cov[12:15, 12:15] = (aw ** 2 * preint.dt) * np.eye(3)
        cov += cov_floor * np.eye(15)
        self._whiten = _whitener_from_cov(cov)

    @property
    def dim(self) -> int:
        return 15

    def _raw(self, problem: Problem):
        si = problem.states[self.i]
        sj = problem.states[self.j]
        pre = correct_for_bias(self.preint, si.biases())
        ri = si.rotation.matrix
        dt = pre.dt
        g = self.gravity
        e = np.empty(15)
        e_rot_mat = pre.delta_rot.matrix.T @ ri.T @ sj.rotation.matrix
        e[0:3] = rotmat_log(e_rot_mat)
        e[3:6] = ri.T @ (sj.velocity - si.velocity + g * dt) - pre.delta_vel
        e[6:9] = ri.T @ (sj.position - si.position - si.velocity * dt
                         + 0.5 * g * dt * dt) - pre.delta_pos
        e[9:12] = sj.gyro_bias - si.gyro_bias
        e[12:15] = sj.accel_bias - si.accel_bias
        return e, pre

    def residual(self, problem: Problem) -> np.ndarray:
        e, _ = self._raw(problem)
        return self._whiten(e)

    def jacobians(self, problem: Problem):
        si = problem.states[self.i]
        sj = problem.states[self.j]
        e, pre = self._raw(problem)
        ri = si.rotation.matrix
        rj = sj.rotation.matrix
        dt = pre.dt
        g = self.gravity
        phi = e[0:3]
        jr_inv = so3_right_jacobian_inv(phi)
        jl_inv = so3_left_jacobian_inv(phi)
        jb = self.preint.bias_jacobian
        dbg = si.gyro_bias - self.preint.biases.gyro
        jr_b = so3_right_jacobian(jb[0:3, 0:3] @ dbg)

        ji = np.zeros((15, 15))
        jj = np.zeros((15, 15))
        ji[0:3, 0:3] = -jr_inv @ (rj.T @ ri)
        ji[0:3, 9:12] = -jl_inv @ jr_b @ jb[0:3, 0:3]
        ji[3:6, 0:3] = skew(ri.T @ (sj.velocity - si.velocity + g * dt))
        ji[3:6, 6:9] = -ri.T
        ji[3:6, 9:12] = -jb[3:6, 0:3]
        ji[3:6, 12:15] = -jb[3:6, 3:6]
        ji[6:9, 0:3] = skew(ri.T @ (sj.position - si.position - si.velocity * dt
                                    + 0.5 * g * dt * dt))
        ji[6:9, 3:6] = -ri.T
        ji[6:9, 6:9] = -ri.T * dt
        ji[6:9, 9:12] = -jb[6:9, 0:3]
        ji[6:9, 12:15] = -jb[6:9, 3:6]
        ji[9:12, 9:12] = -np.eye(3)
        ji[12:15, 12:15] = -np.eye(3)

        jj[0:3, 0:3] = jr_inv
        jj[3:6, 6:9] = ri.T
        jj[6:9, 3:6] = ri.T
        jj[9:12, 9:12] = np.eye(3)
        jj[12:15, 12:15] = np.eye(3)

        r = self._whiten(e)
        return r, [(("state", self.i), self._whiten(ji)),
                   (("state", self.j), self._whiten(jj))]


class FrameCloudReprojBlock:
    """Feature-free reprojection of one frame's sampled cloud points through
    the chain camera <- body_i <- world <- body_0 <- reference camera, scaled.

    Vectorized over the frame's points; residual dimension 2 * n_points.
    Frame 0 carries no information in this parameterization (the projection of
    s * pbar is scale-invariant) and must not be given a block.
    """

    def __init__(self, i: int, bearings: np.ndarray, points: np.ndarray,
                 regions: np.ndarray, sigma: float):
        if i == 0:
            raise ValueError("frame 0 reprojection is constant in this variant")
        self.i = i
        self.z = np.asarray(bearings, dtype=float)
        self.pbar = np.asarray(points, dtype=float)
        self.regions = np.asarray(regions, dtype=int)
        self.inv_sigma = 1.0 / sigma

    @property
    def dim(self) -> int:
        return 2 * self.z.shape[0]

    def _chain(self, problem: Problem):
        s0 = problem.states[0]
        si = problem.states[self.i]
        scales = problem.scales.values()[self.regions]
        r_ic = problem.t_cam_imu.rotation.matrix.T
        t_ic = -r_ic @ problem.t_cam_imu.translation
        p_i0 = scales[:, None] * (self.pbar @ r_ic.T) + t_ic
        p_w = p_i0 @ s0.rotation.matrix.T + s0.position
        l_i = (p_w - si.position) @ si.rotation.matrix
        p_c = l_i @ problem.t_cam_imu.rotation.matrix.T + problem.t_cam_imu.translation
        return p_i0, l_i, p_c

    def residual(self, problem: Problem) -> np.ndarray:
        _, _, p_c = self._chain(problem)
        uv, ok = project_points(p_c)
        if not np.all(ok):
            raise NonPositiveDepth(f"{np.count_nonzero(~ok)} points behind camera "
                                   f"in frame {self.i}")
        return (self.z - uv).reshape(-1) * self.inv_sigma

    def jacobians(self, problem: Problem):
        s0 = problem.states[0]
        si = problem.states[self.i]
        p_i0, l_i, p_c = self._chain(problem)
        uv, ok = project_points(p_c)
        if not np.all(ok):
            raise NonPositiveDepth(f"{np.count_nonzero(~ok)} points behind camera "
                                   f"in frame {self.i}")
        n = self.z.shape[0]
        r = (self.z - uv).reshape(-1) * self.inv_sigma

        inv_z = 1.0 / p_c[:, 2]
        jpi = np.zeros((n, 2, 3))
        jpi[:, 0, 0] = inv_z
        jpi[:, 1, 1] = inv_z
        jpi[:, 0, 2] = -p_c[:, 0] * inv_z * inv_z
        jpi[:, 1, 2] = -p_c[:, 1] * inv_z * inv_z
        m = -self.inv_sigma * jpi                      # d r / d p_c, (n, 2, 3)

        r_ci = problem.t_cam_imu.rotation.matrix
        ri = si.rotation.matrix
        r0 = s0.rotation.matrix
        r_ic = r_ci.T
        a = r_ci @ ri.T                                # d p_c / d p_w

        def stack_skew(v):
            out = np.zeros((v.shape[0], 3, 3))
            out[:, 0, 1] = -v[:, 2]
            out[:, 0, 2] = v[:, 1]
            out[:, 1, 0] = v[:, 2]
            out[:, 1, 2] = -v[:, 0]
            out[:, 2, 0] = -v[:, 1]
            out[:, 2, 1] = v[:, 0]
            return out

        ji = np.zeros((2 * n, 15))
        # d p_c / d dtheta_i = R_ci [l_i]x ; d p_c / d dp_i = -R_ci Ri^T
        ji_theta = np.einsum("nab,nbc->nac", m, np.einsum("ab,nbc->nac",
                                                          r_ci, stack_skew(l_i)))
        ji[:, 0:3] = ji_theta.reshape(2 * n, 3)
        ji[:, 3:6] = np.einsum("nab,bc->nac", m, -a).reshape(2 * n, 3)

        j0 = np.zeros((2 * n, 15))
        # d p_w / d dtheta_0 = -R0 [p_i0]x ; d p_w / d dp_0 = I
        j0_theta = np.einsum("nab,nbc->nac", m,
                             np.einsum("ab,nbc->nac", a @ (-r0), stack_skew(p_i0)))
        j0[:, 0:3] = j0_theta.reshape(2 * n, 3)
        j0[:, 3:6] = np.einsum("nab,bc->nac", m, a).reshape(2 * n, 3)

        # d p_c / d s_tilde_region = A R0 R_ic pbar * sigmoid
        deriv = problem.scales.derivs()[self.regions]
        dir_vec = (self.pbar @ (a @ r0 @ r_ic).T) * deriv[:, None]
        ds = np.einsum("nab,nb->na", m, dir_vec)       # (n, 2)
        js = np.zeros((2 * n, problem.scales.num_regions))
        rows = np.arange(n)
        js[2 * rows, self.regions] = ds[:, 0]
        js[2 * rows + 1, self.regions] = ds[:, 1]

        return r, [(("state", self.i), ji), (("state", 0), j0), (("scales",), js)]


class FeatureReprojBlock:
    """Classical 2-dim reprojection of feature m observed in frame i."""

    def __init__(self, i: int, m: int, z: np.ndarray, sigma: float):
        self.i = i
        self.m = m
        self.z = np.asarray(z, dtype=float)
        self.inv_sigma = 1.0 / sigma

    @property
    def dim(self) -> int:
        return 2

    def _point(self, problem: Problem):
        si = problem.states[self.i]
        local = si.rotation.matrix.T @ (problem.features[self.m] - si.position)
        return local, problem.t_cam_imu.apply(local)

    def residual(self, problem: Problem) -> np.ndarray:
        _, p_c = self._point(problem)
        if p_c[2] <= 1e-4:
            raise NonPositiveDepth(f"feature {self.m} behind camera {self.i}")
        return (self.z - p_c[:2] / p_c[2]) * self.inv_sigma

    def jacobians(self, problem: Problem):
        si = problem.states[self.i]
        local, p_c = self._point(problem)
        if p_c[2] <= 1e-4:
            raise NonPositiveDepth(f"feature {self.m} behind camera {self.i}")
        r = (self.z - p_c[:2] / p_c[2]) * self.inv_sigma
        inv_z = 1.0 / p_c[2]
        jpi = np.array([[inv_z, 0.0, -p_c[0] * inv_z * inv_z],
                        [0.0, inv_z, -p_c[1] * inv_z * inv_z]])
        m = -self.inv_sigma * jpi
        r_ci = problem.t_cam_imu.rotation.matrix
        a = r_ci @ si.rotation.matrix.T
        ji = np.zeros((2, 15))
        ji[:, 0:3] = m @ (r_ci @ skew(local))
        ji[:, 3:6] = m @ (-a)
        jf = m @ a
        return r, [(("state", self.i), ji), (("feature", self.m), jf)]


class CloudAnchorBlock:
    """3D anchor tying feature m to the cloud point via the region scale.

    r = p_f - (s * R_wc0 pbar + p_wc0). With `t_world_cam0` given, the
    reference-camera pose is a fixed constant from the linearization point and
    the anchor connects only the feature and the scale; without it the pose is
    derived from the frame-0 state, so the lifted cloud follows frame 0 during
    refinement. Whitened by sqrt(confidence) / sigma0.
    """

    def __init__(self, m: int, pbar: np.ndarray, region: int,
                 confidence: float, sigma0: float,
                 t_world_cam0: RigidTransform | None = None):
        self.m = m
        self.pbar = np.asarray(pbar, dtype=float)
        self.region = int(region)
        self.inv_sigma = math.sqrt(max(confidence, 1.0)) / sigma0
        self.fixed_pose = t_world_cam0

    @property
    def dim(self) -> int:
        return 3

    def _pose(self, problem: Problem) -> RigidTransform:
        if self.fixed_pose is not None:
            return self.fixed_pose
        s0 = problem.states[0]
        return RigidTransform(s0.rotation, s0.position) @ problem.t_cam_imu.inverse()

    def residual(self, problem: Problem) -> np.ndarray:
        s = problem.scales.values()[self.region]
        pose = self._pose(problem)
        return (problem.features[self.m]
                - (s * pose.rotation.apply(self.pbar) + pose.translation)) * self.inv_sigma

    def jacobians(self, problem: Problem):
        r = self.residual(problem)
        s = problem.scales.values()[self.region]
        pose = self._pose(problem)
        lifted_dir = pose.rotation.apply(self.pbar)
        jf = self.inv_sigma * np.eye(3)
        js = np.zeros((3, problem.scales.num_regions))
        js[:, self.region] = -self.inv_sigma * lifted_dir \
            * problem.scales.derivs()[self.region]
        pairs = [(("feature", self.m), jf), (("scales",), js)]
        if self.fixed_pose is None:
            # pose follows state 0: w = s R_ic pbar + t_ic in the body frame
            s0 = problem.states[0]
            r_ic = problem.t_cam_imu.rotation.matrix.T
            t_ic = -r_ic @ problem.t_cam_imu.translation
            w = s * (r_ic @ self.pbar) + t_ic
            j0 = np.zeros((3, 15))
            j0[:, 0:3] = self.inv_sigma * (s0.rotation.matrix @ skew(w))
            j0[:, 3:6] = -self.inv_sigma * np.eye(3)
            pairs.insert(0, (("state", 0), j0))
        return r, pairs


class SmoothnessBlock:
    """Difference of realized scales of two adjacent regions."""

    def __init__(self, j: int, l: int, grid: RegionGrid, sigma: float):
        if (min(j, l), max(j, l)) not in {(min(a, b), max(a, b))
                                          for a, b in grid.adjacency}:
            raise ValueError(f"regions {j} and {l} are not adjacent")
        self.j = j
        self.l = l
        self.inv_sigma = 1.0 / sigma

    @property
    def dim(self) -> int:
        return 1

    def residual(self, problem: Problem) -> np.ndarray:
        s = problem.scales.values()
        return np.array([(s[self.j] - s[self.l]) * self.inv_sigma])

    def jacobians(self, problem: Problem):
        r = self.residual(problem)
        d = problem.scales.derivs()
        js = np.zeros((1, problem.scales.num_regions))
        js[0, self.j] = d[self.j] * self.inv_sigma
        js[0, self.l] = -d[self.l] * self.inv_sigma
        return r, [(("scales",), js)]


class PriorBlock:
    """Anchors frame-0 position, yaw, and biases at the linearization point."""

    is_prior = True

    def __init__(self, lin_point: ImuState, cfg: PriorConfig):
        self.lin = lin_point
        self.cfg = cfg

    @property
    def dim(self) -> int:
        return 10

    def residual(self, problem: Problem) -> np.ndarray:
        s0 = problem.states[0]
        phi = rotmat_log(s0.rotation.matrix @ self.lin.rotation.matrix.T)
        c = self.cfg
        return np.concatenate([
            (s0.position - self.lin.position) / c.sigma_position,
            [phi[2] / c.sigma_yaw],
            (s0.gyro_bias - self.lin.gyro_bias) / c.sigma_gyro_bias,
            (s0.accel_bias - self.lin.accel_bias) / c.sigma_accel_bias])

    def jacobians(self, problem: Problem):
        s0 = problem.states[0]
        r = self.residual(problem)
        phi = rotmat_log(s0.rotation.matrix @ self.lin.rotation.matrix.T)
        c = self.cfg
        j = np.zeros((10, 15))
        j[0:3, 3:6] = np.eye(3) / c.sigma_position
        # phi is the world-frame error; d phi / d dtheta = Jl^-1(phi) R0
        j[3, 0:3] = (so3_left_jacobian_inv(phi) @ s0.rotation.matrix)[2] / c.sigma_yaw
        j[4:7, 9:12] = np.eye(3) / c.sigma_gyro_bias
        j[7:10, 12:15] = np.eye(3) / c.sigma_accel_bias
        return r, [(("state", 0), j)]


# ---------------------------------------------------------------------------
# Assembly and the LM solver
# ---------------------------------------------------------------------------

def assemble(problem: Problem, with_jacobian: bool = True,
             include_prior: bool = True):
    """Stack all (whitened) block residuals; optionally the dense Jacobian."""
    blocks = [b for b in problem.blocks
              if include_prior or not getattr(b, "is_prior", False)]
    rows = sum(b.dim for b in blocks)
    r = np.empty(rows)
    jac = np.zeros((rows, problem.dim)) if with_jacobian else None
    off = 0
    for b in blocks:
        if with_jacobian:
            rb, pairs = b.jacobians(problem)
            for key, jblock in pairs:
                jac[off:off + b.dim, problem.column_of(key)] += jblock
        else:
            rb = b.residual(problem)
        r[off:off + b.dim] = rb
        off += b.dim
    return (r, jac) if with_jacobian else r


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class RefineResult:
    states: list[ImuState]
    features: np.ndarray | None
    scales: ScaleField | None
    cost: float
    iterations: list[IterationRecord]
    converged: bool
    status: str
    covariance: np.ndarray | None
    covariance_ok: bool
    final_residual: np.ndarray
    residual_dim: int
    variable_dim: int


def _cost_at(problem: Problem) -> float:
    try:
        r = assemble(problem, with_jacobian=False)
    except (NonPositiveDepth, ValueError, FloatingPointError):
        # points behind the camera or non-finite values: unusable step
        return math.inf
    c = float(r @ r)
    return c if np.isfinite(c) else math.inf


def solve_lm(problem: Problem, cfg: SolverConfig = SolverConfig()) -> RefineResult:
    """Levenberg-Marquardt on the manifold; accepted steps strictly decrease cost.

    Terminates on relative cost decrease, step norm, or max iterations
    (returning best-so-far values with converged=False). Afterwards the
    undamped information matrix is inverted for covariance recovery; failure
    there is reported, not raised.
    """
    cost = _cost_at(problem)
    if not np.isfinite(cost):
        raise DivergedNaN("non-finite cost at the initial values")
    lam = cfg.damping_init
    log: list[IterationRecord] = []
    converged = False
    status = "max_iterations"
    r, jac = assemble(problem)
    h = jac.T @ jac
    grad = jac.T @ r
    it = 0
    while it < cfg.max_iterations:
        it += 1
        d = np.maximum(np.diag(h), 1e-12)
        try:
            delta = np.linalg.solve(h + lam * np.diag(d), -grad)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            lam *= cfg.damping_up
            log.append(IterationRecord(it, cost, lam, math.nan, False))
            if lam > 1e16:
                status = "stalled"
                break
            continue
        step_norm = float(np.linalg.norm(delta))
        if step_norm <= cfg.step_tolerance:
            log.append(IterationRecord(it, cost, lam, step_norm, False))
            converged = True
            status = "converged"
            break
        snap = problem.snapshot()
        problem.apply_delta(delta)
        new_cost = _cost_at(problem)
        if new_cost < cost:
            decrease = cost - new_cost
            cost = new_cost
            lam = max(lam * cfg.damping_down, 1e-15)
            log.append(IterationRecord(it, cost, lam, step_norm, True))
            if decrease <= cfg.cost_tolerance * max(cost, 1e-300):
                converged = True
                status = "converged"
                break
            r, jac = assemble(problem)
            h = jac.T @ jac
            grad = jac.T @ r
        else:
            problem.restore(snap)
            lam *= cfg.damping_up
            log.append(IterationRecord(it, cost, lam, step_norm, False))
            if lam > 1e16:
                status = "stalled"
                break

    r, jac = assemble(problem)
    h = jac.T @ jac
    cov = None
    cov_ok = False
    try:
        cho = scipy.linalg.cho_factor(h)
        cov = scipy.linalg.cho_solve(cho, np.eye(problem.dim))
        cov_ok = bool(np.all(np.isfinite(cov)) and np.linalg.cond(h) < 1e14)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        cov_ok = False
    return RefineResult(
        states=list(problem.states),
        features=None if problem.features is None else problem.features.copy(),
        scales=problem.scales,
        cost=cost, iterations=log, converged=converged, status=status,
        covariance=cov, covariance_ok=cov_ok, final_residual=r,
        residual_dim=r.shape[0], variable_dim=problem.dim)


def check_jacobians(problem: Problem, perturbation: float = 1e-6,
                    tol: float = 1e-5) -> list[tuple[str, float]]:
    """Central finite differences on every block at the current values.

    Returns (label, max relative error) per block; the relative error
    denominator is the larger of the analytic and numeric magnitudes, so a
    flipped sign reports an error of about 2.
    """
    out = []
    for bi, block in enumerate(problem.blocks):
        _, pairs = block.jacobians(problem)
        worst = 0.0
        for key, j_analytic in pairs:
            cols = j_analytic.shape[1]
            j_num = np.zeros_like(j_analytic)
            sl = problem.column_of(key)
            for c in range(cols):
                dx = np.zeros(problem.dim)
                snap = problem.snapshot()
                dx[sl.start + c] = perturbation
                problem.apply_delta(dx)
                r_plus = block.residual(problem)
                problem.restore(snap)
                dx[sl.start + c] = -perturbation
                problem.apply_delta(dx)
                r_minus = block.residual(problem)
                problem.restore(snap)
                j_num[:, c] = (r_plus - r_minus) / (2 * perturbation)
            denom = max(float(np.max(np.abs(j_analytic))),
                        float(np.max(np.abs(j_num))), 1e-6)
            err = float(np.max(np.abs(j_analytic - j_num))) / denom
            worst = max(worst, err)
        out.append((f"{type(block).__name__}[{bi}]", worst))
    return out


# ---------------------------------------------------------------------------
# Problem builders
# ---------------------------------------------------------------------------

def states_from_linear(lin: LinearInitState, preints_to0: list[ImuPreintegration],
                       g_mag: float = GRAVITY_MAGNITUDE) -> list[ImuState]:
    """Initial trajectory: gravity-align frame 0, then propagate the deltas.

    The world origin is placed at frame 0 and yaw is fixed by the alignment's
    Gram-Schmidt convention; the linear velocity estimate seeds frame 0.
    """
    r0 = gravity_align(lin.gravity).matrix
    g = np.array([0.0, 0.0, g_mag])
    v0 = r0 @ lin.velocity
    zero = np.zeros(3)
    states = []
    for pre in preints_to0:
        dt = pre.dt
        states.append(ImuState(
            Rotation3(r0 @ pre.delta_rot.matrix),
            v0 * dt - 0.5 * g * dt * dt + r0 @ pre.delta_pos,
            v0 - g * dt + r0 @ pre.delta_vel,
            zero.copy(), zero.copy()))
    return states


def _imu_blocks(preints_pairs, walk, gravity, cov_floor):
    return [ImuResidualBlock(i, i + 1, pre, walk, gravity, cov_floor)
            for i, pre in enumerate(preints_pairs)]


def _smooth_blocks(scales: ScaleField, sigma: float):
    return [SmoothnessBlock(j, l, scales.grid, sigma)
            for j, l in scales.grid.adjacency]


def build_feature_free_problem(states: list[ImuState], scales: ScaleField,
                               preints_pairs: list[ImuPreintegration],
                               sampled: SampledSet, t_cam_imu: RigidTransform,
                               noise: RefineNoise = RefineNoise(),
                               prior: PriorConfig | None = PriorConfig(),
                               walk: tuple[float, float] = (0.0, 0.0),
                               gravity_mag: float = GRAVITY_MAGNITUDE,
                               inlier_mask: np.ndarray | None = None) -> Problem:
    """Feature-free problem: 15N states + one scale per region.

    inlier_mask (flattened frame-major blocks, as produced by the robust
    linear stage) restricts which samples contribute; frame 0 contributes no
    reprojection rows by construction.
    """
    gravity = np.array([0.0, 0.0, gravity_mag])
    n, k = sampled.conf.shape
    mask = np.ones((n, k), dtype=bool) if inlier_mask is None \
        else np.asarray(inlier_mask, dtype=bool).reshape(n, k)
    problem = Problem("ff", list(states), None, scales, [], t_cam_imu, gravity)
    blocks: list = []
    if prior is not None:
        blocks.append(PriorBlock(states[0], prior))
    blocks += _imu_blocks(preints_pairs, walk, gravity, noise.cov_floor)
    for i in range(1, n):
        sel = mask[i]
        if not np.any(sel):
            continue
        blocks.append(FrameCloudReprojBlock(
            i, sampled.bearings[i, sel], sampled.points[i, sel],
            sampled.region[i, sel], noise.reproj_sigma))
    blocks += _smooth_blocks(scales, noise.smooth_sigma)
    problem.blocks = blocks
    return problem


def build_feature_based_problem(states: list[ImuState], features: np.ndarray,
                                obs_frames, obs_features, obs_uv,
                                preints_pairs: list[ImuPreintegration],
                                t_cam_imu: RigidTransform,
                                noise: RefineNoise = RefineNoise(),
                                prior: PriorConfig | None = PriorConfig(),
                                walk: tuple[float, float] = (0.0, 0.0),
                                gravity_mag: float = GRAVITY_MAGNITUDE) -> Problem:
    """Classical bundle adjustment: 15N states + 3M features."""
    gravity = np.array([0.0, 0.0, gravity_mag])
    problem = Problem("fb", list(states), np.array(features, dtype=float), None,
                      [], t_cam_imu, gravity)
    blocks: list = []
    if prior is not None:
        blocks.append(PriorBlock(states[0], prior))
    blocks += _imu_blocks(preints_pairs, walk, gravity, noise.cov_floor)
    for i, m, uv in zip(obs_frames, obs_features, obs_uv):
        blocks.append(FeatureReprojBlock(int(i), int(m), uv, noise.reproj_sigma))
    problem.blocks = blocks
    return problem


def build_scale_constrained_problem(states: list[ImuState], features: np.ndarray,
                                    scales: ScaleField,
                                    obs_frames, obs_features, obs_uv,
                                    anchors: list[tuple[int, np.ndarray, int, float]],
                                    preints_pairs: list[ImuPreintegration],
                                    t_cam_imu: RigidTransform,
                                    noise: RefineNoise = RefineNoise(),
                                    prior: PriorConfig | None = PriorConfig(),
                                    walk: tuple[float, float] = (0.0, 0.0),
                                    gravity_mag: float = GRAVITY_MAGNITUDE,
                                    anchor_to_state: bool = True) -> Problem:
    """Scale-constrained problem: feature-based plus cloud anchor residuals.

    anchors: per entry (feature index, cloud point in the reference camera
    frame, region id, confidence); typically one per (frame, feature)
    interpolation of the predicted cloud. With anchor_to_state the lifted
    cloud rides on the frame-0 state (gauge-consistent with the other
    variants); otherwise it is frozen at the initial frame-0 camera pose.
    """
    gravity = np.array([0.0, 0.0, gravity_mag])
    problem = Problem("sc", list(states), np.array(features, dtype=float), scales,
                      [], t_cam_imu, gravity)
    t_world_cam0 = None if anchor_to_state else \
        RigidTransform(states[0].rotation, states[0].position) @ t_cam_imu.inverse()
    blocks: list = []
    if prior is not None:
        blocks.append(PriorBlock(states[0], prior))
    blocks += _imu_blocks(preints_pairs, walk, gravity, noise.cov_floor)
    for i, m, uv in zip(obs_frames, obs_features, obs_uv):
        blocks.append(FeatureReprojBlock(int(i), int(m), uv, noise.reproj_sigma))
    for m, pbar, region, conf in anchors:
        blocks.append(CloudAnchorBlock(int(m), pbar, region, conf,
                                       noise.cloud_sigma0, t_world_cam0))
    blocks += _smooth_blocks(scales, noise.smooth_sigma)
    problem.blocks = blocks
    return problem
