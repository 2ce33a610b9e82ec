"""Closed-form initialization from up-to-scale clouds and IMU preintegration.

Every sampled point k of keyframe i contributes one 2-row block to a linear
system in the 7-vector x = [s, v0, g] (scale, initial velocity, gravity, all
in the first IMU frame):

    P = [[1, 0, -u], [0, 1, -v]]            (u, v normalized bearing)
    H = P R_cam_imu R_0i^T                  (R_0i: frame-i body to frame-0 body)
    A_block = [ H (R_imu_cam pbar) | -dt_i H | dt_i^2/2 H ]
    b_block = H (dp_0i - R_0i R_imu_cam t_cam_imu + R_imu_cam t_cam_imu)

with dp_0i / dt_i the preintegrated position/time from frame 0 to frame i and
pbar the predicted point in the reference camera frame. The system is solved
as weighted least squares under the quadratic constraint |g| = 9.81 via a
one-dimensional secular equation in the Lagrange multiplier.

The feature-based baseline keeps M feature positions in the state
([p_f1..p_fM, v0, g], dimension 3M + 6) and shares the same constrained
solver. Both paths, RANSAC included, are pure functions of their inputs and
an explicit seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cloud import SampledSet
from .geometry import GRAVITY_MAGNITUDE, RigidTransform
from .imu import ImuPreintegration


class FewerThanThreeFrames(ValueError):
    """The closed form needs >= 3 keyframes to be observable."""


class RankDeficient(ValueError):
    """Numerical rank below the state dimension; system unsolvable."""


class RootFindFailed(RuntimeError):
    """Lagrange-multiplier root find could not bracket/converge."""


class NoValidHypothesis(RuntimeError):
    """RANSAC produced no solvable hypothesis within its iteration budget."""


@dataclass(frozen=True)
class LinearInitState:
    """Closed-form estimate: scale, initial velocity, gravity (first IMU frame)."""

    scale: float
    velocity: np.ndarray
    gravity: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.velocity, self.gravity])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "LinearInitState":
        return cls(float(x[0]), x[1:4].copy(), x[4:7].copy())


@dataclass
class LinearSystem:
    """Stacked 2-row measurement blocks with per-block weights and provenance."""

    a: np.ndarray          # (2m, 7)
    b: np.ndarray          # (2m,)
    weights: np.ndarray    # (m,) positive, applied to the squared block residual
    frames: np.ndarray     # (m,) keyframe index of each block
    samples: np.ndarray    # (m,) sample index within the keyframe

    @property
    def num_blocks(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 50
    threshold: float = 0.01
    min_points_per_frame: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class RankReport:
    rank: int
    cond: float
    singular_values: np.ndarray


def confidence_weights(conf: np.ndarray, cap: float = 100.0,
                       power: float = 1.0) -> np.ndarray:
    """Block weights from confidence: min(c, cap)**power.

    The weights multiply the squared block residual. power = 1 is
    information-consistent with point noise scaling as 1/sqrt(c) (weight =
    inverse variance) and measurably outperforms the softer power = 1/2 on
    simulated data; both are exposed because real predictors need not follow
    that noise law. Weights suppress, never zero.
    """
    return np.minimum(np.asarray(conf, dtype=float), cap) ** power


def build_feature_free_system(sampled: SampledSet,
                              preints: list[ImuPreintegration],
                              t_cam_imu: RigidTransform,
                              conf_cap: float = 100.0,
                              conf_power: float = 1.0,
                              require_observable: bool = True) -> LinearSystem:
    """Assemble the 2KN x 7 system from sampled cloud points.

    preints[i] must span keyframe 0 -> keyframe i (preints[0] is the identity).
    With require_observable the builder insists on >= 3 keyframes, the
    observability boundary of the formulation; diagnostics may disable that to
    inspect under-determined systems.
    """
    n = sampled.n_frames
    if len(preints) != n:
        raise ValueError("need one composed preintegration per keyframe")
    if require_observable and n < 3:
        raise FewerThanThreeFrames(f"{n} keyframes; need at least 3")

    r_ci = t_cam_imu.rotation.matrix
    t_ci = t_cam_imu.translation
    r_ic = r_ci.T
    lever = r_ic @ t_ci
    k = sampled.k

    blocks_a = []
    blocks_b = []
    for i in range(n):
        r_0i = preints[i].delta_rot.matrix
        dt = preints[i].dt
        dp = preints[i].delta_pos
        m = r_ci @ r_0i.T
        u = sampled.bearings[i, :, 0]
        v = sampled.bearings[i, :, 1]
        # H rows: m[0] - u*m[2] and m[1] - v*m[2], per sample -> (K, 2, 3)
        h = np.empty((k, 2, 3))
        h[:, 0, :] = m[0][None, :] - u[:, None] * m[2][None, :]
        h[:, 1, :] = m[1][None, :] - v[:, None] * m[2][None, :]
        p_imu = sampled.points[i] @ r_ic.T                       # (K, 3)
        col_s = np.einsum("kij,kj->ki", h, p_imu)                # (K, 2)
        a = np.concatenate([col_s[:, :, None], -dt * h, 0.5 * dt * dt * h], axis=2)
        rhs_vec = dp - r_0i @ lever + lever
        b = h @ rhs_vec                                          # (K, 2)
        blocks_a.append(a.reshape(2 * k, 7))
        blocks_b.append(b.reshape(2 * k))

    frames = np.repeat(np.arange(n), k)
    samples = np.tile(np.arange(k), n)
    weights = confidence_weights(sampled.conf.reshape(-1), conf_cap, conf_power)
    return LinearSystem(np.vstack(blocks_a), np.concatenate(blocks_b),
                        weights, frames, samples)


def _row_weights(system_weights: np.ndarray) -> np.ndarray:
    return np.repeat(np.sqrt(system_weights), 2)


def rank_diagnostics(system: LinearSystem, tol: float = 1e-8) -> RankReport:
    """SVD rank of the weighted system matrix, relative tolerance tol*sigma_max."""
    aw = system.a * _row_weights(system.weights)[:, None]
    sv = np.linalg.svd(aw, compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.count_nonzero(sv > tol * smax)) if smax > 0 else 0
    cond = float(smax / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
    return RankReport(rank, cond, sv)


def solve_gravity_constrained(a: np.ndarray, b: np.ndarray,
                              weights: np.ndarray | None = None,
                              g_mag: float = GRAVITY_MAGNITUDE,
                              rank_tol: float = 1e-8,
                              constraint_rtol: float = 1e-9) -> tuple[np.ndarray, dict]:
    """Weighted least squares min |A x - b|_W^2 s.t. |x[-3:]| = g_mag.

    The gravity block is eliminated by a Schur complement; the Lagrange
    multiplier then satisfies a scalar secular equation solved by safeguarded
    Newton with a bisection fallback on a bracket slightly right of the
    smallest Schur eigenvalue. Returns (x, info) with the multiplier, gravity
    norm, and weighted cost in info.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dim = a.shape[1]
    if weights is not None:
        sw = _row_weights(weights)
        aw = a * sw[:, None]
        bw = b * sw
    else:
        aw, bw = a, b

    sv = np.linalg.svd(aw, compute_uv=False)
    if sv.size < dim or sv[-1] <= rank_tol * sv[0]:
        rank = int(np.count_nonzero(sv > rank_tol * sv[0])) if sv.size else 0
        raise RankDeficient(f"numerical rank {rank} < {dim}")

    nmat = aw.T @ aw
    cvec = aw.T @ bw
    d = dim - 3
    nyy = nmat[:d, :d]
    nyg = nmat[:d, d:]
    ngg = nmat[d:, d:]
    cy = cvec[:d]
    cg = cvec[d:]
    cho = scipy.linalg.cho_factor(nyy)
    x_cross = scipy.linalg.cho_solve(cho, nyg)       # Nyy^-1 Nyg
    y0 = scipy.linalg.cho_solve(cho, cy)
    nbar = ngg - nyg.T @ x_cross
    cbar = cg - nyg.T @ y0
    evals, u = np.linalg.eigh(nbar)
    ut = u.T @ cbar

    def g_of(lam: float) -> np.ndarray:
        return u @ (ut / (evals + lam))

    def phi(lam: float) -> float:
        return float(np.linalg.norm(ut / (evals + lam)))

    def dphi(lam: float) -> float:
        p = phi(lam)
        return float(-np.sum(ut ** 2 / (evals + lam) ** 3) / p)

    def finish(lam: float) -> tuple[np.ndarray, dict]:
        g = g_of(lam)
        y = y0 - x_cross @ g
        x = np.concatenate([y, g])
        res = aw @ x - bw
        info = {"lambda": lam, "gravity_norm": float(np.linalg.norm(g)),
                "cost": float(res @ res)}
        return x, info

    if abs(phi(0.0) - g_mag) <= constraint_rtol * g_mag:
        return finish(0.0)

    # Bracket: phi is monotone decreasing on (-evals[0], inf).
    scale = max(abs(float(evals[0])), abs(float(evals[-1])), 1.0)
    lo = None
    for eps in (1e-10, 1e-13, 3e-16):
        cand = -evals[0] + eps * scale
        if phi(cand) > g_mag:
            lo = float(cand)
            break
    if lo is None:
        raise RootFindFailed(
            "gravity-norm constraint unreachable (hard case): phi stays below "
            f"{g_mag:.4g} right of the pole at {-evals[0]:.6e}")
    hi = max(1.0, float(evals[-1]))
    while phi(hi) >= g_mag:
        hi *= 10.0
        if hi > 1e18 * scale:
            raise RootFindFailed(f"could not bracket multiplier above {hi:.3e}")

    # Newton on 1/phi (near-linear in lambda), safeguarded by bisection.
    lam = lo
    for _ in range(200):
        p = phi(lam)
        if abs(p - g_mag) <= constraint_rtol * g_mag:
            return finish(lam)
        if p > g_mag:
            lo = lam
        else:
            hi = lam
        dp = dphi(lam)
        lam_new = lam + (1.0 / p - 1.0 / g_mag) * (p * p / dp) if dp != 0 else np.nan
        if not np.isfinite(lam_new) or not (lo < lam_new < hi):
            lam_new = 0.5 * (lo + hi)
        lam = lam_new
    raise RootFindFailed(f"newton/bisection stalled in bracket [{lo:.6e}, {hi:.6e}]")


def solve_constrained(system: LinearSystem,
                      g_mag: float = GRAVITY_MAGNITUDE,
                      rank_tol: float = 1e-8) -> LinearInitState:
    """Constrained solve of a feature-free system; |gravity| = g_mag on exit."""
    x, _ = solve_gravity_constrained(system.a, system.b, system.weights,
                                     g_mag=g_mag, rank_tol=rank_tol)
    return LinearInitState.from_vector(x)


def block_residuals(system: LinearSystem, x: np.ndarray) -> np.ndarray:
    """Unweighted residual norm of every 2-row measurement block."""
    r = system.a @ x - system.b
    return np.linalg.norm(r.reshape(-1, 2), axis=1)


def ransac_solve(system: LinearSystem, cfg: RansacConfig, seed: int = 0,
                 g_mag: float = GRAVITY_MAGNITUDE) -> tuple[LinearInitState, np.ndarray]:
    """Robust constrained solve; returns (state, inlier mask over blocks).

    Per iteration: a minimal subset of cfg.min_points_per_frame blocks per
    keyframe is drawn, solved, grown by per-block residual < threshold, refit
    on the grown set, and scored by the refit residual norm; the lowest score
    wins. Bit-reproducible for a fixed (system, cfg, seed).
    """
    m = system.num_blocks
    frame_ids = np.unique(system.frames)
    groups = [np.flatnonzero(system.frames == f) for f in frame_ids]
    for f, g in zip(frame_ids, groups):
        if g.size < cfg.min_points_per_frame:
            raise ValueError(f"frame {f} has {g.size} blocks; minimal subset "
                             f"needs {cfg.min_points_per_frame}")
    rng = np.random.default_rng(seed)
    a3 = system.a.reshape(m, 2, 7)
    b2 = system.b.reshape(m, 2)

    def solve_subset(mask: np.ndarray) -> np.ndarray:
        rows = np.repeat(mask, 2)
        x, _ = solve_gravity_constrained(system.a[rows], system.b[rows],
                                         system.weights[mask], g_mag=g_mag)
        return x

    best_x = None
    best_mask = None
    best_err = np.inf
    for _ in range(cfg.iterations):
        subset = np.concatenate([
            rng.choice(g, size=cfg.min_points_per_frame, replace=False)
            for g in groups])
        mask = np.zeros(m, dtype=bool)
        mask[subset] = True
        try:
            x = solve_subset(mask)
        except (RankDeficient, RootFindFailed):
            continue
        res = np.linalg.norm(np.einsum("kij,j->ki", a3, x) - b2, axis=1)
        grown = mask | (res < cfg.threshold)
        try:
            x = solve_subset(grown)
        except (RankDeficient, RootFindFailed):
            continue
        rows = np.repeat(grown, 2)
        err = float(np.linalg.norm(system.a[rows] @ x - system.b[rows]))
        if err < best_err:
            best_err = err
            best_x = x
            best_mask = grown
    if best_x is None:
        raise NoValidHypothesis(f"no solvable hypothesis in {cfg.iterations} iterations")
    return LinearInitState.from_vector(best_x), best_mask


def build_feature_based_system(obs_frames: np.ndarray, obs_features: np.ndarray,
                               obs_uv: np.ndarray,
                               preints: list[ImuPreintegration],
                               t_cam_imu: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Classical Dong-Si style system over [p_f1..p_fM, v0, g] (3M + 6 state).

    Observations are flat arrays: keyframe index, feature index in 0..M-1, and
    the normalized bearing. Every feature needs >= 2 observations and the
    window >= 3 keyframes.
    """
    obs_frames = np.asarray(obs_frames, dtype=int)
    obs_features = np.asarray(obs_features, dtype=int)
    obs_uv = np.asarray(obs_uv, dtype=float)
    n = len(preints)
    if n < 3:
        raise FewerThanThreeFrames(f"{n} keyframes; need at least 3")
    m_features = int(obs_features.max()) + 1
    counts = np.bincount(obs_features, minlength=m_features)
    if np.any(counts < 2):
        bad = np.flatnonzero(counts < 2)
        raise ValueError(f"features {bad.tolist()} have fewer than 2 observations")

    r_ci = t_cam_imu.rotation.matrix
    t_ci = t_cam_imu.translation
    lever = r_ci.T @ t_ci
    dim = 3 * m_features + 6
    rows_a = np.zeros((2 * obs_frames.size, dim))
    rows_b = np.zeros(2 * obs_frames.size)
    for j in range(obs_frames.size):
        i = obs_frames[j]
        f = obs_features[j]
        u, v = obs_uv[j]
        r_0i = preints[i].delta_rot.matrix
        m = r_ci @ r_0i.T
        h = np.vstack([m[0] - u * m[2], m[1] - v * m[2]])
        dt = preints[i].dt
        rows_a[2 * j:2 * j + 2, 3 * f:3 * f + 3] = h
        rows_a[2 * j:2 * j + 2, dim - 6:dim - 3] = -dt * h
        rows_a[2 * j:2 * j + 2, dim - 3:dim] = 0.5 * dt * dt * h
        rows_b[2 * j:2 * j + 2] = h @ (preints[i].delta_pos - r_0i @ lever)
    return rows_a, rows_b


@dataclass(frozen=True)
class FeatureBasedSolution:
    features: np.ndarray   # (M, 3) in the first IMU frame
    state: LinearInitState  # scale is NaN: the classical form has no scale


def solve_feature_based(a: np.ndarray, b: np.ndarray,
                        g_mag: float = GRAVITY_MAGNITUDE) -> FeatureBasedSolution:
    x, _ = solve_gravity_constrained(a, b, None, g_mag=g_mag)
    m = (a.shape[1] - 6) // 3
    return FeatureBasedSolution(
        x[:3 * m].reshape(m, 3),
        LinearInitState(float("nan"), x[3 * m:3 * m + 3], x[3 * m + 3:]))
