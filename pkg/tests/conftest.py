import numpy as np
import pytest

from vinit.geometry import PinholeCamera, Rotation3
from vinit.imu import ImuNoise, Biases
from vinit.pipeline import Scenario, default_extrinsics
from vinit.sim import SensorSpec, TrajectorySpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def camera():
    return PinholeCamera(450.0, 450.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def t_cam_imu():
    return default_extrinsics()


def random_rotation(rng) -> Rotation3:
    from vinit.geometry import exp_so3
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0, np.pi - 1e-2))


def numeric_jacobian(f, x, eps=1e-6):
    """Central finite differences of f: R^n -> R^m at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        jac[:, i] = (np.atleast_1d(f(x + dx)) - np.atleast_1d(f(x - dx))) / (2 * eps)
    return jac


CONSUMER_NOISE = ImuNoise(gyro_density=2e-3, accel_density=2e-2,
                          gyro_walk=4e-5, accel_walk=4e-4)


def brute_force_gravity(a, b, weights=None, g_mag=9.81, grid_deg=2.0):
    """Independent oracle for the norm-constrained solve.

    For a fixed gravity direction the remaining unknowns are linear, so the
    projected cost is a quadratic in the direction; it is evaluated on a
    spherical grid and polished with Nelder-Mead. No Lagrangian machinery.
    """
    import math
    import scipy.optimize

    if weights is not None:
        sw = np.repeat(np.sqrt(weights), 2)
        aw, bw = a * sw[:, None], b * sw
    else:
        aw, bw = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    a_lin, a_g = aw[:, :-3], aw[:, -3:]
    q, _ = np.linalg.qr(a_lin)
    r_b = bw - q @ (q.T @ bw)
    r_g = a_g - q @ (q.T @ a_g)
    c0 = float(r_b @ r_b)
    w = r_g.T @ r_b
    m = r_g.T @ r_g

    def cost_dir(u):
        g = g_mag * u
        return c0 - 2.0 * float(w @ g) + float(g @ (m @ g))

    th = np.arange(0.0, math.pi + 1e-9, math.radians(grid_deg))
    ph = np.arange(0.0, 2 * math.pi, math.radians(grid_deg))
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    u = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp),
                  np.cos(tt)], axis=-1).reshape(-1, 3)
    g = g_mag * u
    costs = c0 - 2.0 * (g @ w) + np.einsum("ki,ij,kj->k", g, m, g)
    best = np.argmin(costs)
    res = scipy.optimize.minimize(
        lambda ang: cost_dir(np.array([math.sin(ang[0]) * math.cos(ang[1]),
                                       math.sin(ang[0]) * math.sin(ang[1]),
                                       math.cos(ang[0])])),
        [tt.reshape(-1)[best], pp.reshape(-1)[best]], method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000})
    ang = res.x
    u_best = np.array([math.sin(ang[0]) * math.cos(ang[1]),
                       math.sin(ang[0]) * math.sin(ang[1]), math.cos(ang[0])])
    g_best = g_mag * u_best
    y, *_ = np.linalg.lstsq(a_lin, bw - a_g @ g_best, rcond=None)
    return np.concatenate([y, g_best])


def desk_scenario(noise=None, biases=None, cloud_sigma=0.0, outlier_ratio=0.0,
                  adversarial=False, duration=3.0, track_pixel_sigma=0.0,
                  scale=2.0) -> Scenario:
    """Figure-eight desk-scale scenario shared by the integration tests."""
    sensor = SensorSpec(noise=noise or ImuNoise(), biases=biases or Biases.zero(),
                        scale=scale, cloud_sigma=cloud_sigma,
                        outlier_ratio=outlier_ratio,
                        adversarial_outliers=adversarial,
                        track_pixel_sigma=track_pixel_sigma)
    traj = TrajectorySpec(duration=duration)
    return Scenario(trajectory=traj, sensor=sensor)
