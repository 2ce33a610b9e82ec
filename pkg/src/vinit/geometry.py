"""Rotations, rigid transforms, and normalized pinhole projection.

Conventions used across the package:

- Rotation matrices written ``R_a_b`` map vectors from frame b to frame a.
- ``Rotation3`` wraps an orthonormal matrix; a unit quaternion view (w, x, y, z,
  Hamilton) is exposed as a property.
- The gravity-aligned world frame has +z up and the gravity vector is
  ``(0, 0, 9.81)`` m/s^2 (the propagation equations subtract it).
- Normalized image coordinates are (x/z, y/z) in the camera frame, z optical axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRAVITY_MAGNITUDE = 9.81


class NonPositiveDepth(ValueError):
    """Point at or behind the camera plane (z <= min_depth)."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rotmat_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential so(3) -> SO(3); second-order series below 1e-8 rad."""
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("non-finite rotation vector")
    theta = math.sqrt(float(omega @ omega))
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix.

    Branch selection by the largest of (trace, m00, m11, m22), which keeps the
    conversion stable near 180 degrees; w is normalized to be non-negative.
    """
    t = np.trace(m)
    if t > max(m[0, 0], m[1, 1], m[2, 2]):
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([0.5 * r, (m[2, 1] - m[1, 2]) * s,
                      (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s])
    else:
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_log(m: np.ndarray) -> np.ndarray:
    """Principal logarithm SO(3) -> so(3), result norm <= pi.

    Goes through the quaternion form: the angle-pi axis is then picked by the
    largest diagonal entry of the matrix (deterministic), and the small-angle
    branch is a series in the vector part.
    """
    q = rotmat_to_quat(m)
    nv = np.linalg.norm(q[1:])
    if nv < 1e-9:
        # theta ~ 2*nv; q_vec = sin(theta/2)*axis => log ~ 2*q_vec*(1 + nv^2/6)
        return 2.0 * q[1:] * (1.0 + nv * nv / 6.0)
    theta = 2.0 * math.atan2(nv, q[0])
    return q[1:] * (theta / nv)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Jr(phi) with Exp(phi + d) ~ Exp(phi) Exp(Jr d)."""
    theta = math.sqrt(float(phi @ phi))
    k = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    return (np.eye(3)
            - (1.0 - math.cos(theta)) / t2 * k
            + (theta - math.sin(theta)) / (t2 * theta) * (k @ k))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(phi @ phi))
    k = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    cot_half = 1.0 / math.tan(0.5 * theta)
    coef = (1.0 / (theta * theta)) - cot_half / (2.0 * theta)
    return np.eye(3) + 0.5 * k + coef * (k @ k)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


@dataclass(frozen=True)
class Rotation3:
    """3D rotation stored as an orthonormal matrix; quaternion view exposed.

    The plain constructor does not validate; use :meth:`from_matrix` for checked
    construction. Instances are immutable and safe to share between threads.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray, tol: float = 1e-9) -> "Rotation3":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if abs(np.linalg.det(m) - 1.0) > tol or np.max(np.abs(m.T @ m - np.eye(3))) > 10 * tol:
            raise ValueError("matrix is not orthonormal with determinant 1")
        return cls(m)

    @classmethod
    def from_quat(cls, q: np.ndarray) -> "Rotation3":
        return cls(quat_to_rotmat(q))

    @property
    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z), w >= 0."""
        return rotmat_to_quat(self.matrix)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Rotate vectors; v has shape (3,) or (..., 3)."""
        return np.asarray(v) @ self.matrix.T

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T.copy())

    def __matmul__(self, other: "Rotation3") -> "Rotation3":
        return Rotation3(self.matrix @ other.matrix)


def exp_so3(omega: np.ndarray) -> Rotation3:
    """Rodrigues exponential map of a rotation vector (radians)."""
    return Rotation3(rotmat_exp(omega))


def log_so3(r: Rotation3) -> np.ndarray:
    """Principal rotation vector (radians), norm <= pi."""
    return rotmat_log(r.matrix)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform; apply(p) = R p + t. Composition via @, immutable."""

    rotation: Rotation3 = field(default_factory=Rotation3.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation.apply(other.translation) + self.translation)


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics (pixels); no distortion model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def pixel_to_normalized(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        uv = np.empty_like(px)
        uv[..., 0] = (px[..., 0] - self.cx) / self.fx
        uv[..., 1] = (px[..., 1] - self.cy) / self.fy
        return uv

    def normalized_to_pixel(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        px = np.empty_like(uv)
        px[..., 0] = uv[..., 0] * self.fx + self.cx
        px[..., 1] = uv[..., 1] * self.fy + self.cy
        return px

    def contains(self, px: np.ndarray, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return ((px[..., 0] >= margin) & (px[..., 0] <= self.width - 1 - margin)
                & (px[..., 1] >= margin) & (px[..., 1] <= self.height - 1 - margin))


MIN_PROJECTION_DEPTH = 1e-4


def project(p_camera: np.ndarray, min_depth: float = MIN_PROJECTION_DEPTH) -> np.ndarray:
    """Normalized projection (x/z, y/z) of a camera-frame point.

    Raises NonPositiveDepth when z <= min_depth (default 1e-4 m): points
    behind or at the camera are rejected rather than producing exploding values.
    """
    p = np.asarray(p_camera, dtype=float)
    if p[2] <= min_depth:
        raise NonPositiveDepth(f"depth {p[2]:.3e} <= {min_depth:.1e}")
    return p[:2] / p[2]


def project_points(points: np.ndarray, min_depth: float = MIN_PROJECTION_DEPTH):
    """Vectorized normalized projection.

    Returns (uv (..., 2), valid (...,)); invalid entries (z <= min_depth) hold
    garbage and must be masked by the caller.
    """
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    valid = z > min_depth
    zs = np.where(valid, z, 1.0)
    return points[..., :2] / zs[..., None], valid


def gravity_align(g_in_body: np.ndarray) -> Rotation3:
    """Rotation R_world_body mapping the measured gravity onto +z.

    R @ g = (0, 0, |g|). The remaining yaw freedom is fixed by Gram-Schmidt:
    the body x-axis is projected onto the horizontal plane and becomes the
    world x-axis; if gravity is within ~2.5 deg of the body x-axis the body
    y-axis seeds the projection instead. Deterministic by construction.
    """
    g = np.asarray(g_in_body, dtype=float)
    n = np.linalg.norm(g)
    if n <= 1.0:
        raise ValueError(f"gravity magnitude {n:.3f} m/s^2 too small to align")
    z = g / n
    seed = np.array([1.0, 0.0, 0.0])
    if abs(z @ seed) > 0.999:
        seed = np.array([0.0, 1.0, 0.0])
    x = seed - (seed @ z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Rotation3(np.vstack([x, y, z]))
