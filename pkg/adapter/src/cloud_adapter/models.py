"""Model backends producing per-pixel point maps in a shared reference frame.

A backend is a callable (images, intrinsics) -> (points, confidences) where
images is a list of (H, W) arrays, points has shape (N, H, W, 3) expressed in
the camera frame of image 0 (up to an unknown global scale), and confidences
has shape (N, H, W) with values >= 1.

Only the deterministic `identity-stub` ships here; real networks are loaded
on demand and fail with ModelUnavailable when their packages are missing.
The stub ignores pixel content and emits an analytic scene: a fronto-parallel
wall at 3 m viewed by a camera translating with known velocity, acceleration,
and jerk (pure jerk-free motion would make the initialization system exactly
degenerate, so the third-order term is essential). Its construction scale is
STUB_TRUE_SCALE: multiplying the emitted geometry by it restores meters.
"""
from __future__ import annotations

import numpy as np


class ModelUnavailable(RuntimeError):
    """The requested backend (or its heavyweight dependency) is not installed."""


STUB_TRUE_SCALE = 2.0
STUB_WALL_DEPTH_M = 3.0
STUB_VELOCITY = np.array([0.3, 0.0, 0.0])      # m/s, camera-0 frame
STUB_ACCELERATION = np.array([2.0, 0.0, 0.0])  # m/s^2
STUB_JERK = np.array([4.0, 1.0, 0.0])          # m/s^3
STUB_CONFIDENCE = 10.0


def stub_camera_center(t: float) -> np.ndarray:
    """Camera center at time t (s) in the frame of the first camera, meters."""
    return (STUB_VELOCITY * t + 0.5 * STUB_ACCELERATION * t * t
            + STUB_JERK * t ** 3 / 6.0)


def stub_specific_force(t: float) -> np.ndarray:
    """Ideal accelerometer reading for the stub motion (identity mounting).

    The world frame is the first camera frame with gravity (0, 0, 9.81) along
    the optical axis; orientation stays identity throughout.
    """
    return STUB_ACCELERATION + STUB_JERK * t + np.array([0.0, 0.0, 9.81])


def identity_stub(images, intrinsics, timestamps):
    n = len(images)
    h, w = images[0].shape[:2]
    fx, fy, cx, cy = (intrinsics[k] for k in ("fx", "fy", "cx", "cy"))
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    points = np.empty((n, h, w, 3))
    for i, t in enumerate(timestamps):
        center = stub_camera_center(float(t) - float(timestamps[0]))
        # intersect each pixel ray with the wall plane z = depth (world frame)
        scale = (STUB_WALL_DEPTH_M - center[2]) / rays[..., 2]
        points[i] = (center[None, None, :] + rays * scale[..., None]) / STUB_TRUE_SCALE
    conf = np.full((n, h, w), STUB_CONFIDENCE)
    return points, conf


def _unavailable(name: str, package: str):
    def loader(images, intrinsics, timestamps):
        raise ModelUnavailable(
            f"backend '{name}' needs the '{package}' package and pretrained "
            "weights; neither is bundled with this adapter")
    return loader


BACKENDS = {
    "identity-stub": identity_stub,
    "vggt": _unavailable("vggt", "vggt"),
    "depth-anything-3": _unavailable("depth-anything-3", "depth_anything_3"),
    "pi3": _unavailable("pi3", "pi3"),
}


def get_backend(name: str):
    if name not in BACKENDS:
        raise ModelUnavailable(f"unknown backend '{name}'; "
                               f"choices: {sorted(BACKENDS)}")
    return BACKENDS[name]
