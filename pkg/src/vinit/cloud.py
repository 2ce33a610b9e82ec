"""Predicted up-to-scale point clouds: data model, sampling, and file format.

All points live in a single reference camera frame (frame 0 of the window),
with confidences in [1, inf). Frames may be sparse entry lists or dense
rasters in row-major pixel order; only rasters support bilinear interpolation.

The on-disk layout (version 1) is a directory with a ``cloud.json`` manifest::

    {"version": 1, "num_frames": N, "width": W, "height": H,
     "reference_frame_index": 0, "dense_raster": false,
     "camera": {"fx":..., "fy":..., "cx":..., "cy":...},
     "frames": [{"index": 0, "timestamp": t0, "file": "frame_000.csv"}, ...]}

plus one CSV per frame with header ``u,v,x,y,z,conf`` (pixel coordinates,
point in the reference camera frame, confidence). Dense rasters enumerate the
full W x H pixel grid row-major. :func:`validate_cloud_dir` is the schema
checker external exporters are tested against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PinholeCamera, RigidTransform

CLOUD_FORMAT_VERSION = 1
CLOUD_MANIFEST_NAME = "cloud.json"


class InsufficientPoints(ValueError):
    """A frame has fewer valid entries than requested samples."""


class OutOfBounds(ValueError):
    """Query pixel outside the raster."""


class NeighborInvalid(ValueError):
    """One of the four raster neighbors needed for interpolation is invalid."""


@dataclass
class CloudFrame:
    """Entries of one frame: pixel locations, points in C0, confidences.

    For raster frames (raster_shape = (H, W)) the arrays are row-major over
    the pixel grid and pixels[k] = (col, row).
    """

    timestamp: float
    pixels: np.ndarray      # (M, 2) float, (u, v) in pixels
    points: np.ndarray      # (M, 3) up-to-scale, reference camera frame
    conf: np.ndarray        # (M,) in [1, inf)
    raster_shape: tuple[int, int] | None = None


@dataclass
class PredictedCloud:
    frames: list[CloudFrame]
    width: int
    height: int
    camera: PinholeCamera | None = None
    reference_index: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class SampledSet:
    """Exactly K samples per frame, with normalized bearings and region ids.

    region is -1 until :func:`assign_regions` fills it.
    """

    pixels: np.ndarray      # (N, K, 2)
    bearings: np.ndarray    # (N, K, 2) normalized (u, v)
    points: np.ndarray      # (N, K, 3) in C0, up-to-scale
    conf: np.ndarray        # (N, K)
    region: np.ndarray      # (N, K) int
    timestamps: np.ndarray  # (N,)

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def k(self) -> int:
        return self.pixels.shape[1]


@dataclass
class RegionGrid:
    """Uniform rows x cols grid over the reference image plane."""

    rows: int
    cols: int
    adjacency: list[tuple[int, int]] = field(default_factory=list)
    clamped_count: int = 0

    @property
    def num_regions(self) -> int:
        return self.rows * self.cols


def make_region_grid(rows: int, cols: int) -> RegionGrid:
    """Grid with 4-connectivity adjacency (each edge listed once, j < l)."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            j = r * cols + c
            if c + 1 < cols:
                edges.append((j, j + 1))
            if r + 1 < rows:
                edges.append((j, j + cols))
    return RegionGrid(rows, cols, edges)


def filter_and_sample(cloud: PredictedCloud, camera: PinholeCamera, k: int,
                      conf_min: float = 1.5) -> SampledSet:
    """Confidence-filter and patch-sample exactly k entries per frame.

    The image is split into ceil(sqrt(k)) x ceil(sqrt(k)) uniform patches and
    the highest-confidence valid entry of each patch is taken; if that yields
    more than k candidates the k most confident survive, and if fewer, the
    remaining slots are filled from the unused valid entries in global
    confidence order. All ties break by ascending (row, col) pixel order, so
    the sampling is deterministic.
    """
    n = cloud.num_frames
    grid = math.ceil(math.sqrt(k))
    pix = np.zeros((n, k, 2))
    brg = np.zeros((n, k, 2))
    pts = np.zeros((n, k, 3))
    cnf = np.zeros((n, k))
    ts = np.zeros(n)

    for i, frame in enumerate(cloud.frames):
        valid = np.flatnonzero(frame.conf >= conf_min)
        if valid.size < k:
            raise InsufficientPoints(
                f"frame {i}: {valid.size} entries with conf >= {conf_min}, need {k}")
        p = frame.pixels[valid]
        c = frame.conf[valid]
        # Deterministic total order: confidence desc, then (row, col) asc.
        order = np.lexsort((p[:, 0], p[:, 1], -c))
        patch_col = np.minimum((p[:, 0] * grid / cloud.width).astype(int), grid - 1)
        patch_row = np.minimum((p[:, 1] * grid / cloud.height).astype(int), grid - 1)
        patch = patch_row * grid + patch_col

        chosen: list[int] = []
        seen_patches: set[int] = set()
        leftovers: list[int] = []
        for idx in order:
            pid = int(patch[idx])
            if pid in seen_patches:
                leftovers.append(idx)
            else:
                seen_patches.add(pid)
                chosen.append(idx)
        if len(chosen) >= k:
            # keep the k best patch winners (order[] is already sorted)
            chosen = chosen[:k]
        else:
            chosen = chosen + leftovers[: k - len(chosen)]
        sel = valid[np.array(chosen, dtype=int)]

        pix[i] = frame.pixels[sel]
        brg[i] = camera.pixel_to_normalized(frame.pixels[sel])
        pts[i] = frame.points[sel]
        cnf[i] = frame.conf[sel]
        ts[i] = frame.timestamp

    return SampledSet(pix, brg, pts, cnf, np.full((n, k), -1, dtype=int), ts)


def interpolate_at(frame: CloudFrame, pixel: np.ndarray) -> tuple[np.ndarray, float]:
    """Bilinear point/confidence lookup on a raster frame.

    Exact for rasters that are affine in pixel coordinates; a query exactly at
    a node returns that node. Confidence <= 0 marks a node invalid.
    """
    if frame.raster_shape is None:
        raise ValueError("interpolation requires a dense raster frame")
    rows, cols = frame.raster_shape
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= cols - 1 and 0.0 <= v <= rows - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside raster {cols}x{rows}")
    c0 = min(int(math.floor(u)), cols - 2) if cols > 1 else 0
    r0 = min(int(math.floor(v)), rows - 2) if rows > 1 else 0
    fu = u - c0
    fv = v - r0
    pts = frame.points.reshape(rows, cols, 3)
    cnf = frame.conf.reshape(rows, cols)
    block_c = cnf[r0:r0 + 2, c0:c0 + 2]
    if np.any(block_c <= 0):
        raise NeighborInvalid(f"invalid raster neighbor near ({u}, {v})")
    w = np.array([[(1 - fv) * (1 - fu), (1 - fv) * fu], [fv * (1 - fu), fv * fu]])
    point = np.einsum("rc,rcd->d", w, pts[r0:r0 + 2, c0:c0 + 2])
    conf = float(np.sum(w * block_c))
    return point, conf


def lookup_point(frame: CloudFrame, pixel: np.ndarray,
                 tol: float = 0.51) -> tuple[np.ndarray, float]:
    """Point/confidence at a pixel: bilinear on rasters, nearest entry on lists.

    For sparse frames the nearest stored entry within `tol` pixels is
    returned; beyond that the query fails (no interpolation basis).
    """
    if frame.raster_shape is not None:
        return interpolate_at(frame, pixel)
    d2 = np.sum((frame.pixels - np.asarray(pixel, dtype=float)) ** 2, axis=1)
    j = int(np.argmin(d2))
    if d2[j] > tol * tol:
        raise OutOfBounds(f"no cloud entry within {tol} px of {tuple(pixel)}")
    return frame.points[j], float(frame.conf[j])


def region_of_points(points: np.ndarray, camera: PinholeCamera,
                     grid: RegionGrid) -> tuple[np.ndarray, int]:
    """Grid cell of each point's projection on the reference image plane.

    Projections outside the image clamp to the nearest cell; the clamp count
    is returned alongside. points: (M, 3) in the reference camera frame.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z = np.where(np.abs(pts[:, 2]) < 1e-12, 1e-12, pts[:, 2])
    uv = pts[:, :2] / z[:, None]
    px = camera.normalized_to_pixel(uv)
    col_f = px[:, 0] * grid.cols / camera.width
    row_f = px[:, 1] * grid.rows / camera.height
    clamped = ((col_f < 0) | (col_f >= grid.cols) | (row_f < 0) | (row_f >= grid.rows))
    col_i = np.clip(col_f.astype(int), 0, grid.cols - 1)
    row_i = np.clip(row_f.astype(int), 0, grid.rows - 1)
    return row_i * grid.cols + col_i, int(np.count_nonzero(clamped))


def assign_regions(sampled: SampledSet, camera: PinholeCamera,
                   dims: tuple[int, int] = (3, 3)) -> RegionGrid:
    """Assign every sample to a cell of a uniform grid on the reference image.

    Cells are determined by projecting each point (in the reference camera
    frame) through the intrinsics; projections falling outside the image clamp
    to the nearest cell and are counted in the returned grid. Fills
    sampled.region in place. dims = (1, 1) collapses to a single global scale.
    """
    grid = make_region_grid(*dims)
    region, clamped = region_of_points(sampled.points.reshape(-1, 3), camera, grid)
    sampled.region[:] = region.reshape(sampled.region.shape)
    grid.clamped_count = clamped
    return grid


def lift_to_I0(point_c0: np.ndarray, s: float, extrinsics: RigidTransform) -> np.ndarray:
    """Metric point in the IMU frame of the reference camera: s*(R_ic p) + t_ic.

    `extrinsics` is the camera-to-IMU transform (R_ic, t_ic). Works on a
    single point or an (..., 3) array. s must be positive.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    return extrinsics.rotation.apply(np.asarray(point_c0) * s) + extrinsics.translation


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def save_cloud(directory, cloud: PredictedCloud) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames_meta = []
    dense = all(f.raster_shape is not None for f in cloud.frames) and cloud.num_frames > 0
    for i, frame in enumerate(cloud.frames):
        name = f"frame_{i:03d}.csv"
        with open(directory / name, "w", newline="") as f:
            f.write("u,v,x,y,z,conf\n")
            for k in range(len(frame.conf)):
                vals = (*frame.pixels[k], *frame.points[k], frame.conf[k])
                f.write(",".join(f"{v:.9g}" for v in vals) + "\n")
        frames_meta.append({"index": i, "timestamp": frame.timestamp, "file": name})
    manifest = {
        "version": CLOUD_FORMAT_VERSION,
        "num_frames": cloud.num_frames,
        "width": cloud.width,
        "height": cloud.height,
        "reference_frame_index": cloud.reference_index,
        "dense_raster": dense,
        "frames": frames_meta,
    }
    if cloud.camera is not None:
        manifest["camera"] = {"fx": cloud.camera.fx, "fy": cloud.camera.fy,
                              "cx": cloud.camera.cx, "cy": cloud.camera.cy}
    with open(directory / CLOUD_MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_cloud(directory) -> PredictedCloud:
    directory = Path(directory)
    problems = validate_cloud_dir(directory)
    if problems:
        raise ValueError("invalid cloud directory:\n  " + "\n  ".join(problems))
    with open(directory / CLOUD_MANIFEST_NAME) as f:
        manifest = json.load(f)
    camera = None
    if "camera" in manifest:
        camera = PinholeCamera(width=manifest["width"], height=manifest["height"],
                               **manifest["camera"])
    frames = []
    for meta in sorted(manifest["frames"], key=lambda m: m["index"]):
        data = np.loadtxt(directory / meta["file"], delimiter=",", skiprows=1, ndmin=2)
        shape = (manifest["height"], manifest["width"]) if manifest["dense_raster"] else None
        frames.append(CloudFrame(meta["timestamp"], data[:, 0:2].copy(),
                                 data[:, 2:5].copy(), data[:, 5].copy(), shape))
    return PredictedCloud(frames, manifest["width"], manifest["height"], camera,
                          manifest["reference_frame_index"])


def validate_cloud_dir(directory) -> list[str]:
    """Schema check of an on-disk cloud; returns a list of problems (empty = ok)."""
    directory = Path(directory)
    problems: list[str] = []
    manifest_path = directory / CLOUD_MANIFEST_NAME
    if not manifest_path.is_file():
        return [f"missing manifest {CLOUD_MANIFEST_NAME}"]
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        return [f"manifest is not valid JSON: {e}"]

    required = ["version", "num_frames", "width", "height",
                "reference_frame_index", "dense_raster", "frames"]
    for key in required:
        if key not in manifest:
            problems.append(f"manifest missing key '{key}'")
    if problems:
        return problems
    if manifest["version"] != CLOUD_FORMAT_VERSION:
        problems.append(f"unsupported version {manifest['version']}")
    if len(manifest["frames"]) != manifest["num_frames"]:
        problems.append("frames list length != num_frames")
    if "camera" in manifest:
        cam_keys = {"fx", "fy", "cx", "cy"}
        if set(manifest["camera"]) != cam_keys:
            problems.append(f"camera must have exactly keys {sorted(cam_keys)}")
    indices = sorted(m.get("index", -1) for m in manifest["frames"])
    if indices != list(range(manifest["num_frames"])):
        problems.append("frame indices must be 0..num_frames-1")
    prev_t = -math.inf
    for meta in sorted(manifest["frames"], key=lambda m: m.get("index", 0)):
        if "timestamp" not in meta or "file" not in meta:
            problems.append(f"frame entry {meta} missing timestamp/file")
            continue
        if meta["timestamp"] <= prev_t:
            problems.append("frame timestamps must be strictly increasing")
        prev_t = meta["timestamp"]
        path = directory / meta["file"]
        if not path.is_file():
            problems.append(f"missing frame file {meta['file']}")
            continue
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except ValueError as e:
            problems.append(f"{meta['file']}: parse error: {e}")
            continue
        if data.shape[1] != 6:
            problems.append(f"{meta['file']}: expected 6 columns, got {data.shape[1]}")
            continue
        if not np.all(np.isfinite(data)):
            problems.append(f"{meta['file']}: non-finite values")
        if np.any(data[:, 5] < 1.0):
            problems.append(f"{meta['file']}: confidences must be >= 1")
        if manifest["dense_raster"]:
            expect = manifest["width"] * manifest["height"]
            if data.shape[0] != expect:
                problems.append(f"{meta['file']}: dense raster needs {expect} rows, "
                                f"got {data.shape[0]}")
    return problems
