"""Export a model's per-pixel predictions into the versioned cloud format.

The on-disk layout matches what the initialization pipeline reads: a
``cloud.json`` manifest (version, num_frames, width, height,
reference_frame_index, dense_raster, camera, frames) plus one dense-raster
CSV per frame with header ``u,v,x,y,z,conf`` enumerating the full pixel grid
row-major. No geometry post-processing happens here: filtering, sampling, and
weighting all live downstream so simulated and real data take the same path.

Image timestamps come from the filenames (integer nanoseconds, EuRoC style,
e.g. ``1403636579763555584.png``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .models import get_backend

CLOUD_FORMAT_VERSION = 1


@dataclass
class ExportManifest:
    model: str
    model_version: str
    images: list[str]
    timestamps: list[float]
    reference_frame_index: int
    intrinsics: dict
    cloud_dir: str
    frame_files: list[str] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)


def load_intrinsics(path) -> dict:
    with open(path) as f:
        intr = json.load(f)
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(intr)
    if missing:
        raise ValueError(f"intrinsics file missing keys: {sorted(missing)}")
    return intr


def discover_images(directory) -> tuple[list[Path], list[float]]:
    """Image files named by nanosecond timestamps, sorted by time."""
    directory = Path(directory)
    entries = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        try:
            ns = int(path.stem)
        except ValueError:
            raise ValueError(f"image name '{path.name}' is not a nanosecond "
                             "timestamp") from None
        entries.append((ns * 1e-9, path))
    entries.sort()
    if not entries:
        raise ValueError(f"no images found in {directory}")
    return [p for _, p in entries], [t for t, _ in entries]


def export_cloud(image_paths, intrinsics: dict, out_dir, model: str = "identity-stub",
                 timestamps=None) -> ExportManifest:
    """Run the backend on the images and write the cloud directory + manifest."""
    if timestamps is None:
        ns = [int(Path(p).stem) for p in image_paths]
        timestamps = [v * 1e-9 for v in ns]
    images = []
    for path in image_paths:
        arr = np.asarray(Image.open(path).convert("L"), dtype=float)
        if arr.shape != (intrinsics["height"], intrinsics["width"]):
            raise ValueError(f"{Path(path).name}: image is {arr.shape[::-1]}, "
                             f"intrinsics say {intrinsics['width']}x"
                             f"{intrinsics['height']}")
        images.append(arr)

    backend = get_backend(model)
    points, conf = backend(images, intrinsics, timestamps)
    n, h, w = conf.shape
    if points.shape != (n, h, w, 3):
        raise ValueError(f"backend returned point shape {points.shape}, "
                         f"expected {(n, h, w, 3)}")
    if np.any(conf < 1.0):
        raise ValueError("backend produced confidences below 1")

    out_dir = Path(out_dir)
    cloud_dir = out_dir / "cloud"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    frame_files = []
    frames_meta = []
    for i in range(n):
        name = f"frame_{i:03d}.csv"
        flat = np.column_stack([u.reshape(-1), v.reshape(-1),
                                points[i].reshape(-1, 3), conf[i].reshape(-1)])
        with open(cloud_dir / name, "w", newline="") as f:
            f.write("u,v,x,y,z,conf\n")
            np.savetxt(f, flat, fmt="%.9g", delimiter=",")
        frame_files.append(name)
        frames_meta.append({"index": i, "timestamp": timestamps[i], "file": name})

    manifest = {
        "version": CLOUD_FORMAT_VERSION,
        "num_frames": n,
        "width": w,
        "height": h,
        "reference_frame_index": 0,
        "dense_raster": True,
        "camera": {k: intrinsics[k] for k in ("fx", "fy", "cx", "cy")},
        "frames": frames_meta,
    }
    with open(cloud_dir / "cloud.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    export = ExportManifest(
        model=model, model_version="stub-1" if model == "identity-stub" else "unknown",
        images=[str(p) for p in image_paths], timestamps=list(map(float, timestamps)),
        reference_frame_index=0, intrinsics=intrinsics, cloud_dir=str(cloud_dir),
        frame_files=frame_files)
    export.save(out_dir / "export_manifest.json")
    return export
