"""Disk format for image sequences: 16-bit PNGs plus plain-text sidecars.

A dataset directory holds::

    images/000000.png ...   16-bit grayscale, pixel = round(I * 256)
    times.txt               "index timestamp exposure" (exposure column optional)
    intrinsics.txt          "fu fv cu cv width height"
    groundtruth.txt         optional, "timestamp tx ty tz qx qy qz qw" (cam-to-world)
    gt_idepth_000000.npy    optional exact inverse depth for the first frame
    response.txt            optional 256-entry photometric response to invert
    vignette.png            optional 16-bit attenuation map to divide out

Intensities are stored in 8.8 fixed point, so export followed by ingest is
bit-identical: the engine works on the 8-bit scale ([0, 256) floats) and the
renderer already quantizes to the 1/256 grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from ..errors import MalformedDataset
from ..geometry import CameraIntrinsics
from .metrics import read_trajectory, write_trajectory
from .scene import SyntheticScene, gt_trajectory, render_intensity

_log = logging.getLogger(__name__)

_SCALE = 256.0  # 8.8 fixed point: stored uint16 = round(intensity * 256)


def _save_png16(path: Path, values: np.ndarray) -> None:
    raw = np.round(values * _SCALE)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError(f"intensity out of 16-bit range: [{raw.min()}, {raw.max()}]")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def _load_png16(path: Path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.dtype not in (np.dtype(np.uint16), np.dtype(np.int32)):
        raise MalformedDataset(f"{path.name}: expected 16-bit grayscale PNG")
    if arr.ndim != 2:
        raise MalformedDataset(f"{path.name}: expected single-channel image")
    return arr.astype(np.float64) / _SCALE


def export_dataset(scene: SyntheticScene, out_dir: str | Path) -> Path:
    """Render every frame of ``scene`` into a dataset directory.

    Returns the directory path.  Ground truth (trajectory and first-frame
    inverse depth) rides along so the sequence can seed and score a run.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    for i in range(scene.num_frames):
        I, idepth = render_intensity(scene, i)
        _save_png16(out / "images" / f"{i:06d}.png", I)
        if i == 0:
            np.save(out / "gt_idepth_000000.npy", idepth)

    with open(out / "times.txt", "w") as fh:
        for i in range(scene.num_frames):
            t = scene.timestamps[i]
            exposure = scene.affine_schedule[i, 2]
            fh.write(f"{i:06d} {t:.17g} {exposure:.17g}\n")

    c = scene.intrinsics
    with open(out / "intrinsics.txt", "w") as fh:
        fh.write(f"{c.fu:.17g} {c.fv:.17g} {c.cu:.17g} {c.cv:.17g} {c.width} {c.height}\n")

    ts, pos, quat = gt_trajectory(scene)
    write_trajectory(out / "groundtruth.txt", ts, pos, quat)
    return out


def _parse_intrinsics(path: Path) -> CameraIntrinsics:
    try:
        tokens = path.read_text().split()
        if len(tokens) != 6:
            raise ValueError(f"expected 6 fields, found {len(tokens)}")
        fu, fv, cu, cv = (float(t) for t in tokens[:4])
        width, height = int(tokens[4]), int(tokens[5])
    except (OSError, ValueError) as exc:
        raise MalformedDataset(f"{path.name}: {exc}") from exc
    if fu <= 0 or fv <= 0 or width <= 0 or height <= 0:
        raise MalformedDataset(f"{path.name}: non-positive camera parameters")
    return CameraIntrinsics(fu, fv, cu, cv, width, height)


def _parse_times(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Timestamps and exposures; a missing exposure column means unit exposure."""
    timestamps, exposures, widths = [], [], set()
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MalformedDataset(f"{path.name}: {exc}") from exc
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise MalformedDataset(
                f"{path.name}: line {ln} has {len(parts)} fields, expected 2 or 3"
            )
        widths.add(len(parts))
        try:
            timestamps.append(float(parts[1]))
            exposures.append(float(parts[2]) if len(parts) == 3 else 1.0)
        except ValueError as exc:
            raise MalformedDataset(f"{path.name}: line {ln}: {exc}") from exc
    if len(widths) > 1:
        raise MalformedDataset(f"{path.name}: inconsistent column count across lines")
    if not timestamps:
        raise MalformedDataset(f"{path.name}: no frames listed")
    if widths == {2}:
        _log.warning("%s has no exposure column; assuming unit exposure", path.name)
    exp = np.asarray(exposures)
    if np.any(exp <= 0):
        raise MalformedDataset(f"{path.name}: non-positive exposure time")
    return np.asarray(timestamps), exp


def _parse_response(path: Path) -> np.ndarray:
    try:
        values = np.asarray([float(t) for t in path.read_text().split()])
    except (OSError, ValueError) as exc:
        raise MalformedDataset(f"{path.name}: {exc}") from exc
    if values.size != 256:
        raise MalformedDataset(f"{path.name}: expected 256 samples, found {values.size}")
    if np.any(np.diff(values) <= 0):
        raise MalformedDataset(f"{path.name}: response must be strictly increasing")
    return values


def _parse_vignette(path: Path, intr: CameraIntrinsics) -> np.ndarray:
    v = _load_png16(path) * _SCALE  # raw counts; only the ratio matters
    if v.shape != (intr.height, intr.width):
        raise MalformedDataset(
            f"{path.name}: shape {v.shape[1]}x{v.shape[0]} does not match "
            f"intrinsics {intr.width}x{intr.height}"
        )
    peak = v.max()
    if peak <= 0 or v.min() <= 0:
        raise MalformedDataset(f"{path.name}: attenuation must be positive everywhere")
    return v / peak


@dataclass
class Dataset:
    """Lazily-read sequence directory with optional photometric calibration."""

    root: Path
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    exposures: np.ndarray
    image_paths: list[Path]
    response: np.ndarray | None = None
    vignette: np.ndarray | None = None
    first_idepth: np.ndarray | None = None
    groundtruth: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    _checked: set = field(default_factory=set, repr=False)

    @property
    def num_frames(self) -> int:
        return len(self.image_paths)

    def read_image(self, index: int) -> np.ndarray:
        """Calibrated intensity for one frame on the [0, 256) scale."""
        path = self.image_paths[index]
        img = _load_png16(path)
        if img.shape != (self.intrinsics.height, self.intrinsics.width):
            raise MalformedDataset(
                f"{path.name}: size {img.shape[1]}x{img.shape[0]} does not match "
                f"intrinsics {self.intrinsics.width}x{self.intrinsics.height}"
            )
        if self.response is not None:
            img = np.interp(img, self.response, np.arange(256.0))
        if self.vignette is not None:
            img = img / self.vignette
        return img

    def frames(self) -> Iterator[tuple[int, float, float, np.ndarray]]:
        """Yield (index, timestamp, exposure, image) in order."""
        for i in range(self.num_frames):
            yield i, float(self.timestamps[i]), float(self.exposures[i]), self.read_image(i)


def ingest_dataset(path: str | Path) -> Dataset:
    """Open a dataset directory, validating sidecars against the images.

    Any structural problem raises :class:`MalformedDataset` naming the
    offending file.  ``response.txt`` and ``vignette.png`` are optional
    photometric calibrations undone at read time (inverse response first,
    then vignette division).
    """
    root = Path(path)
    if not root.is_dir():
        raise MalformedDataset(f"{root}: not a directory")
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise MalformedDataset("images/: missing image directory")
    image_paths = sorted(images_dir.glob("*.png"))
    if not image_paths:
        raise MalformedDataset("images/: no PNG frames found")

    times_path = root / "times.txt"
    if not times_path.is_file():
        raise MalformedDataset("times.txt: missing")
    timestamps, exposures = _parse_times(times_path)
    if len(timestamps) != len(image_paths):
        raise MalformedDataset(
            f"times.txt: {len(timestamps)} rows but {len(image_paths)} images"
        )

    intr_path = root / "intrinsics.txt"
    if not intr_path.is_file():
        raise MalformedDataset("intrinsics.txt: missing")
    intr = _parse_intrinsics(intr_path)

    response = vignette = None
    if (root / "response.txt").is_file():
        response = _parse_response(root / "response.txt")
    if (root / "vignette.png").is_file():
        vignette = _parse_vignette(root / "vignette.png", intr)

    first_idepth = None
    idepth_path = root / "gt_idepth_000000.npy"
    if idepth_path.is_file():
        first_idepth = np.load(idepth_path)
        if first_idepth.shape != (intr.height, intr.width):
            raise MalformedDataset(
                f"{idepth_path.name}: shape does not match intrinsics"
            )

    groundtruth = None
    gt_path = root / "groundtruth.txt"
    if gt_path.is_file():
        try:
            groundtruth = read_trajectory(gt_path)
        except ValueError as exc:
            raise MalformedDataset(f"{gt_path.name}: {exc}") from exc

    return Dataset(
        root=root,
        intrinsics=intr,
        timestamps=timestamps,
        exposures=exposures,
        image_paths=image_paths,
        response=response,
        vignette=vignette,
        first_idepth=first_idepth,
        groundtruth=groundtruth,
    )
