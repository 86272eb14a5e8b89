"""Multi-scale image representation with precomputed gradient planes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, OutOfImage
from .geometry import CameraIntrinsics

__all__ = ["ImagePlane", "ImagePyramid", "build_pyramid", "sample_bilinear"]

_MIN_LEVEL_DIM = 32


def gradient_planes(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients, one-sided on the borders.

    This is exactly ``np.gradient`` with unit spacing; kept as a named helper
    because the same planes are bilinearly resampled by the residual kernels
    and the two must never drift apart.
    """
    gv, gu = np.gradient(image)
    return gu, gv


@dataclass
class ImagePlane:
    """One pyramid level: intensities plus its two gradient planes."""

    intensities: np.ndarray
    grad_u: np.ndarray
    grad_v: np.ndarray

    @staticmethod
    def from_image(image: np.ndarray) -> "ImagePlane":
        image = np.ascontiguousarray(image, dtype=np.float64)
        gu, gv = gradient_planes(image)
        return ImagePlane(image, np.ascontiguousarray(gu), np.ascontiguousarray(gv))

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    def sample(self, pixel) -> tuple[float, float, float]:
        """Bilinear (intensity, grad_u, grad_v) at a subpixel location."""
        u, v = float(pixel[0]), float(pixel[1])
        return (
            sample_bilinear(self.intensities, u, v),
            sample_bilinear(self.grad_u, u, v),
            sample_bilinear(self.grad_v, u, v),
        )


def sample_bilinear(plane: np.ndarray, u: float, v: float) -> float:
    """Bilinear interpolation; exact on affine intensity fields.

    Valid domain is ``[0, W-1] x [0, H-1]``; anything outside raises
    :class:`OutOfImage`.
    """
    h, w = plane.shape
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfImage(f"sample at ({u:.2f}, {v:.2f}) outside {w}x{h} plane")
    u0 = min(int(u), w - 2)
    v0 = min(int(v), h - 2)
    fu, fv = u - u0, v - v0
    p = plane[v0 : v0 + 2, u0 : u0 + 2]
    return float(
        (1 - fv) * ((1 - fu) * p[0, 0] + fu * p[0, 1])
        + fv * ((1 - fu) * p[1, 0] + fu * p[1, 1])
    )


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 block mean; odd trailing rows/columns are dropped."""
    h, w = image.shape
    h2, w2 = h // 2, w // 2
    c = image[: 2 * h2, : 2 * w2]
    return 0.25 * (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2])


@dataclass
class ImagePyramid:
    """Coarse-to-fine stack of planes with per-level intrinsics."""

    levels: list[ImagePlane]
    intrinsics: list[CameraIntrinsics]
    exposure: float

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_pyramid(
    image: np.ndarray,
    intrinsics: CameraIntrinsics,
    exposure: float = 1.0,
    num_levels: int = 4,
) -> ImagePyramid:
    """Build ``num_levels`` planes by repeated 2x2 block-mean downsampling."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a single-channel image")
    if image.shape != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"image {image.shape} does not match intrinsics "
            f"{(intrinsics.height, intrinsics.width)}"
        )
    levels = []
    per_level = []
    current = image
    for level in range(num_levels):
        if min(current.shape) < _MIN_LEVEL_DIM:
            raise ImageTooSmall(
                f"level {level} is {current.shape[1]}x{current.shape[0]}; "
                f"short side must stay >= {_MIN_LEVEL_DIM}"
            )
        levels.append(ImagePlane.from_image(current))
        per_level.append(intrinsics.at_level(level))
        if level + 1 < num_levels:
            current = downsample(current)
    return ImagePyramid(levels, per_level, float(exposure))
