"""Rigid motion, camera model, and per-frame photometric state.

The tangent-vector convention everywhere is ``(translation, rotation)``:
``xi[:3]`` is the translational part, ``xi[3:]`` the so(3) part.  Pose
increments compose on the left, ``boxplus(xi, T) = exp(xi) @ T``, so Jacobians
of warped points with respect to the increment are evaluated at the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera, NonPositiveDepth, OutOfImage

__all__ = [
    "Pose",
    "AffineBrightness",
    "FrameState",
    "CameraIntrinsics",
    "so3_exp",
    "so3_log",
    "se3_exp",
    "se3_log",
    "boxplus",
    "oplus",
    "warp",
]

# Below this angle the closed forms are replaced by their Taylor expansions.
_SMALL_ANGLE = 1e-8
# so3_log refuses rotations this close to the pi branch cut.
_PI_MARGIN = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = float(w[0]), float(w[1]), float(w[2])
    return np.array(
        [
            [0.0, -wz, wy],
            [wz, 0.0, -wx],
            [-wy, wx, 0.0],
        ]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        # sin t / t = 1 - t^2/6, (1 - cos t)/t^2 = 1/2 - t^2/24
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
    else:
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix.

    Raises :class:`AngleNearPi` within ``1e-6`` of the branch cut, where the
    axis is not recoverable from the antisymmetric part.
    """
    R = np.asarray(R, dtype=float)
    trace = float(np.trace(R))
    cos_theta = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(cos_theta)
    if theta > math.pi - _PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} within guard of pi")
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        # t / sin t = 1 + t^2/6
        return vee * (1.0 + theta * theta / 6.0)
    return vee * (theta / math.sin(theta))


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """Left Jacobian V with ``se3_exp(xi)[:3,3] == V @ xi[:3]``."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        B = 0.5 - theta2 / 24.0
        C = 1.0 / 6.0 - theta2 / 120.0
    else:
        B = (1.0 - math.cos(theta)) / theta2
        C = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + B * K + C * (K @ K)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Inverse of the left Jacobian, series-switched near zero."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    theta = math.sqrt(theta2)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        D = 1.0 / 12.0 + theta2 / 720.0
    else:
        half = 0.5 * theta
        # 1/t^2 - cot(t/2)/(2 t)
        D = (1.0 - half * math.cos(half) / math.sin(half)) / theta2
    return np.eye(3) - 0.5 * K + D * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential of a twist ``(rho, w)`` into a rigid transform."""
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[:3], xi[3:]
    R = so3_exp(w)
    V = so3_left_jacobian(w)
    return Pose(R, V @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Twist ``(rho, w)`` with ``se3_exp(se3_log(T)) == T``."""
    w = so3_log(pose.rotation)
    Vinv = so3_left_jacobian_inv(w)
    return np.concatenate([Vinv @ pose.translation, w])


def boxplus(xi: np.ndarray, pose: Pose) -> Pose:
    """Left increment on the group: ``exp(xi) @ pose``."""
    return se3_exp(xi).compose(pose)


@dataclass(frozen=True)
class AffineBrightness:
    """Exposure-time and affine irradiance parameters of one frame.

    A frame's recorded intensity relates to scene irradiance ``B`` as
    ``I = t * exp(a) * B + b``.
    """

    a: float = 0.0
    b: float = 0.0
    exposure: float = 1.0

    def gain_from(self, host: "AffineBrightness") -> float:
        """Brightness transfer slope from ``host``'s frame into this one."""
        return (self.exposure * math.exp(self.a)) / (
            host.exposure * math.exp(host.a)
        )


@dataclass(frozen=True)
class FrameState:
    """8-DoF state of one frame relative to its reference keyframe.

    ``tangent`` is the se(3) coordinate of the relative pose (reference ->
    frame), ``affine`` carries (a, b) plus the known exposure time.
    """

    tangent: np.ndarray = field(default_factory=lambda: np.zeros(6))
    affine: AffineBrightness = field(default_factory=AffineBrightness)

    @staticmethod
    def identity(exposure: float = 1.0) -> "FrameState":
        return FrameState(np.zeros(6), AffineBrightness(0.0, 0.0, exposure))

    def pose(self) -> Pose:
        return se3_exp(self.tangent)

    def vector(self) -> np.ndarray:
        """Stacked (tangent, a, b) — the 8-vector the optimizer updates."""
        return np.concatenate([self.tangent, [self.affine.a, self.affine.b]])


def oplus(delta: np.ndarray, state: FrameState) -> FrameState:
    """Apply an 8-vector increment: left pose update, additive (a, b).

    ``delta[:6]`` perturbs the pose on the left and the result is pulled back
    through the logarithm so the state stays in coordinates; ``delta[6:]``
    adds to (a, b).
    """
    delta = np.asarray(delta, dtype=float)
    new_pose = boxplus(delta[:6], se3_exp(state.tangent))
    aff = state.affine
    return FrameState(
        se3_log(new_pose),
        AffineBrightness(aff.a + float(delta[6]), aff.b + float(delta[7]), aff.exposure),
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model with principal point in pixel-center coordinates."""

    fu: float
    fv: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fu > 0.0 and self.fv > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (0.0 < self.cu < self.width and 0.0 < self.cv < self.height):
            raise ValueError("principal point must lie inside the image")

    def at_level(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level ``level`` (pixel-center convention).

        A level-l pixel covers 2^l full-resolution pixels, so centers map as
        ``c_l = (c_0 + 0.5) / 2^l - 0.5``; focal lengths halve per level and
        dimensions floor-halve iteratively.
        """
        if level == 0:
            return self
        s = float(2**level)
        w, h = self.width, self.height
        for _ in range(level):
            w //= 2
            h //= 2
        return CameraIntrinsics(
            self.fu / s,
            self.fv / s,
            (self.cu + 0.5) / s - 0.5,
            (self.cv + 0.5) / s - 0.5,
            w,
            h,
        )

    def project(self, point: np.ndarray, z_min: float = 1e-4) -> np.ndarray:
        """Pixel coordinates of a camera-frame point; guards the near plane."""
        point = np.asarray(point, dtype=float)
        z = float(point[2])
        if z <= z_min:
            raise BehindCamera(f"depth {z:.3e} <= near cutoff {z_min:.3e}")
        return np.array(
            [self.fu * point[0] / z + self.cu, self.fv * point[1] / z + self.cv]
        )

    def backproject(self, pixel: np.ndarray, idepth: float) -> np.ndarray:
        """Camera-frame point of a pixel at inverse depth ``idepth``."""
        if idepth <= 0.0:
            raise NonPositiveDepth(f"inverse depth {idepth:.3e} must be positive")
        pixel = np.asarray(pixel, dtype=float)
        z = 1.0 / idepth
        return np.array(
            [(pixel[0] - self.cu) / self.fu * z, (pixel[1] - self.cv) / self.fv * z]
            + [z]
        )

    def normalized(self, pixel: np.ndarray) -> np.ndarray:
        """Unit-depth ray direction ``(x/z, y/z, 1)`` of a pixel."""
        pixel = np.asarray(pixel, dtype=float)
        return np.array(
            [(pixel[0] - self.cu) / self.fu, (pixel[1] - self.cv) / self.fv, 1.0]
        )

    def contains(self, pixel: np.ndarray, border: float = 0.0) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return (
            border <= u <= self.width - 1 - border
            and border <= v <= self.height - 1 - border
        )


def warp(
    intr: CameraIntrinsics,
    state: FrameState,
    pixel: np.ndarray,
    idepth: float,
    border: float = 0.0,
    z_min: float = 1e-4,
) -> tuple[np.ndarray, float]:
    """Map a reference-keyframe pixel into the frame described by ``state``.

    Returns the target pixel and the point's inverse depth in the target
    frame.  Raises :class:`BehindCamera` past the near plane and
    :class:`OutOfImage` when the result leaves the image (minus ``border``).
    """
    if idepth <= 0.0:
        raise NonPositiveDepth(f"inverse depth {idepth:.3e} must be positive")
    pose = state.pose()
    x = pose.rotation @ intr.normalized(pixel) / idepth + pose.translation
    z = float(x[2])
    if z <= z_min:
        raise BehindCamera(f"warped depth {z:.3e} <= near cutoff {z_min:.3e}")
    target = np.array([intr.fu * x[0] / z + intr.cu, intr.fv * x[1] / z + intr.cv])
    if not intr.contains(target, border):
        raise OutOfImage(
            f"warp landed at ({target[0]:.2f}, {target[1]:.2f}) outside border {border}"
        )
    return target, 1.0 / z
