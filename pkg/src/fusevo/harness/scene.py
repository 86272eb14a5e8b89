"""Synthetic scenes: textured planes ray-cast along exact trajectories.

Every quantity the engine estimates exists here in closed form — per-pixel
inverse depth, relative poses, brightness transfer — so each equation can be
checked at desk scale.  Textures are rasters generated deterministically from
a seed and sampled bilinearly; intensities live on the 8-bit scale as floats
quantized to the 1/256 grid (what a 16-bit PNG round-trip preserves exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from ..errors import NoSurfaceInView
from ..geometry import CameraIntrinsics, Pose
from ..pyramid import ImagePyramid, build_pyramid
from .metrics import rotation_to_quaternion

__all__ = [
    "SyntheticScene",
    "TextureSpec",
    "TexturedPlane",
    "cast_rays",
    "gt_trajectory",
    "orbit_scene",
    "project_world",
    "render_frame",
    "render_intensity",
    "scene_from_toml",
    "subsample_scene",
    "texture_deprived_scene",
]

_INTENSITY_MAX = 65535.0 / 256.0  # largest value a 16-bit export can hold


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) from integer lattice coordinates."""
    mask = (1 << 64) - 1
    skey = np.uint64((seed * 0xD6E8FEB86659FD93) & mask)
    x = (
        np.asarray(ix).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        + np.asarray(iy).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        + skey
    )
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_octave(size: int, cells: int, seed: int) -> np.ndarray:
    """One octave of tileable value noise on a size x size raster."""
    xs = np.arange(size, dtype=np.float64) * (cells / size)
    i0 = np.floor(xs).astype(np.int64)
    f = xs - i0
    w = f * f * (3.0 - 2.0 * f)
    a0, a1 = i0 % cells, (i0 + 1) % cells
    n00 = _hash01(a0[None, :], a0[:, None], seed)
    n01 = _hash01(a1[None, :], a0[:, None], seed)
    n10 = _hash01(a0[None, :], a1[:, None], seed)
    n11 = _hash01(a1[None, :], a1[:, None], seed)
    wu, wv = w[None, :], w[:, None]
    return (1 - wv) * ((1 - wu) * n00 + wu * n01) + wv * ((1 - wu) * n10 + wu * n11)


@dataclass(frozen=True)
class TextureSpec:
    """Procedural texture of one plane; a pure function of ``seed``.

    ``kind`` is "noise" (multi-octave value noise, corner-rich) or "waves"
    (two long-wavelength sinusoids: smooth gradients everywhere, no corner
    structure anywhere — the texture-deprivation substrate).  ``scale`` is
    the metric edge length of one tile, ``cells`` the octave-0 lattice
    resolution, ``cycles`` the wave count per tile for "waves".
    """

    seed: int
    kind: str = "noise"
    size: int = 256
    scale: float = 2.5
    cells: int = 10
    octaves: int = 4
    base: float = 0.45
    contrast: float = 0.7
    cycles: float = 4.0
    decay: float = 0.5  # octave amplitude falloff; flatter = busier fine detail

    def build_raster(self) -> np.ndarray:
        if self.kind == "noise":
            total = np.zeros((self.size, self.size))
            norm = 0.0
            for k in range(self.octaves):
                amp = self.decay**k
                total += amp * _value_octave(
                    self.size, self.cells * (2**k), self.seed + k
                )
                norm += amp
            v = total / norm
        elif self.kind == "waves":
            rng = np.random.default_rng(self.seed)
            vecs = []
            lo, hi = 0.75 * self.cycles, 1.3 * self.cycles
            span = int(math.ceil(hi)) + 1
            for m in range(0, span):
                for n in range(-span, span):
                    if m == 0 and n <= 0:
                        continue
                    if lo <= math.hypot(m, n) <= hi:
                        vecs.append((m, n))
            first = vecs[int(rng.integers(len(vecs)))]
            ang1 = math.atan2(first[1], first[0])
            # second direction at least 50 degrees away for a real plaid
            far = [
                v
                for v in vecs
                if abs(math.remainder(math.atan2(v[1], v[0]) - ang1, math.pi))
                > math.radians(50)
            ]
            second = far[int(rng.integers(len(far)))] if far else vecs[0]
            ph = rng.uniform(0.0, 2.0 * math.pi, size=2)
            t = (np.arange(self.size) + 0.5) / self.size
            a, b = t[None, :], t[:, None]
            s = np.sin(2 * math.pi * (first[0] * a + first[1] * b) + ph[0]) + np.sin(
                2 * math.pi * (second[0] * a + second[1] * b) + ph[1]
            )
            v = 0.5 + 0.25 * s
        else:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        out = 255.0 * (self.base + self.contrast * (v - 0.5))
        return np.clip(out, 0.0, 255.0)


@dataclass
class TexturedPlane:
    """Infinite plane ``normal . X = offset`` carrying a procedural texture."""

    normal: np.ndarray
    offset: float
    texture: TextureSpec
    _raster: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic in-plane orthonormal axes."""
        n = self.normal
        h = np.zeros(3)
        h[int(np.argmin(np.abs(n)))] = 1.0
        e1 = np.cross(n, h)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(n, e1)

    def raster(self) -> np.ndarray:
        if self._raster is None:
            self._raster = self.texture.build_raster()
        return self._raster

    def irradiance_at(self, X: np.ndarray) -> np.ndarray:
        """Bilinear texture lookup (tiled) at world points on the plane."""
        e1, e2 = self.basis()
        tex = self.raster()
        size = self.texture.size
        u = np.mod(X @ e1 / self.texture.scale, 1.0) * size
        v = np.mod(X @ e2 / self.texture.scale, 1.0) * size
        u0 = np.floor(u).astype(np.int64) % size
        v0 = np.floor(v).astype(np.int64) % size
        fu = u - np.floor(u)
        fv = v - np.floor(v)
        u1, v1 = (u0 + 1) % size, (v0 + 1) % size
        return (1 - fv) * ((1 - fu) * tex[v0, u0] + fu * tex[v0, u1]) + fv * (
            (1 - fu) * tex[v1, u0] + fu * tex[v1, u1]
        )


@dataclass
class SyntheticScene:
    """Planes + trajectory + per-frame brightness schedule, all exact.

    ``trajectory`` holds world-to-camera poses; ``affine_schedule`` is
    (N, 3) columns (a, b, exposure) applied as I = t e^a B + b.  Every
    trajectory pose must keep at least one surface in view (rendering
    raises :class:`NoSurfaceInView` otherwise).
    """

    surfaces: list[TexturedPlane]
    trajectory: list[Pose]
    timestamps: np.ndarray
    intrinsics: CameraIntrinsics
    noise_sigma: float
    affine_schedule: np.ndarray
    seed: int
    name: str = "scene"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.affine_schedule = np.asarray(self.affine_schedule, dtype=float).reshape(
            -1, 3
        )
        n = len(self.trajectory)
        if len(self.timestamps) != n or len(self.affine_schedule) != n:
            raise ValueError("trajectory, timestamps, affine_schedule lengths differ")

    @property
    def num_frames(self) -> int:
        return len(self.trajectory)


def _ray_grid(c: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    xn = (np.arange(c.width, dtype=np.float64) - c.cu) / c.fu
    yn = (np.arange(c.height, dtype=np.float64) - c.cv) / c.fv
    return xn, yn


def _intersect(
    scene: SyntheticScene, C: np.ndarray, dw: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest plane hit along rays ``C + s*dw``; returns (s, plane index).

    ``s`` equals camera depth because ray directions carry unit z in the
    camera frame.  Misses hold inf / -1.
    """
    shp = dw.shape[:-1]
    s_best = np.full(shp, np.inf)
    pid = np.full(shp, -1, dtype=np.int64)
    for i, pl in enumerate(scene.surfaces):
        denom = dw @ pl.normal
        num = pl.offset - float(pl.normal @ C)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        s = np.where(s > 1e-6, s, np.inf)
        closer = s < s_best
        s_best = np.where(closer, s, s_best)
        pid = np.where(closer, i, pid)
    return s_best, pid


def render_intensity(
    scene: SyntheticScene, index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Raw quantized intensity image and exact per-pixel inverse depth."""
    if not 0 <= index < scene.num_frames:
        raise IndexError(f"frame {index} outside trajectory of {scene.num_frames}")
    c = scene.intrinsics
    pose = scene.trajectory[index]
    Rt = pose.rotation.T
    C = -Rt @ pose.translation
    xn, yn = _ray_grid(c)
    dcam = np.empty((c.height, c.width, 3))
    dcam[..., 0] = xn[None, :]
    dcam[..., 1] = yn[:, None]
    dcam[..., 2] = 1.0
    dw = dcam @ Rt.T  # (R^T d) per pixel
    s, pid = _intersect(scene, C, dw)
    hit = np.isfinite(s)
    if not hit.any():
        raise NoSurfaceInView(f"frame {index}: no surface in view")

    B = np.zeros((c.height, c.width))
    for i in range(len(scene.surfaces)):
        m = hit & (pid == i)
        if not m.any():
            continue
        X = C[None, :] + s[m, None] * dw[m]
        B[m] = scene.surfaces[i].irradiance_at(X)

    a_f, b_f, t_f = scene.affine_schedule[index]
    I = t_f * math.exp(a_f) * B + b_f
    if scene.noise_sigma > 0.0:
        rng = np.random.default_rng([scene.seed, 0xF0A, index])
        I = I + rng.normal(0.0, scene.noise_sigma, size=I.shape)
    I = np.clip(I, 0.0, _INTENSITY_MAX)
    I = np.round(I * 256.0) / 256.0
    idepth = np.where(hit, 1.0 / np.where(hit, s, 1.0), 0.0)
    return I, idepth


def render_frame(
    scene: SyntheticScene, index: int, num_levels: int = 4
) -> tuple[ImagePyramid, np.ndarray]:
    """Pyramid of one rendered frame plus its exact inverse-depth map."""
    I, idepth = render_intensity(scene, index)
    exposure = float(scene.affine_schedule[index, 2])
    return build_pyramid(I, scene.intrinsics, exposure, num_levels), idepth


def cast_rays(
    scene: SyntheticScene, index: int, pixels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World hit points, camera depths, and hit mask for given pixels."""
    c = scene.intrinsics
    pose = scene.trajectory[index]
    Rt = pose.rotation.T
    C = -Rt @ pose.translation
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    dcam = np.stack(
        [
            (pixels[:, 0] - c.cu) / c.fu,
            (pixels[:, 1] - c.cv) / c.fv,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    dw = dcam @ Rt.T
    s, _ = _intersect(scene, C, dw)
    hit = np.isfinite(s)
    ssafe = np.where(hit, s, 1.0)
    X = C[None, :] + ssafe[:, None] * dw
    return X, ssafe, hit


def project_world(
    scene: SyntheticScene, index: int, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Renderer-native pinhole projection of world points into a frame."""
    c = scene.intrinsics
    pose = scene.trajectory[index]
    Xc = np.asarray(X, dtype=float).reshape(-1, 3) @ pose.rotation.T + pose.translation
    z = Xc[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    p = np.stack(
        [c.fu * Xc[:, 0] / zs + c.cu, c.fv * Xc[:, 1] / zs + c.cv], axis=1
    )
    return p, ok


def gt_trajectory(scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground truth as (timestamps, camera-to-world positions, quaternions)."""
    pos = np.zeros((scene.num_frames, 3))
    quat = np.zeros((scene.num_frames, 4))
    for i, pose in enumerate(scene.trajectory):
        inv = pose.inverse()
        pos[i] = inv.translation
        quat[i] = rotation_to_quaternion(inv.rotation)
    return scene.timestamps.copy(), pos, quat


def _look_at(C: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose with +z toward ``target`` and +y nominal down."""
    f = target - C
    f = f / np.linalg.norm(f)
    down = np.array([0.0, 1.0, 0.0])
    r = np.cross(down, f)
    nr = np.linalg.norm(r)
    if nr < 1e-12:
        raise ValueError("view direction parallel to the vertical")
    r /= nr
    d = np.cross(f, r)
    R = np.stack([r, d, f], axis=0)
    return Pose(R, -R @ C)


def _box(seed: int, kind: str, **tex) -> list[TexturedPlane]:
    """Five-plane stage: back wall, floor, ceiling, two side walls."""
    spec = lambda k: TextureSpec(seed=seed * 10 + k, kind=kind, **tex)  # noqa: E731
    return [
        TexturedPlane(np.array([0.0, 0.0, 1.0]), 3.5, spec(1)),
        TexturedPlane(np.array([0.0, 1.0, 0.0]), 1.2, spec(2)),
        TexturedPlane(np.array([0.0, 1.0, 0.0]), -1.2, spec(3)),
        TexturedPlane(np.array([1.0, 0.0, 0.0]), -1.6, spec(4)),
        TexturedPlane(np.array([1.0, 0.0, 0.0]), 1.6, spec(5)),
    ]


def orbit_scene(
    num_frames: int = 200,
    width: int = 384,
    height: int = 288,
    noise_sigma: float = 1.0,
    seed: int = 7,
) -> SyntheticScene:
    """Camera arcing inside a textured box, gaze panning across the back wall.

    Rich multi-octave texture on every plane, mild known exposure changes
    plus unknown affine drift — the default end-to-end sequence.  The gaze
    target pans against the orbit so rotation does not cancel the flow, and
    the camera sits low enough that the floor recedes through the lower
    third of the image (near-to-far parallax).
    """
    f = 0.86 * width
    intr = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    planes = _box(seed, "noise", size=256, scale=2.5, cells=10, octaves=4,
                  base=0.45, contrast=0.72, decay=0.65)
    theta_max = 1.0
    traj, n = [], max(num_frames, 1)
    for i in range(n):
        u = i / max(n - 1, 1)
        th = -theta_max + 2.0 * theta_max * u
        C = np.array([1.0 * math.sin(th), 0.45 + 0.08 * math.sin(2.7 * th),
                      1.0 * math.cos(th) - 0.9])
        base = _look_at(C, np.array([0.0, 0.1, 3.5]))
        # extra yaw sweep: look-at alone cancels most of the flow
        phi = 0.45 * th
        yaw = Pose(
            np.array(
                [
                    [math.cos(phi), 0.0, -math.sin(phi)],
                    [0.0, 1.0, 0.0],
                    [math.sin(phi), 0.0, math.cos(phi)],
                ]
            ),
            np.zeros(3),
        )
        traj.append(Pose(yaw.rotation @ base.rotation,
                         yaw.rotation @ base.translation))
    i = np.arange(n)
    schedule = np.stack(
        [
            0.05 * np.sin(2 * np.pi * i / 63.0),
            1.2 * np.sin(2 * np.pi * i / 87.0 + 1.0),
            1.0 + 0.1 * np.sin(2 * np.pi * i / 50.0),
        ],
        axis=1,
    )
    return SyntheticScene(planes, traj, i / 30.0, intr, noise_sigma, schedule,
                          seed, name="orbit")


def texture_deprived_scene(
    num_frames: int = 80,
    width: int = 320,
    height: int = 256,
    noise_sigma: float = 0.5,
    seed: int = 11,
) -> SyntheticScene:
    """A single smooth-plaid wall filling the view from every pose.

    One infinite plane, no inter-plane edges, no grazing incidence: the only
    intensity structure is two long-wavelength sinusoids.  Gradients are
    strong enough for pixel candidates yet curvature stays far below what
    the segment test needs, so corner detection yields nothing anywhere in
    the sequence.
    """
    f = 0.86 * width
    intr = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    planes = [
        TexturedPlane(
            np.array([0.0, 0.0, 1.0]),
            4.0,
            TextureSpec(seed=seed * 10 + 1, kind="waves", size=256, scale=2.46,
                        base=0.47, contrast=0.75, cycles=4.0),
        )
    ]
    theta_max = 0.55
    traj, n = [], max(num_frames, 1)
    for i in range(n):
        u = i / max(n - 1, 1)
        th = -theta_max + 2.0 * theta_max * u
        C = np.array([1.0 * math.sin(th), 0.06 * math.sin(2.0 * th),
                      1.0 * math.cos(th) - 1.2])
        target = np.array([-0.7 * math.sin(th), 0.0, 4.0])
        traj.append(_look_at(C, target))
    i = np.arange(n)
    schedule = np.stack(
        [
            0.03 * np.sin(2 * np.pi * i / 41.0),
            0.8 * np.sin(2 * np.pi * i / 59.0 + 0.7),
            1.0 + 0.05 * np.sin(2 * np.pi * i / 37.0),
        ],
        axis=1,
    )
    return SyntheticScene(planes, traj, i / 30.0, intr, noise_sigma, schedule,
                          seed, name="texture-deprived")


def subsample_scene(scene: SyntheticScene, step: int) -> SyntheticScene:
    """Every ``step``-th frame of a scene — the large-motion variant."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return SyntheticScene(
        scene.surfaces,
        scene.trajectory[::step],
        scene.timestamps[::step],
        scene.intrinsics,
        scene.noise_sigma,
        scene.affine_schedule[::step],
        scene.seed,
        name=f"{scene.name}-sub{step}",
    )


_PRESETS = {
    "orbit": orbit_scene,
    "texture_deprived": texture_deprived_scene,
}


def scene_from_toml(path: str | Path) -> SyntheticScene:
    """Scene description file: ``[scene]`` with a preset name and overrides.

    Keys: preset (orbit | texture_deprived), frames, width, height, noise,
    seed, subsample.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    table = data.get("scene", data)
    known = {"preset", "frames", "width", "height", "noise", "seed", "subsample"}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown scene keys in {path}: {sorted(unknown)}")
    preset = table.get("preset", "orbit")
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; have {sorted(_PRESETS)}")
    kwargs = {}
    if "frames" in table:
        kwargs["num_frames"] = int(table["frames"])
    if "width" in table:
        kwargs["width"] = int(table["width"])
    if "height" in table:
        kwargs["height"] = int(table["height"])
    if "noise" in table:
        kwargs["noise_sigma"] = float(table["noise"])
    if "seed" in table:
        kwargs["seed"] = int(table["seed"])
    scene = _PRESETS[preset](**kwargs)
    step = int(table.get("subsample", 1))
    return subsample_scene(scene, step) if step > 1 else scene
