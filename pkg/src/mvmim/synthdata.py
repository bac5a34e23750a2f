"""Deterministic synthetic multi-view scenes with exact depth, poses and pointmaps.

Surfaces live in a world frame with +z up. Scenes are a textured ground plane
(z = 0), the plane plus a floating textured square, or a smooth height field.
Cameras sit on an arc and look at the scene centroid; rendering is a per-pixel
ray cast with Lambertian, light-free texture lookup, so any surface point has
the same color in every view.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .geometry import Camera, intrinsics
from .masking import PatchGrid

KINDS = ("plane", "two_plane", "height_field")
TEXTURES = ("noise_smoothed", "checker")


@dataclass
class SceneSpec:
    kind: str = "plane"
    texture: str = "noise_smoothed"
    texture_scale: float = 0.25  # meters per texture cell / checker square
    extent: float = 2.0  # meters
    radius: float = 2.0  # camera distance to the centroid
    arc_span_deg: float = 40.0
    arc_center_deg: float = 0.0
    jitter_deg: float = 2.0
    elevation_deg: float = 0.0  # tilt of the arc plane away from vertical
    n_views: int = 4
    image_size: int = 64
    fov_deg: float = 50.0
    seed: int = 0
    fg_height: float = 0.5
    fg_size: float = 0.7
    hf_amplitude: float = 0.25

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scene kind {self.kind!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.n_views < 1 or self.image_size < 2:
            raise ConfigError("need at least one view and a non-trivial image size")
        if self.radius <= 0 or self.extent <= 0 or self.texture_scale <= 0:
            raise ConfigError("radius, extent and texture_scale must be positive")

    @property
    def non_overlapping(self) -> bool:
        return self.arc_span_deg >= 180.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultiViewBatch:
    images: np.ndarray  # (V, H, W, 3) in [0, 1]
    cameras: list
    depths: np.ndarray  # (V, H, W), <= 0 invalid
    points: np.ndarray  # (V, H, W, 3) world coordinates
    spec: SceneSpec = None
    surface: object = field(default=None, repr=False)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    def subset(self, views) -> "MultiViewBatch":
        views = list(views)
        return MultiViewBatch(self.images[views], [self.cameras[v] for v in views], self.depths[views],
                              self.points[views], self.spec, self.surface)

    def patch_points(self, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """World points at every patch-center pixel, (V, N, 3), and their validity."""
        grid = PatchGrid(self.images.shape[1], self.images.shape[2], patch_size)
        centers = grid.centers()
        pts, valid = [], []
        for cam in self.cameras:
            p, d = self.surface.cast(cam, centers)
            pts.append(p)
            valid.append(d > 0)
        return np.stack(pts), np.stack(valid)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        for cam in self.cameras:
            h.update(cam.T.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# textures and surfaces
# ---------------------------------------------------------------------------


class Texture:
    """Color as a function of world (x, y), bilinearly interpolated from a coarse grid."""

    def __init__(self, kind: str, scale: float, half_width: float, rng: np.random.Generator):
        self.kind = kind
        self.scale = scale
        self.origin = -half_width
        n = int(math.ceil(2 * half_width / scale)) + 2
        c0, c1, c2 = rng.uniform(0.05, 0.95, size=(3, 3))
        if kind == "checker":
            self.colors = (c0, c1)
            self.grid = None
        else:
            noise = ndimage.gaussian_filter(rng.standard_normal((n, n, 2)), sigma=(1.0, 1.0, 0))
            noise = noise / (noise.std(axis=(0, 1)) + 1e-12)
            t = 1.0 / (1.0 + np.exp(-1.5 * noise))
            grid = c0 + t[..., :1] * (c1 - c0) + (t[..., 1:] - 0.5) * (c2 - c0)
            self.grid = np.clip(grid, 0.0, 1.0)

    def sample(self, xy: np.ndarray) -> np.ndarray:
        gx = (xy[..., 0] - self.origin) / self.scale
        gy = (xy[..., 1] - self.origin) / self.scale
        if self.kind == "checker":
            parity = (np.floor(gx) + np.floor(gy)).astype(np.int64) % 2
            return np.where(parity[..., None] == 0, self.colors[0], self.colors[1])
        n = self.grid.shape[0]
        gx = np.clip(gx, 0.0, n - 1.000001)
        gy = np.clip(gy, 0.0, n - 1.000001)
        x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
        a, b = (gx - x0)[..., None], (gy - y0)[..., None]
        g = self.grid
        return ((1 - a) * (1 - b) * g[y0, x0] + a * (1 - b) * g[y0, x0 + 1]
                + (1 - a) * b * g[y0 + 1, x0] + a * b * g[y0 + 1, x0 + 1])


class Surface:
    """Ray caster for one scene; ``cast`` returns world points and z-depth per pixel."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator, half_width: float):
        self.spec = spec
        self.ground = Texture(spec.texture, spec.texture_scale, half_width, rng)
        self.fg = None
        self.bumps = None
        if spec.kind == "two_plane":
            self.fg = Texture(spec.texture, spec.texture_scale * 0.6, half_width, rng)
            off = rng.uniform(-0.15, 0.15, size=2) * spec.extent
            self.fg_center = off
            self.fg_half = spec.fg_size / 2.0
        elif spec.kind == "height_field":
            k = 6
            self.bumps = (rng.uniform(-0.5, 0.5, size=(k, 2)) * spec.extent,
                          rng.uniform(0.15, 0.35, size=k) * spec.extent,
                          rng.uniform(-1.0, 1.0, size=k) * spec.hf_amplitude)

    # height field helpers -------------------------------------------------
    def height(self, xy: np.ndarray) -> np.ndarray:
        if self.bumps is None:
            return np.zeros(xy.shape[:-1])
        centers, widths, amps = self.bumps
        d2 = ((xy[..., None, :] - centers) ** 2).sum(-1)
        return (amps * np.exp(-d2 / (2 * widths**2))).sum(-1)

    def _max_height(self) -> float:
        return 0.0 if self.bumps is None else float(np.abs(self.bumps[2]).sum())

    def inside(self, C: np.ndarray) -> bool:
        if C[2] <= self.height(C[None, :2])[0]:
            return True
        if self.fg is not None:
            # a thin square is only "entered" at its own height
            in_xy = np.all(np.abs(C[:2] - self.fg_center) <= self.fg_half)
            return bool(in_xy and abs(C[2] - self.spec.fg_height) < 1e-9)
        return False

    def cast(self, cam: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rays through pixel centers. Returns (world points, depth); depth 0 means no hit."""
        K, R, C = cam.K, cam.R, cam.t
        u, v = pixels[..., 0], pixels[..., 1]
        dirs_cam = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones_like(u)], axis=-1)
        dirs = dirs_cam @ R.T  # camera-frame z component is 1, so the ray parameter is the depth
        if self.bumps is not None:
            t = self._march(C, dirs)
        else:
            t = self._plane_hit(C, dirs, 0.0)
            if self.fg is not None:
                tf = self._plane_hit(C, dirs, self.spec.fg_height)
                hit = C + tf[..., None] * dirs
                in_sq = np.all(np.abs(hit[..., :2] - self.fg_center) <= self.fg_half, axis=-1) & (tf > 0)
                closer = in_sq & ((t <= 0) | (tf < t))
                t = np.where(closer, tf, t)
        pts = C + t[..., None] * dirs
        pts[t <= 0] = 0.0
        return pts, np.where(t > 0, t, 0.0)

    @staticmethod
    def _plane_hit(C, dirs, z0: float) -> np.ndarray:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z0 - C[2]) / dz
        return np.where((dz < 0) & np.isfinite(t) & (t > 0), t, 0.0)

    def _march(self, C, dirs, tol: float = 1e-6, n_steps: int = 256) -> np.ndarray:
        """First crossing of the height field: uniform march between the bounding
        slabs, then bisection until the bracket is shorter than ``tol`` meters."""
        flat = dirs.reshape(-1, 3)
        norms = np.linalg.norm(flat, axis=1)
        t_hi = self._plane_hit(C, flat, -self._max_height() - 1e-3)
        t_lo = np.maximum(self._plane_hit(C, flat, self._max_height() + 1e-3), 0.0)
        frac = np.linspace(0.0, 1.0, n_steps)
        ts = t_lo[:, None] + (t_hi - t_lo)[:, None] * frac  # (P, n_steps)
        P = C + ts[..., None] * flat[:, None, :]
        below = (P[..., 2] - self.height(P[..., :2])) <= 0
        hit = below.any(axis=1) & (t_hi > 0)
        k = np.argmax(below, axis=1)
        rows = np.arange(len(flat))
        a = np.where(k > 0, ts[rows, np.maximum(k - 1, 0)], ts[:, 0])
        b = ts[rows, k]
        while np.any(((b - a) * norms)[hit] > tol):
            m = 0.5 * (a + b)
            Pm = C + m[:, None] * flat
            above = Pm[:, 2] - self.height(Pm[:, :2]) > 0
            a = np.where(above, m, a)
            b = np.where(above, b, m)
        out = np.where(hit, 0.5 * (a + b), 0.0)
        return out.reshape(dirs.shape[:-1])

    def color(self, pts: np.ndarray, depth: np.ndarray) -> np.ndarray:
        col = self.ground.sample(pts[..., :2])
        if self.fg is not None:
            on_fg = np.abs(pts[..., 2] - self.spec.fg_height) < 1e-9
            on_fg &= np.all(np.abs(pts[..., :2] - self.fg_center) <= self.fg_half, axis=-1)
            col = np.where(on_fg[..., None], self.fg.sample(pts[..., :2] - self.fg_center), col)
        return np.where((depth > 0)[..., None], col, 0.0)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose with z toward ``target``, x right and y down in the image."""
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x, y, z, position
    return T


def camera_poses(spec: SceneSpec, rng: np.random.Generator) -> list[np.ndarray]:
    V = spec.n_views
    if spec.non_overlapping:
        # unrolled arc: nadir cameras whose footprints are disjoint
        footprint = 2.0 * spec.radius * math.tan(math.radians(spec.fov_deg) / 2.0) * math.sqrt(2.0)
        spacing = 1.25 * footprint
        poses = []
        for k in range(V):
            pos = np.array([(k - (V - 1) / 2.0) * spacing, 0.0, spec.radius])
            poses.append(look_at(pos, pos - np.array([0.0, 0.0, 1.0])))
        return poses
    half = math.radians(spec.arc_span_deg) / 2.0
    angles = math.radians(spec.arc_center_deg) + (np.linspace(-half, half, V) if V > 1 else np.zeros(1))
    elev = math.radians(spec.elevation_deg)
    jit = math.radians(spec.jitter_deg)
    poses = []
    for phi in angles:
        phi = phi + rng.uniform(-jit, jit)
        tilt = elev + rng.uniform(-jit, jit)
        pos = spec.radius * np.array([math.sin(phi), -math.sin(tilt) * math.cos(phi), math.cos(tilt) * math.cos(phi)])
        target = rng.uniform(-0.05, 0.05, size=3) * spec.extent
        target[2] = 0.0
        poses.append(look_at(pos, target))
    return poses


def default_intrinsics(spec: SceneSpec) -> np.ndarray:
    s = spec.image_size
    f = (s / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    c = (s - 1) / 2.0
    return intrinsics(f, f, c, c)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> MultiViewBatch:
    """Render images, exact depth maps, cameras and world pointmaps for one scene."""
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    poses = camera_poses(spec, rng)
    reach = max(np.abs(P[:2, 3]).max() for P in poses)
    half_width = reach + 2.0 * spec.radius + spec.extent
    surface = Surface(spec, rng, half_width)
    K = default_intrinsics(spec)
    s = spec.image_size
    vv, uu = np.mgrid[0:s, 0:s].astype(float)
    pixels = np.stack([uu, vv], axis=-1)
    images, depths, points, cams = [], [], [], []
    for T in poses:
        if surface.inside(T[:3, 3]):
            raise GenerationError(f"camera at {T[:3, 3]} is inside the scene geometry")
        cam = Camera(K, T)
        pts, depth = surface.cast(cam, pixels)
        images.append(surface.color(pts, depth))
        depths.append(depth)
        points.append(pts)
        cam.depth = depth
        cams.append(cam)
    return MultiViewBatch(np.stack(images), cams, np.stack(depths), np.stack(points), spec, surface)


def scene_seed(base_seed: int, index: int) -> int:
    """Per-scene seed from a splittable seed sequence."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def sample_spec(template: SceneSpec, rng: np.random.Generator, kinds=("plane", "two_plane")) -> SceneSpec:
    """Randomize kind, texture scale and arc for a fresh training scene."""
    kind = kinds[int(rng.integers(len(kinds)))]
    return replace(
        template,
        kind=kind,
        texture_scale=float(rng.uniform(0.6, 1.4) * template.texture_scale),
        elevation_deg=float(rng.uniform(-10.0, 10.0)),
        seed=int(rng.integers(2**62)),
    )


def make_training_stream(spec_template: SceneSpec, batch_views=(2, 8), seed: int = 0,
                         kinds=("plane", "two_plane"), slots: int = 8) -> Iterator[MultiViewBatch]:
    """Infinite deterministic stream of fresh scenes.

    Each draw places ``slots`` evenly spaced cameras on the template's arc and
    keeps a random contiguous run of V of them, V uniform in ``batch_views``.
    """
    lo, hi = batch_views
    if not 1 <= lo <= hi <= slots:
        raise ConfigError(f"batch_views {batch_views} must satisfy 1 <= lo <= hi <= {slots}")
    index = 0
    while True:
        rng = np.random.default_rng(scene_seed(seed, index))
        index += 1
        V = int(rng.integers(lo, hi + 1))
        spec = sample_spec(spec_template, rng, kinds)
        start = int(rng.integers(0, slots - V + 1))
        if not spec.non_overlapping:
            full = spec_template.arc_span_deg
            step = full / (slots - 1) if slots > 1 else 0.0
            span = step * (V - 1)
            center = spec_template.arc_center_deg - full / 2.0 + step * start + span / 2.0
            spec = replace(spec, arc_span_deg=span, arc_center_deg=center)
        yield generate_scene(replace(spec, n_views=V), rng)
