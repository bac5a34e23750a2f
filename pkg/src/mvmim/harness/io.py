"""Plain file formats: PPM images, MKDP depth maps, text point clouds/poses, scene directories."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, MissingFileError
from ..geometry import Camera, TrackSet

DEPTH_MAGIC = b"MKDP"


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    return path


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit. ``image`` is (H, W, 3) in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = _require(Path(path)).read_bytes()
    tokens, off = [], 0
    while len(tokens) < 4:
        while off < len(buf) and buf[off : off + 1].isspace():
            off += 1
        if buf[off : off + 1] == b"#":
            off = buf.index(b"\n", off) + 1
            continue
        end = off
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[off:end])
        off = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only 8-bit binary P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[off + 1 : off + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", w, h, 0) + d.tobytes())


def read_depth(path) -> np.ndarray:
    buf = _require(Path(path)).read_bytes()
    if buf[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic")
    w, h, _ = struct.unpack_from("<III", buf, 4)
    if len(buf) != 16 + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def write_points(path, points: np.ndarray, valid: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = []
    for i, p in enumerate(pts):
        row = " ".join(repr(float(x)) for x in p)
        if valid is not None:
            row += f" {int(bool(np.asarray(valid).reshape(-1)[i]))}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [ln.split() for ln in _require(Path(path)).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    pts = np.array([[float(x) for x in r[:3]] for r in rows]).reshape(-1, 3)
    valid = np.array([bool(int(r[3])) if len(r) > 3 else True for r in rows], dtype=bool)
    return pts, valid


def write_poses(path, poses) -> None:
    lines = [" ".join(repr(float(x)) for x in np.asarray(T)[:3, :4].reshape(-1)) for T in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[np.ndarray]:
    poses = []
    for ln in _require(Path(path)).read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        vals = [float(x) for x in ln.split()]
        if len(vals) != 12:
            raise FormatError(f"{path}: pose line needs 12 numbers, got {len(vals)}")
        T = np.eye(4)
        T[:3, :4] = np.array(vals).reshape(3, 4)
        poses.append(T)
    return poses


def write_cameras(path, cameras) -> None:
    """One line per view: 9 numbers of K (row-major) then 12 of the 3x4 camera-to-world pose."""
    lines = ["# K(3x3) T(3x4) per view"]
    for c in cameras:
        vals = list(np.asarray(c.K).reshape(-1)) + list(np.asarray(c.T)[:3, :4].reshape(-1))
        lines.append(" ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for ln in _require(Path(path)).read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        vals = np.array([float(x) for x in ln.split()])
        if vals.size != 21:
            raise FormatError(f"{path}: camera line needs 21 numbers, got {vals.size}")
        T = np.eye(4)
        T[:3, :4] = vals[9:].reshape(3, 4)
        out.append((vals[:9].reshape(3, 3), T))
    return out


def write_tracks(path, tracks: TrackSet) -> None:
    lines = ["# seed_id view u v visible"]
    lines += [f"{i} {v} {u!r} {w!r} {int(m)}" for i, v, u, w, m in tracks.to_rows()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path, source_view: int = 0) -> TrackSet:
    rows = [ln.split() for ln in _require(Path(path)).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise FormatError(f"{path}: no tracks")
    S = max(int(r[0]) for r in rows) + 1
    V = max(int(r[1]) for r in rows) + 1
    points = np.zeros((S, V, 2))
    vis = np.zeros((S, V), dtype=bool)
    for r in rows:
        i, v = int(r[0]), int(r[1])
        points[i, v] = float(r[2]), float(r[3])
        vis[i, v] = bool(int(r[4]))
    return TrackSet(points, vis, source_view)


class Scene:
    """A scene loaded from disk: images, cameras (with depth) and optional GT tracks."""

    def __init__(self, images: np.ndarray, cameras: list, tracks: TrackSet | None = None, meta: dict | None = None):
        self.images = images
        self.cameras = cameras
        self.tracks = tracks
        self.meta = meta or {}

    @property
    def n_views(self) -> int:
        return len(self.images)


def save_scene(directory, batch, tracks: TrackSet | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for v in range(batch.n_views):
        write_ppm(d / f"view_{v:03d}.ppm", batch.images[v])
        write_depth(d / f"view_{v:03d}.depth", batch.depths[v])
    write_cameras(d / "cameras.txt", batch.cameras)
    if tracks is not None:
        write_tracks(d / "tracks.txt", tracks)
    if batch.spec is not None:
        (d / "scene.json").write_text(json.dumps(batch.spec.to_dict(), sort_keys=True) + "\n")
    return d


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"scene directory not found: {d}")
    cams_raw = read_cameras(d / "cameras.txt")
    images, cameras = [], []
    for v, (K, T) in enumerate(cams_raw):
        images.append(read_ppm(d / f"view_{v:03d}.ppm"))
        cameras.append(Camera(K, T, read_depth(d / f"view_{v:03d}.depth")))
    tracks = read_tracks(d / "tracks.txt") if (d / "tracks.txt").exists() else None
    meta = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else {}
    return Scene(np.stack(images), cameras, tracks, meta)
