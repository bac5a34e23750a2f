"""Pinhole camera math, ground-truth tracks, similarity alignment and evaluation metrics.

Conventions: pixel (u, v) is (column, row) with pixel centers on integer
coordinates; depth maps hold camera-frame z in meters with values <= 0 marking
invalid samples; poses are 4x4 camera-to-world matrices (x right, y down,
z forward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DimensionError, EmptyDenominatorError, InvalidSampleError

PX_THRESHOLDS = (1, 2, 5, 10, 25, 50)
CM_THRESHOLDS = (1, 2, 5, 10)
POSE_THRESHOLDS = (5, 15, 30)


@dataclass
class Camera:
    K: np.ndarray
    T: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def world_to_camera(self) -> np.ndarray:
        return invert_pose(self.T)

    def validate(self, tol: float = 1e-9) -> None:
        R = self.R
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidSampleError("camera rotation is not a proper orthonormal matrix")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise InvalidSampleError("focal lengths must be positive")


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def invert_pose(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def transform_points(T: np.ndarray, P: np.ndarray) -> np.ndarray:
    return P @ T[:3, :3].T + T[:3, 3]


def unproject(p, depth_value, K: np.ndarray) -> np.ndarray:
    """Lift pixel(s) (u, v) with z-depth d into the camera frame: d * K^-1 [u, v, 1]."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(depth_value, dtype=float)
    if np.any(d <= 0):
        raise InvalidSampleError(f"non-positive depth {d[d <= 0].ravel()[:3]}")
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    x = d * ((p[..., 0] - cx) / fx)
    y = d * ((p[..., 1] - cy) / fy)
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def project(P: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Camera-frame points (..., 3) to pixels (..., 2)."""
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    u = K[0, 0] * (P[..., 0] / z) + K[0, 2]
    v = K[1, 1] * (P[..., 1] / z) + K[1, 2]
    return np.stack([u, v], axis=-1)


def bilinear_depth(depth: np.ndarray, u: float, v: float) -> float:
    """Bilinear depth at (u, v); invalid neighbors are dropped and weights renormalized.

    Returns 0.0 when the location is out of bounds or no neighbor is valid.
    """
    h, w = depth.shape
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        return 0.0
    u0 = min(int(math.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(math.floor(v)), h - 2) if h > 1 else 0
    a, b = u - u0, v - v0
    total = 0.0
    weight = 0.0
    for dv, du, wt in ((0, 0, (1 - a) * (1 - b)), (0, 1, a * (1 - b)), (1, 0, (1 - a) * b), (1, 1, a * b)):
        vv, uu = min(v0 + dv, h - 1), min(u0 + du, w - 1)
        d = depth[vv, uu]
        if d > 0 and wt > 0:
            total += wt * d
            weight += wt
    return total / weight if weight > 0 else 0.0


def nearest_valid_depth(depth: np.ndarray, u: float, v: float) -> float:
    valid = np.argwhere(depth > 0)
    if valid.size == 0:
        raise InvalidSampleError("depth map has no valid samples")
    d2 = (valid[:, 1] - u) ** 2 + (valid[:, 0] - v) ** 2
    r, c = valid[int(np.argmin(d2))]
    return float(depth[r, c])


@dataclass
class TrackSet:
    points: np.ndarray  # (S, V, 2)
    visibility: np.ndarray  # (S, V) bool
    source_view: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.points.shape[:2] != self.visibility.shape or self.points.shape[-1] != 2:
            raise DimensionError(f"track points {self.points.shape} vs visibility {self.visibility.shape}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_views(self) -> int:
        return self.points.shape[1]

    def select_views(self, views) -> "TrackSet":
        views = list(views)
        return TrackSet(self.points[:, views], self.visibility[:, views], views.index(self.source_view))

    def to_rows(self) -> list[tuple]:
        rows = []
        for i in range(self.n_points):
            for v in range(self.n_views):
                u, vv = self.points[i, v]
                rows.append((i, v, float(u), float(vv), bool(self.visibility[i, v])))
        return rows


def gt_tracks(cams: list[Camera], seeds: np.ndarray, z_tol: float = 0.01, source_view: int = 0) -> TrackSet:
    """Reproject seed pixels of the source view into every view using GT depth and poses.

    A point is visible in a view when it projects inside the image and its
    projected depth agrees with the view's depth map to ``z_tol`` (relative).
    """
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    src = cams[source_view]
    h, w = src.depth.shape
    d0 = np.empty(len(seeds))
    for i, (u, v) in enumerate(seeds):
        d0[i] = bilinear_depth(src.depth, u, v)
        if d0[i] <= 0:
            raise InvalidSampleError(f"seed {i} at ({u}, {v}) lies on invalid depth")
    world = transform_points(src.T, unproject(seeds, d0, src.K))
    S, V = len(seeds), len(cams)
    points = np.zeros((S, V, 2))
    vis = np.zeros((S, V), dtype=bool)
    for v, cam in enumerate(cams):
        if v == source_view:
            points[:, v] = seeds
            vis[:, v] = True
            continue
        Pc = transform_points(cam.world_to_camera, world)
        z = Pc[:, 2]
        safe = np.where(z > 0, z, 1.0)
        uv = project(np.concatenate([Pc[:, :2], safe[:, None]], axis=1), cam.K)
        points[:, v] = uv
        hv, wv = cam.depth.shape
        for i in range(S):
            if z[i] <= 0:
                continue
            u, vv = uv[i]
            if not (0.0 <= u <= wv - 1 and 0.0 <= vv <= hv - 1):
                continue
            d = bilinear_depth(cam.depth, u, vv)
            vis[i, v] = d > 0 and abs(z[i] - d) <= z_tol * d
    return TrackSet(points, vis, source_view)


@dataclass
class TrackReport:
    ate2d_px: float
    acc_at_px: dict
    ate3d_cm: float
    acc_at_cm: dict
    n_visible: int
    n_depth_fallback: int = 0

    def to_json(self) -> dict:
        return {
            "ate2d_px": self.ate2d_px,
            "acc_at_px": {str(k): v for k, v in self.acc_at_px.items()},
            "ate3d_cm": self.ate3d_cm,
            "acc_at_cm": {str(k): v for k, v in self.acc_at_cm.items()},
            "n_visible": self.n_visible,
            "n_depth_fallback": self.n_depth_fallback,
        }


def track_errors(pred: TrackSet, gt: TrackSet, cams: list[Camera], include_source: bool = False):
    """Per-visible-point 2D (px) and 3D (m) errors, plus the number of depth fallbacks."""
    if pred.points.shape != gt.points.shape:
        raise DimensionError(f"pred tracks {pred.points.shape} vs gt {gt.points.shape}")
    e2d, e3d = [], []
    fallback = 0
    for v in range(gt.n_views):
        if v == gt.source_view and not include_source:
            continue
        cam = cams[v]
        for i in range(gt.n_points):
            if not gt.visibility[i, v]:
                continue
            pu, pv = pred.points[i, v]
            gu, gv = gt.points[i, v]
            du, dv = pu - gu, pv - gv
            e2d.append(math.sqrt(du * du + dv * dv))
            dg = bilinear_depth(cam.depth, gu, gv)
            if dg <= 0:
                dg = nearest_valid_depth(cam.depth, gu, gv)
            dp = bilinear_depth(cam.depth, pu, pv)
            if dp <= 0:
                dp = nearest_valid_depth(cam.depth, pu, pv)
                fallback += 1
            Pg = unproject((gu, gv), dg, cam.K)
            Pp = unproject((pu, pv), dp, cam.K)
            d = Pp - Pg
            e3d.append(math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))
    return np.array(e2d), np.array(e3d), fallback


def track_metrics(pred: TrackSet, gt: TrackSet, cams: list[Camera], px_thresholds=PX_THRESHOLDS,
                  cm_thresholds=CM_THRESHOLDS, include_source: bool = False) -> TrackReport:
    """ATE and Acc@k over ground-truth-visible points only (source view excluded by default)."""
    e2d, e3d, fallback = track_errors(pred, gt, cams, include_source)
    n = len(e2d)
    if n == 0:
        raise EmptyDenominatorError("track_metrics: no ground-truth visible points")
    acc_px = {k: 100.0 * int(np.sum(e2d < k)) / n for k in px_thresholds}
    acc_cm = {k: 100.0 * int(np.sum(e3d < k / 100.0)) / n for k in cm_thresholds}
    return TrackReport(math.fsum(e2d) / n, acc_px, math.fsum(e3d) / n * 100.0, acc_cm, n, fallback)


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


@dataclass
class Similarity:
    s: float
    R: np.ndarray
    t: np.ndarray
    rmse: float = 0.0

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(X) @ self.R.T) + self.t


def umeyama_align(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> Similarity:
    """Closed-form least-squares similarity ``s R x + t ~ y`` via the cross-covariance SVD."""
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise DimensionError(f"umeyama needs matching (M, 3) arrays, got {X.shape} and {Y.shape}")
    m = X.shape[0]
    if m < 3:
        raise AlignmentError(f"need at least 3 correspondences, got {m}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] <= 1e-12 * max(sx[0], 1e-300):
        raise AlignmentError("degenerate source configuration (collinear or coincident points)")
    cov = Yc.T @ Xc / m
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = (Xc * Xc).sum() / m
        s = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    res = Similarity(s, R, t)
    diff = res.apply(X) - Y
    res.rmse = float(np.sqrt((diff * diff).sum(axis=1).mean()))
    return res


# ---------------------------------------------------------------------------
# pointmaps
# ---------------------------------------------------------------------------


@dataclass
class PointmapReport:
    accuracy: float
    completeness: float
    overall: float
    l1: float | None

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "completeness": self.completeness, "overall": self.overall, "l1": self.l1}


def nearest_distances(A: np.ndarray, B: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact distance from every row of A to its nearest row of B."""
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        a = A[s : s + chunk]
        dx = a[:, None, 0] - B[None, :, 0]
        dy = a[:, None, 1] - B[None, :, 1]
        dz = a[:, None, 2] - B[None, :, 2]
        out[s : s + chunk] = np.sqrt((dx * dx + dy * dy + dz * dz).min(axis=1))
    return out


def pointmap_metrics(pred: np.ndarray, gt: np.ndarray, pred_valid: np.ndarray | None = None, align: bool = False,
                     with_scale: bool = True, compute_l1: bool = True) -> PointmapReport:
    """Accuracy (pred->gt NN), Completeness (gt->pred NN), their mean, and index-wise L1.

    With ``align`` the valid predictions are first Umeyama-aligned onto their
    index-corresponding ground-truth points.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    valid = np.ones(len(pred), dtype=bool) if pred_valid is None else np.asarray(pred_valid, dtype=bool).reshape(-1)
    if len(pred) == 0 or len(gt) == 0 or not valid.any():
        raise EmptyDenominatorError("pointmap_metrics needs non-empty clouds")
    same_size = len(pred) == len(gt)
    if align:
        if not same_size:
            raise DimensionError(f"alignment needs index-corresponding clouds, got {len(pred)} vs {len(gt)}")
        sim = umeyama_align(pred[valid], gt[valid], with_scale)
        pred = sim.apply(pred)
    if compute_l1 and not same_size:
        raise DimensionError(f"l1 needs equal-size clouds, got {len(pred)} vs {len(gt)}")
    p = pred[valid]
    acc = math.fsum(nearest_distances(p, gt)) / len(p)
    comp = math.fsum(nearest_distances(gt, p)) / len(gt)
    l1 = None
    if compute_l1:
        l1 = math.fsum(np.abs(p - gt[valid]).ravel()) / p.size
    return PointmapReport(acc, comp, (acc + comp) / 2.0, l1)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass
class PoseReport:
    r_at: dict
    t_at: dict
    auc_at: dict
    n_pairs: int
    n_skipped: int = 0
    rot_errors: np.ndarray = field(default=None, repr=False)
    trans_errors: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "t_at": {str(k): v for k, v in self.t_at.items()},
            "auc_at": {str(k): v for k, v in self.auc_at.items()},
            "n_pairs": self.n_pairs,
            "n_skipped": self.n_skipped,
        }


def rotation_angle_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, via the chord length (stable near zero)."""
    chord = math.sqrt(float(((R1 - R2) ** 2).sum()))
    return math.degrees(2.0 * math.asin(min(1.0, chord / math.sqrt(8.0))))


def direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    cross = np.cross(a, b)
    return math.degrees(math.atan2(math.sqrt(float(cross @ cross)), float(a @ b)))


def relative_pose(Ta: np.ndarray, Tb: np.ndarray) -> np.ndarray:
    """Pose of camera b expressed in camera a's frame."""
    return invert_pose(Ta) @ Tb


def pose_errors(pred: list, gt: list):
    """Rotation / translation-direction errors in degrees over all ordered view pairs."""
    if len(pred) != len(gt) or len(gt) < 2:
        raise DimensionError("pose_metrics needs matching lists of at least two poses")
    rot, trans = [], []
    skipped = 0
    n = len(gt)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            rg = relative_pose(gt[a], gt[b])
            rp = relative_pose(pred[a], pred[b])
            tg, tp = rg[:3, 3], rp[:3, 3]
            if np.linalg.norm(tg) < 1e-12:
                skipped += 1
                continue
            rot.append(rotation_angle_deg(rp[:3, :3], rg[:3, :3]))
            trans.append(90.0 if np.linalg.norm(tp) < 1e-12 else direction_angle_deg(tp, tg))
    return np.array(rot), np.array(trans), skipped


def pose_metrics(pred: list, gt: list, thresholds=POSE_THRESHOLDS) -> PoseReport:
    """R@K / T@K (percent of pairs under K degrees) and AUC@K on max(rot, trans) error."""
    pred = [np.asarray(p, dtype=float) for p in pred]
    gt = [np.asarray(g, dtype=float) for g in gt]
    rot, trans, skipped = pose_errors(pred, gt)
    n = len(rot)
    if n == 0:
        raise EmptyDenominatorError("pose_metrics: every pair was skipped")
    worst = np.maximum(rot, trans)
    r_at = {k: 100.0 * int(np.sum(rot < k)) / n for k in thresholds}
    t_at = {k: 100.0 * int(np.sum(trans < k)) / n for k in thresholds}
    auc_at = {}
    for k in thresholds:
        curve = [int(np.sum(worst < t)) / n for t in range(1, int(k) + 1)]
        auc_at[k] = 100.0 * math.fsum(curve) / len(curve)
    return PoseReport(r_at, t_at, auc_at, n, skipped, rot, trans)
