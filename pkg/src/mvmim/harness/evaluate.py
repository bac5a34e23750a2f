"""Evaluation drivers: zero-shot tracking, the pointmap/pose probe, runtime bench and PCA dumps."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..backbone import BackboneConfig, BackboneState, block_param_shapes, forward, init_params, linear, run_blocks
from ..correspondence import CorrespondenceConfig, attention_tracks, nn_feature_tracks, pca_project
from ..errors import ConfigError, DimensionError, EmptyDenominatorError
from ..geometry import (Camera, PointmapReport, PoseReport, TrackSet, bilinear_depth, gt_tracks, invert_pose,
                        pointmap_metrics, pose_metrics, track_errors, transform_points, unproject)
from ..masking import MaskConfig, MaskPlan, PatchGrid, mask_statistics, sample_mask_plan
from ..synthdata import SceneSpec, generate_scene, sample_spec, scene_seed
from .io import Scene, write_ppm
from .optim import AdamWConfig, AdamWState, adamw_step, clip_grad_norm, lr_at

METHODS = ("attention", "nn_features")


def as_scene(obj) -> Scene:
    """Accept a loaded Scene or an in-memory MultiViewBatch."""
    if isinstance(obj, Scene):
        return obj
    return Scene(obj.images, obj.cameras, None, obj.spec.to_dict() if obj.spec is not None else {})


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------


def sample_seeds(cam: Camera, n: int, rng: np.random.Generator, margin: int = 0) -> np.ndarray:
    """Integer pixels on valid depth in the source view."""
    h, w = cam.depth.shape
    rows, cols = np.nonzero(cam.depth[margin : h - margin, margin : w - margin] > 0)
    if len(rows) == 0:
        raise EmptyDenominatorError("source view has no valid depth")
    pick = rng.choice(len(rows), size=min(n, len(rows)), replace=False)
    return np.stack([cols[pick] + margin, rows[pick] + margin], axis=1).astype(float)


@dataclass
class TrackEval:
    """Per-point errors pooled over scenes for the scored pair."""

    e2d: list = field(default_factory=list)
    e3d: list = field(default_factory=list)
    baseline_e2d: list = field(default_factory=list)
    per_scene_ate: list = field(default_factory=list)
    n_fallback: int = 0

    def acc(self, k: float, baseline: bool = False) -> float:
        e = np.array(self.baseline_e2d if baseline else self.e2d)
        if e.size == 0:
            raise EmptyDenominatorError("no visible points")
        return 100.0 * int(np.sum(e < k)) / e.size

    @property
    def ate2d(self) -> float:
        if not self.e2d:
            raise EmptyDenominatorError("no visible points")
        return math.fsum(self.e2d) / len(self.e2d)

    @property
    def ate3d_cm(self) -> float:
        return math.fsum(self.e3d) / len(self.e3d) * 100.0

    def report(self, patch_size: int) -> dict:
        ks = (1, 2, 5, 10, 25, 50)
        return {
            "ate2d_px": self.ate2d,
            "ate3d_cm": self.ate3d_cm,
            "acc_at_px": {str(k): self.acc(k) for k in ks},
            "acc_at_patch": self.acc(patch_size),
            "uniform_baseline_acc_at_patch": self.acc(patch_size, baseline=True),
            "uniform_baseline_ate2d_px": math.fsum(self.baseline_e2d) / len(self.baseline_e2d),
            "n_visible": len(self.e2d),
            "n_scenes": len(self.per_scene_ate),
            "n_depth_fallback": self.n_fallback,
        }


def uniform_attention_point(grid: PatchGrid) -> np.ndarray:
    """Soft-argmax of a uniform distribution over patches: the mean patch center."""
    return grid.centers().mean(axis=0)


def eval_tracks(state: BackboneState, scenes, method: str = "attention", context_views: int = 0,
                n_seeds: int = 16, seed: int = 0, pair=(0, 1), cfg: CorrespondenceConfig | None = None) -> TrackEval:
    """Track seeds of ``pair[0]`` into ``pair[1]`` with ``context_views`` extra views in the forward pass.

    Context views are the views after the pair in scene order. Only the scored
    pair enters the metric, over ground-truth-visible points.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown tracking method {method!r}; expected one of {METHODS}")
    grid = state.config.grid
    out = TrackEval()
    center = uniform_attention_point(grid)
    for idx, sc in enumerate(scenes):
        sc = as_scene(sc)
        others = [v for v in range(sc.n_views) if v not in pair]
        if context_views > len(others):
            raise DimensionError(f"scene has {sc.n_views} views; cannot add {context_views} context views")
        views = list(pair) + others[:context_views]
        cams = [sc.cameras[v] for v in views]
        images = sc.images[views]
        rng = np.random.default_rng(scene_seed(seed, idx))
        seeds = sample_seeds(cams[0], n_seeds, rng)
        gt = gt_tracks(cams, seeds).select_views([0, 1])
        if method == "attention":
            pred = attention_tracks(state, images, seeds, cfg).select_views([0, 1])
        else:
            with T.no_grad():
                fo = forward(images, MaskPlan.unmasked(len(views), grid.n_patches), state)
            pred = nn_feature_tracks(fo.features.data, seeds, grid).select_views([0, 1])
        e2d, e3d, fb = track_errors(pred, gt, cams[:2])
        base = TrackSet(np.broadcast_to(center, gt.points.shape).copy(), gt.visibility, 0)
        base.points[:, 0] = gt.points[:, 0]
        b2d, _, _ = track_errors(base, gt, cams[:2])
        out.e2d.extend(e2d.tolist())
        out.e3d.extend(e3d.tolist())
        out.baseline_e2d.extend(b2d.tolist())
        out.n_fallback += fb
        out.per_scene_ate.append(math.fsum(e2d) / len(e2d) if len(e2d) else float("nan"))
    return out


def eval_scene_specs(n_scenes: int, seed: int, n_views: int = 8, image_size: int = 64, kinds=("plane", "two_plane"),
                     template: SceneSpec | None = None) -> list[SceneSpec]:
    template = replace(template or SceneSpec(), image_size=image_size, n_views=n_views)
    specs = []
    for i in range(n_scenes):
        rng = np.random.default_rng(scene_seed(seed, i))
        specs.append(replace(sample_spec(template, rng, kinds), n_views=n_views))
    return specs


def make_eval_scenes(n_scenes: int, seed: int, **kw) -> list:
    return [generate_scene(s) for s in eval_scene_specs(n_scenes, seed, **kw)]


# ---------------------------------------------------------------------------
# pointmap / pose probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    n_blocks: int = 4
    steps: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    pose_weight: float = 1.0
    feature_block: int | None = None  # None: backbone default
    seed: int = 0
    init_std: float = 0.02


def probe_param_shapes(bcfg: BackboneConfig, pcfg: ProbeConfig) -> dict:
    d = bcfg.dim
    shapes = {"probe.pos_weight": (4, d), "probe.pos_bias": (d,)}
    for b in range(pcfg.n_blocks):
        shapes.update(block_param_shapes(f"probe.blocks.{b}", d, d * bcfg.mlp_ratio))
    shapes.update({"probe.norm.gain": (d,), "probe.norm.bias": (d,),
                   "probe.point_weight": (d, 3), "probe.point_bias": (3,),
                   "probe.pose_weight": (d, 9), "probe.pose_bias": (9,)})
    return shapes


def init_probe(bcfg: BackboneConfig, pcfg: ProbeConfig) -> dict:
    if pcfg.n_blocks < 2 or pcfg.n_blocks % 2:
        raise ConfigError(f"probe decoder needs an even number of blocks >= 2, got {pcfg.n_blocks}")
    params = init_params(probe_param_shapes(bcfg, pcfg), np.random.default_rng(pcfg.seed), pcfg.init_std)
    # identity-ish 6D start so the first rotations are well conditioned
    params["probe.pose_bias"].data[:6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    return params


def _pos_features(grid: PatchGrid) -> np.ndarray:
    rc = grid.coords().astype(float)
    r = 2.0 * rc[:, 0] / max(grid.grid_h - 1, 1) - 1.0
    c = 2.0 * rc[:, 1] / max(grid.grid_w - 1, 1) - 1.0
    return np.stack([r, c, r * c, r * r + c * c], axis=1)


def _cross(a, b):
    a0, a1, a2 = a[:, 0], a[:, 1], a[:, 2]
    b0, b1, b2 = b[:, 0], b[:, 1], b[:, 2]
    return T.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=1)


def _normalize(x):
    n = T.sqrt(T.tsum(x * x, axis=1, keepdims=True) + 1e-12)
    return x / T.broadcast_to(n, x.shape)


def rotation_from_6d(x):
    """(V, 6) -> (V, 3, 3) rotation matrices by Gram-Schmidt; columns are the orthonormal basis."""
    a1, a2 = x[:, 0:3], x[:, 3:6]
    b1 = _normalize(a1)
    proj = T.tsum(b1 * a2, axis=1, keepdims=True)
    b2 = _normalize(a2 - T.broadcast_to(proj, a2.shape) * b1)
    b3 = _cross(b1, b2)
    return T.stack([b1, b2, b3], axis=2)


def probe_forward(features: np.ndarray, params: dict, bcfg: BackboneConfig, pcfg: ProbeConfig):
    """Frozen features (V, N, d) -> (points (V, N, 3) in view-0 frame, R (V,3,3), t (V,3))."""
    grid = bcfg.grid
    V, N, d = features.shape
    pos = linear(_pos_features(grid), params["probe.pos_weight"], params["probe.pos_bias"])
    x = T.as_tensor(features) + pos
    x, _, _ = run_blocks(x, grid, params, "probe.blocks", pcfg.n_blocks, bcfg.n_heads, bcfg.rope_base, bcfg.ln_eps)
    x = T.layer_norm(x, params["probe.norm.gain"], params["probe.norm.bias"], bcfg.ln_eps)
    pts = linear(x, params["probe.point_weight"], params["probe.point_bias"])
    pooled = T.mean(x, axis=1)
    pose = linear(pooled, params["probe.pose_weight"], params["probe.pose_bias"])
    R = rotation_from_6d(pose[:, 0:6])
    t = pose[:, 6:9]
    return pts, R, t


@dataclass
class ProbeSample:
    features: np.ndarray  # (V, N, d)
    points: np.ndarray  # (V, N, 3) patch-center points in view-0 camera frame
    valid: np.ndarray  # (V, N)
    poses: np.ndarray  # (V, 4, 4) camera-to-view-0


def probe_targets(scene, patch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patch-center points (from GT depth) and poses, both in view 0's camera frame."""
    sc = as_scene(scene)
    h, w = sc.images.shape[1:3]
    grid = PatchGrid(h, w, patch_size)
    centers = grid.centers()
    ref = invert_pose(sc.cameras[0].T)
    pts, valid, poses = [], [], []
    for cam in sc.cameras:
        d = np.array([bilinear_depth(cam.depth, u, v) for u, v in centers])
        ok = d > 0
        P = np.zeros((len(centers), 3))
        if ok.any():
            P[ok] = transform_points(ref @ cam.T, unproject(centers[ok], d[ok], cam.K))
        pts.append(P)
        valid.append(ok)
        poses.append(ref @ cam.T)
    return np.stack(pts), np.stack(valid), np.stack(poses)


def prepare_probe_samples(state: BackboneState, scenes, pcfg: ProbeConfig) -> list[ProbeSample]:
    cfg = state.config
    out = []
    for sc in scenes:
        sc = as_scene(sc)
        with T.no_grad():
            fo = forward(sc.images, MaskPlan.unmasked(sc.n_views, cfg.grid.n_patches), state,
                         feature_block=pcfg.feature_block)
        pts, valid, poses = probe_targets(sc, cfg.patch_size)
        out.append(ProbeSample(fo.features.data.copy(), pts, valid, poses))
    return out


def probe_loss(sample: ProbeSample, params: dict, bcfg: BackboneConfig, pcfg: ProbeConfig):
    pts, R, t = probe_forward(sample.features, params, bcfg, pcfg)
    m = sample.valid
    diff = T.getitem(pts, m) - sample.points[m]
    point_loss = T.mean(T.tsum(diff * diff, axis=-1))
    rot_loss = T.mean(T.tsum(T.square(R - sample.poses[:, :3, :3]).reshape(len(m), 9), axis=-1))
    trans_loss = T.mean(T.tsum(T.square(t - sample.poses[:, :3, 3]), axis=-1))
    return point_loss + (rot_loss + trans_loss) * pcfg.pose_weight


@dataclass
class ProbeResult:
    pointmap: PointmapReport
    pose: PoseReport
    per_scene: list
    params: dict
    losses: list

    def summary(self) -> dict:
        return {"pointmap": self.pointmap.to_json(), "pose": self.pose.to_json(), "final_loss": self.losses[-1] if self.losses else None}


def train_probe(samples: list[ProbeSample], bcfg: BackboneConfig, pcfg: ProbeConfig) -> tuple[dict, list]:
    params = init_probe(bcfg, pcfg)
    arrays = {n: p.data for n, p in params.items()}
    opt = AdamWState()
    ocfg = AdamWConfig(pcfg.lr, (0.9, 0.95), 1e-8, pcfg.weight_decay)
    rng = np.random.default_rng(pcfg.seed)
    losses = []
    for step in range(1, pcfg.steps + 1):
        s = samples[int(rng.integers(len(samples)))]
        loss = probe_loss(s, params, bcfg, pcfg)
        T.backward(loss)
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        for p in params.values():
            p.grad = None
        clip_grad_norm(grads, pcfg.grad_clip)
        lr = lr_at(step, pcfg.steps, pcfg.lr, pcfg.warmup_frac)
        adamw_step(arrays, grads, opt, ocfg, step, lr)
        losses.append(loss.item())
    return params, losses


def evaluate_probe(samples: list[ProbeSample], params: dict, bcfg: BackboneConfig, pcfg: ProbeConfig):
    """Pool Umeyama-aligned pointmap metrics and pose metrics over eval scenes (scene-averaged)."""
    per_scene = []
    for s in samples:
        with T.no_grad():
            pts, R, t = probe_forward(s.features, params, bcfg, pcfg)
        pm = pointmap_metrics(pts.data.reshape(-1, 3), s.points.reshape(-1, 3), s.valid.reshape(-1), align=True)
        poses = []
        for v in range(len(R.data)):
            P = np.eye(4)
            P[:3, :3], P[:3, 3] = R.data[v], t.data[v]
            poses.append(P)
        pr = pose_metrics(poses, list(s.poses))
        per_scene.append((pm, pr))
    n = len(per_scene)
    pm = PointmapReport(*(math.fsum(getattr(p, f) for p, _ in per_scene) / n
                          for f in ("accuracy", "completeness", "overall", "l1")))
    keys = per_scene[0][1].r_at.keys()
    rot = np.concatenate([r.rot_errors for _, r in per_scene])
    trans = np.concatenate([r.trans_errors for _, r in per_scene])
    pr = _pooled_pose(rot, trans, tuple(keys), sum(r.n_skipped for _, r in per_scene))
    return pm, pr, per_scene


def _pooled_pose(rot, trans, thresholds, skipped) -> PoseReport:
    n = len(rot)
    worst = np.maximum(rot, trans)
    r_at = {k: 100.0 * int(np.sum(rot < k)) / n for k in thresholds}
    t_at = {k: 100.0 * int(np.sum(trans < k)) / n for k in thresholds}
    auc = {k: 100.0 * math.fsum(int(np.sum(worst < t)) / n for t in range(1, int(k) + 1)) / int(k) for k in thresholds}
    return PoseReport(r_at, t_at, auc, n, skipped, rot, trans)


def probe_pointmap(state: BackboneState, train_scenes, eval_scenes, pcfg: ProbeConfig | None = None) -> ProbeResult:
    """Frozen backbone, small alternating-attention decoder with point and pose heads."""
    pcfg = pcfg or ProbeConfig()
    if pcfg.feature_block is not None and not 0 <= pcfg.feature_block < state.config.n_blocks:
        raise ConfigError(f"probe feature_block {pcfg.feature_block} outside backbone with {state.config.n_blocks} blocks")
    train = prepare_probe_samples(state, train_scenes, pcfg)
    evals = prepare_probe_samples(state, eval_scenes, pcfg)
    params, losses = train_probe(train, state.config, pcfg)
    pm, pr, per_scene = evaluate_probe(evals, params, state.config, pcfg)
    return ProbeResult(pm, pr, per_scene, params, losses)


# ---------------------------------------------------------------------------
# bench, PCA, mask statistics
# ---------------------------------------------------------------------------


def bench_forward(state: BackboneState, view_counts, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Median wall time of one unmasked forward pass per view count."""
    cfg = state.config
    rng = np.random.default_rng(seed)
    rows = []
    for V in view_counts:
        images = rng.random((V, cfg.image_size, cfg.image_size, 3))
        plan = MaskPlan.unmasked(V, cfg.grid.n_patches)
        times = []
        with T.no_grad():
            forward(images, plan, state)  # warm-up
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                forward(images, plan, state)
                times.append(time.perf_counter() - t0)
        rows.append({"views": int(V), "median_s": statistics.median(times), "times_s": times})
    return rows


def pca_images(state: BackboneState, images: np.ndarray, block: int | None = None) -> np.ndarray:
    """Per-view (grid_h, grid_w, 3) RGB from a joint PCA of the chosen block's features."""
    cfg = state.config
    with T.no_grad():
        fo = forward(images, MaskPlan.unmasked(len(images), cfg.grid.n_patches), state, feature_block=block)
    res = pca_project(fo.features.data)
    return res.rgb.reshape(len(images), cfg.grid.grid_h, cfg.grid.grid_w, 3)


def dump_pca(state: BackboneState, scene, out_dir, block: int | None = None) -> list[Path]:
    sc = as_scene(scene)
    rgb = pca_images(state, sc.images, block)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for v, img in enumerate(rgb):
        p = out / f"pca_{v:03d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths


def mask_stats(config: MaskConfig, n_plans: int, n_views: int, grid: PatchGrid, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    plans = [sample_mask_plan(config, n_views, grid, rng) for _ in range(n_plans)]
    stats = mask_statistics(plans, grid)
    out = {}
    for k, s in stats.items():
        out[k] = s if isinstance(s, (int, float)) else s.__dict__
    return out
