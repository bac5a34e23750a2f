"""Zero-shot correspondences from global attention, the nearest-neighbor feature
baseline, and joint PCA projection of features to RGB."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneState, forward
from .errors import ConfigError, DimensionError, DomainError
from .geometry import TrackSet
from .masking import MaskPlan, PatchGrid


@dataclass
class CorrespondenceConfig:
    layer: int | None = None  # global block index; None = last global block
    temperature: float = 0.1
    confidence_floor: float | None = None  # default 2 / N


@dataclass
class CorrelationVolume:
    weights: np.ndarray  # (S, V, N): per seed and target view, renormalized attention over target patches
    layer_index: int
    temperature: float


def seed_patches(seeds: np.ndarray, grid: PatchGrid) -> np.ndarray:
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    u, v = seeds[:, 0], seeds[:, 1]
    if np.any((u < 0) | (v < 0) | (u >= grid.image_w) | (v >= grid.image_h)):
        raise DomainError("seed outside the image grid")
    return (np.floor(v / grid.patch_size).astype(int) * grid.grid_w + np.floor(u / grid.patch_size).astype(int))


def sharpen(weights: np.ndarray, temperature: float) -> np.ndarray:
    """Raise a distribution (last axis) to the power 1/temperature and renormalize."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    with np.errstate(divide="ignore"):
        logw = np.log(weights) / temperature
    logw -= logw.max(axis=-1, keepdims=True)
    e = np.exp(logw)
    return e / e.sum(axis=-1, keepdims=True)


def soft_argmax(weights: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Expected (u, v) under ``weights`` (..., N) over patch centers (N, 2)."""
    return weights @ centers


def correlation_volume(attention: np.ndarray, seeds: np.ndarray, grid: PatchGrid, n_views: int, layer_index: int,
                       temperature: float, source_view: int = 0) -> CorrelationVolume:
    """Restrict each seed patch's attention row to every view and renormalize."""
    n = grid.n_patches
    rows = attention[source_view * n + seed_patches(seeds, grid)]  # (S, V*N)
    per_view = rows.reshape(len(rows), n_views, n)
    per_view = per_view / per_view.sum(axis=-1, keepdims=True)
    return CorrelationVolume(per_view, layer_index, temperature)


def tracks_from_attention(attention: np.ndarray, seeds: np.ndarray, grid: PatchGrid, n_views: int,
                          cfg: CorrespondenceConfig, layer_index: int = -1, source_view: int = 0) -> TrackSet:
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    vol = correlation_volume(attention, seeds, grid, n_views, layer_index, cfg.temperature, source_view)
    floor = 2.0 / grid.n_patches if cfg.confidence_floor is None else cfg.confidence_floor
    points = soft_argmax(sharpen(vol.weights, cfg.temperature), grid.centers())
    vis = vol.weights.max(axis=-1) >= floor
    points[:, source_view] = seeds
    vis[:, source_view] = True
    return TrackSet(points, vis, source_view)


def attention_tracks(state: BackboneState, images: np.ndarray, seeds: np.ndarray,
                     cfg: CorrespondenceConfig | None = None, source_view: int = 0) -> TrackSet:
    """Single unmasked forward pass, then soft-argmax over the chosen global block's attention."""
    cfg = cfg or CorrespondenceConfig()
    if cfg.temperature <= 0:
        raise DomainError(f"temperature must be positive, got {cfg.temperature}")
    conf = state.config
    grid = conf.grid
    seed_patches(seeds, grid)
    global_blocks = [b for b in range(conf.n_blocks) if conf.block_kind(b) == "global"]
    layer = global_blocks[-1] if cfg.layer is None else cfg.layer
    if layer not in global_blocks:
        raise ConfigError(f"block {layer} is not a global attention block")
    V = len(images)
    with T.no_grad():
        out = forward(images, MaskPlan.unmasked(V, grid.n_patches), state, record_attention=True)
    return tracks_from_attention(out.attention_record[layer], seeds, grid, V, cfg, layer, source_view)


def nn_feature_tracks(features: np.ndarray, seeds: np.ndarray, grid: PatchGrid, source_view: int = 0) -> TrackSet:
    """Pairwise cosine nearest neighbor of each seed patch in every other view.

    Ties go to the lowest patch index.
    """
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 3 or feats.shape[1] != grid.n_patches:
        raise DimensionError(f"features {feats.shape} do not match grid with {grid.n_patches} patches")
    norms = np.linalg.norm(feats, axis=-1)
    zero = np.argwhere(norms == 0)
    if len(zero):
        v, j = zero[0]
        raise DomainError(f"zero feature vector at view {v}, patch {j}")
    unit = feats / norms[..., None]
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    src = unit[source_view, seed_patches(seeds, grid)]  # (S, d)
    centers = grid.centers()
    V = feats.shape[0]
    points = np.zeros((len(seeds), V, 2))
    for v in range(V):
        if v == source_view:
            points[:, v] = seeds
            continue
        sim = src @ unit[v].T
        points[:, v] = centers[np.argmax(sim, axis=1)]
    return TrackSet(points, np.ones((len(seeds), V), dtype=bool), source_view)


@dataclass
class PcaResult:
    rgb: np.ndarray  # (..., N, 3) in [0, 1]
    components: np.ndarray  # (k, d)
    explained_variance: np.ndarray  # (k,)
    rank_deficient: bool


def pca_project(features: np.ndarray, rank_tol: float = 1e-10) -> PcaResult:
    """Joint PCA over all tokens of all views, top-3 components min-max scaled per channel.

    Signs are fixed so the largest-magnitude loading of each component is positive.
    """
    feats = np.asarray(features, dtype=float)
    lead = feats.shape[:-1]
    X = feats.reshape(-1, feats.shape[-1])
    if X.shape[0] < 3:
        raise DimensionError("pca_project needs at least 3 tokens")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], 0.0) if evals.size else 0.0
    k = int(np.sum(evals[:3] > rank_tol * max(scale, 1e-300)))
    comps = evecs[:, :k].T.copy()
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] *= -1
    proj = Xc @ comps.T
    rgb = np.zeros((X.shape[0], 3))
    for i in range(k):
        lo, hi = proj[:, i].min(), proj[:, i].max()
        rgb[:, i] = (proj[:, i] - lo) / (hi - lo) if hi > lo else 0.0
    deficient = k < 3
    if deficient:
        warnings.warn(f"features have rank {k} < 3; missing PCA channels are zero", RuntimeWarning, stacklevel=2)
    return PcaResult(rgb.reshape(lead + (3,)), comps, evals[:k], deficient)
