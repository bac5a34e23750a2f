"""Patchification and multi-view mask sampling.

Three per-view strategies are supported: uniformly random patches at a high
ratio, one axis-aligned rectangle, and one filled ellipse. A configurable number
of reference views stay fully visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, DimensionError

STRATEGIES = ("random", "rectangle", "ellipse")
REFERENCE = "reference"

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch_size: int

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.image_h % p or self.image_w % p:
            raise ConfigError(f"patch size {p} does not divide image {self.image_h}x{self.image_w}")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def index(self, row: int, col: int) -> int:
        return row * self.grid_w + col

    def row_col(self, j: int) -> tuple[int, int]:
        return divmod(j, self.grid_w)

    def coords(self) -> np.ndarray:
        """(N, 2) integer (row, col) of every patch."""
        rows, cols = np.divmod(np.arange(self.n_patches), self.grid_w)
        return np.stack([rows, cols], axis=1)

    def centers(self) -> np.ndarray:
        """(N, 2) pixel (u, v) of every patch center; pixel centers sit on integers."""
        rc = self.coords().astype(float)
        half = (self.patch_size - 1) / 2.0
        return np.stack([rc[:, 1] * self.patch_size + half, rc[:, 0] * self.patch_size + half], axis=1)

    def patch_of_pixel(self, u: float, v: float) -> int:
        col = int(np.clip(np.floor(u / self.patch_size), 0, self.grid_w - 1))
        row = int(np.clip(np.floor(v / self.patch_size), 0, self.grid_h - 1))
        return self.index(row, col)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (N, p*p*3); each row is one patch, row-major pixels, RGB interleaved."""
    image = np.asarray(image)
    h, w, c = image.shape
    grid = PatchGrid(h, w, patch_size)
    p = patch_size
    x = image.reshape(grid.grid_h, p, grid.grid_w, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(grid.n_patches, p * p * c)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    x = np.asarray(patches).reshape(grid.grid_h, grid.grid_w, p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(grid.image_h, grid.image_w, 3)


@dataclass
class MaskConfig:
    random_ratio: float = 0.90
    block_ratio: float = 0.75
    strategy_mix: dict = field(default_factory=lambda: {"random": 0.5, "rectangle": 0.25, "ellipse": 0.25})
    n_reference: int = 1
    seed: int = 0
    band: float = 0.05
    max_attempts: int = 100

    def validate(self, n_views: int | None = None) -> None:
        for name in ("random_ratio", "block_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"{name}={r} outside [0, 1]")
        unknown = set(self.strategy_mix) - set(STRATEGIES)
        if unknown:
            raise ConfigError(f"unknown mask strategies {sorted(unknown)}")
        if any(v < 0 for v in self.strategy_mix.values()) or abs(sum(self.strategy_mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"strategy_mix must be a probability vector, got {self.strategy_mix}")
        if self.n_reference < 0:
            raise ConfigError("n_reference must be non-negative")
        if n_views is not None and self.n_reference >= n_views:
            raise ConfigError(f"n_reference={self.n_reference} must be < number of views {n_views}")


@dataclass
class MaskPlan:
    masked: np.ndarray  # (V, N) bool, True = masked
    reference_views: frozenset
    strategy_used: list

    @property
    def n_views(self) -> int:
        return self.masked.shape[0]

    def permute(self, perm) -> "MaskPlan":
        """Plan for views reordered so that new view k is old view perm[k]."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return MaskPlan(
            self.masked[perm].copy(),
            frozenset(inv[v] for v in self.reference_views),
            [self.strategy_used[p] for p in perm],
        )

    def to_json(self) -> dict:
        return {
            "masked": [np.flatnonzero(row).tolist() for row in self.masked],
            "reference_views": sorted(int(v) for v in self.reference_views),
            "strategy_used": list(self.strategy_used),
        }

    @classmethod
    def from_json(cls, obj: dict, n_patches: int) -> "MaskPlan":
        masked = np.zeros((len(obj["masked"]), n_patches), dtype=bool)
        for v, idx in enumerate(obj["masked"]):
            masked[v, idx] = True
        return cls(masked, frozenset(obj["reference_views"]), list(obj["strategy_used"]))

    @classmethod
    def unmasked(cls, n_views: int, n_patches: int) -> "MaskPlan":
        return cls(np.zeros((n_views, n_patches), dtype=bool), frozenset(), ["random"] * n_views)


def _random_mask(ratio: float, grid: PatchGrid, rng: np.random.Generator) -> np.ndarray:
    n = grid.n_patches
    m = np.zeros(n, dtype=bool)
    m[rng.choice(n, size=round_half_up(ratio * n), replace=False)] = True
    return m


def _is_single_component(mask2d: np.ndarray) -> bool:
    _, count = ndimage.label(mask2d, structure=_FOUR_CONNECTED)
    return count == 1


def _rectangle_mask(ratio: float, grid: PatchGrid, rng: np.random.Generator) -> np.ndarray:
    gh, gw = grid.grid_h, grid.grid_w
    target = round_half_up(ratio * grid.n_patches)
    aspect = math.exp(rng.uniform(math.log(1 / 3), math.log(3)))  # width / height
    h = int(np.clip(round(math.sqrt(target / aspect)), 1, gh))
    w = int(np.clip(round(target / h), 1, gw))
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    m = np.zeros((gh, gw), dtype=bool)
    m[top : top + h, left : left + w] = True
    return m.reshape(-1)


def _ellipse_mask(ratio: float, grid: PatchGrid, rng: np.random.Generator) -> np.ndarray:
    """Random center, aspect and orientation; the scale is solved so the clipped
    ellipse covers as close to the target patch count as the grid allows."""
    gh, gw = grid.grid_h, grid.grid_w
    target = round_half_up(ratio * grid.n_patches)
    cy, cx = rng.uniform(0, gh), rng.uniform(0, gw)
    aspect = math.exp(rng.uniform(math.log(1 / 3), math.log(3)))
    theta = rng.uniform(0, math.pi)
    rows, cols = np.mgrid[0:gh, 0:gw]
    dy, dx = rows + 0.5 - cy, cols + 0.5 - cx
    c, s = math.cos(theta), math.sin(theta)
    # normalized radius for unit semi-minor axis; the patch is inside if r <= scale
    a_dir = (dx * c + dy * s) / math.sqrt(aspect)
    b_dir = (-dx * s + dy * c) * math.sqrt(aspect)
    r = np.sqrt(a_dir**2 + b_dir**2).reshape(-1)
    order = np.sort(r)
    k = min(max(target, 1), r.size)
    scale = order[k - 1]
    return r <= scale


_SAMPLERS = {"rectangle": _rectangle_mask, "ellipse": _ellipse_mask}


def sample_block_mask(kind: str, ratio: float, grid: PatchGrid, rng: np.random.Generator, band: float = 0.05,
                      max_attempts: int = 100) -> tuple[np.ndarray, str]:
    """Block mask accepted within ``ratio +- band`` and 4-connected; falls back to random."""
    sampler = _SAMPLERS[kind]
    for _ in range(max_attempts):
        m = sampler(ratio, grid, rng)
        realized = m.mean()
        if abs(realized - ratio) <= band + 1e-12 and m.any() and _is_single_component(m.reshape(grid.grid_h, grid.grid_w)):
            return m, kind
    return None, "random"


def sample_mask_plan(config: MaskConfig, n_views: int, grid: PatchGrid, rng: np.random.Generator) -> MaskPlan:
    if n_views < 1:
        raise ConfigError("need at least one view")
    config.validate(n_views)
    refs = frozenset(int(v) for v in rng.choice(n_views, size=config.n_reference, replace=False))
    names = list(config.strategy_mix)
    probs = np.array([config.strategy_mix[k] for k in names], dtype=float)
    masked = np.zeros((n_views, grid.n_patches), dtype=bool)
    used = []
    for v in range(n_views):
        if v in refs:
            used.append(REFERENCE)
            continue
        kind = names[int(rng.choice(len(names), p=probs))]
        m = None
        if kind != "random":
            m, kind = sample_block_mask(kind, config.block_ratio, grid, rng, config.band, config.max_attempts)
        if m is None:
            m = _random_mask(config.random_ratio, grid, rng)
        masked[v] = m
        used.append(kind)
    return MaskPlan(masked, refs, used)


def apply_mask(tokens, plan: MaskPlan, mask_token):
    """Replace masked token rows by the shared ``mask_token``."""
    tokens = T.as_tensor(tokens)
    mask_token = T.as_tensor(mask_token)
    if tokens.shape[:2] != plan.masked.shape or mask_token.shape != tokens.shape[-1:]:
        raise DimensionError(f"tokens {tokens.shape} / mask {plan.masked.shape} / mask_token {mask_token.shape} disagree")
    if not plan.masked.any():
        return tokens
    cond = np.broadcast_to(plan.masked[..., None], tokens.shape)
    return T.where(cond, T.broadcast_to(mask_token, tokens.shape), tokens)


@dataclass
class StrategyStats:
    count: int
    mean_ratio: float
    std_ratio: float
    single_component: int | None = None  # block strategies: how many samples had exactly one component


def mask_statistics(plans, grid: PatchGrid) -> dict:
    """Per-strategy realized mask fraction and, for block strategies, contiguity counts."""
    plans = list(plans)
    if not plans:
        raise ValueError("mask_statistics needs at least one plan")
    ratios: dict[str, list] = {}
    connected: dict[str, int] = {}
    reference_violations = 0
    for plan in plans:
        for v, kind in enumerate(plan.strategy_used):
            row = plan.masked[v]
            if kind == REFERENCE:
                reference_violations += int(row.any())
                continue
            ratios.setdefault(kind, []).append(int(row.sum()))
            if kind in _SAMPLERS:
                connected[kind] = connected.get(kind, 0) + int(_is_single_component(row.reshape(grid.grid_h, grid.grid_w)))
    out = {}
    n_p = grid.n_patches
    for kind, counts in ratios.items():
        # integer moments keep deterministic-count strategies exact (std 0, mean k/N)
        n, s1, s2 = len(counts), sum(counts), sum(c * c for c in counts)
        var = (n * s2 - s1 * s1) / (n * n * n_p * n_p)
        out[kind] = StrategyStats(n, s1 / (n * n_p), math.sqrt(max(var, 0.0)), connected.get(kind))
    out["reference_violations"] = reference_violations
    return out
