"""Alternating-attention transformer over multi-view patch tokens.

Blocks alternate frame-wise attention (tokens of one view) and global attention
(all views jointly). Positions enter only through 2D rotary embeddings built
from each token's (row, col) on its own view's patch grid, so nothing in the
network depends on the view index and the forward pass is equivariant to view
permutations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .masking import MaskPlan, PatchGrid, apply_mask, patchify


@dataclass
class BackboneConfig:
    dim: int = 128
    n_heads: int = 4
    n_blocks: int = 8
    patch_size: int = 8
    image_size: int = 64
    mlp_ratio: int = 4
    rope_base: float = 100.0
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def validate(self) -> None:
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 4:
            raise ConfigError(f"head dim {self.dim // self.n_heads} must be divisible by 4 for 2D RoPE")
        if self.n_blocks < 2 or self.n_blocks % 2:
            raise ConfigError(f"n_blocks must be even and >= 2, got {self.n_blocks}")
        PatchGrid(self.image_size, self.image_size, self.patch_size)

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def default_feature_block(self) -> int:
        # output after ceil(5/6 of the stack), as a 0-based block index
        return math.ceil(5 * self.n_blocks / 6) - 1

    def block_kind(self, b: int) -> str:
        return "frame" if b % 2 == 0 else "global"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BackboneState:
    config: BackboneConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> T.DiffTensor:
        return self.params[name]

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "BackboneState":
        return BackboneState(self.config, {k: T.parameter(v.data.copy(), k) for k, v in self.params.items()})


@dataclass
class ForwardOutput:
    features: T.DiffTensor  # (V, N, dim)
    pixels: T.DiffTensor  # (V, N, patch_dim)
    confidence: T.DiffTensor  # (V, N)
    attention_record: dict | None = None  # global block index -> (V*N, V*N) ndarray
    block_outputs: list | None = None


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing outliers."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def block_param_shapes(prefix: str, dim: int, hidden: int) -> dict:
    shapes = {}
    for ln in ("norm1", "norm2"):
        shapes[f"{prefix}.{ln}.gain"] = (dim,)
        shapes[f"{prefix}.{ln}.bias"] = (dim,)
    for w in ("q", "k", "v", "out"):
        shapes[f"{prefix}.attn.{w}_weight"] = (dim, dim)
        shapes[f"{prefix}.attn.{w}_bias"] = (dim,)
    shapes[f"{prefix}.mlp.fc1_weight"] = (dim, hidden)
    shapes[f"{prefix}.mlp.fc1_bias"] = (hidden,)
    shapes[f"{prefix}.mlp.fc2_weight"] = (hidden, dim)
    shapes[f"{prefix}.mlp.fc2_bias"] = (dim,)
    return shapes


def param_shapes(config: BackboneConfig) -> dict:
    d, pd = config.dim, config.patch_dim
    shapes = {"patch_embed.weight": (pd, d), "patch_embed.bias": (d,), "mask_token": (d,)}
    for b in range(config.n_blocks):
        shapes.update(block_param_shapes(f"blocks.{b}", d, d * config.mlp_ratio))
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, pd + 1)
    shapes["head.bias"] = (pd + 1,)
    return shapes


def init_params(shapes: dict, rng: np.random.Generator, std: float) -> dict:
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf.endswith("bias"):
            data = np.zeros(shape)
        else:
            data = trunc_normal(rng, shape, std)
        params[name] = T.parameter(data, name)
    return params


def init_backbone(config: BackboneConfig, seed: int | np.random.Generator = 0) -> BackboneState:
    """Truncated-normal weights, zero biases, unit norm gains."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return BackboneState(config, init_params(param_shapes(config), rng, config.init_std))


# ---------------------------------------------------------------------------
# rotary embedding
# ---------------------------------------------------------------------------


def rope_tables(coords: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (T, head_dim/2), one angle per rotated pair.

    Pairs 0..head_dim/4-1 (first half of the head) turn with the row coordinate,
    the rest with the column; pair i in a half uses frequency base^(-2i/(head_dim/2)).
    """
    if head_dim % 4:
        raise DimensionError(f"head_dim {head_dim} must be divisible by 4")
    quarter = head_dim // 4
    freqs = base ** (-2.0 * np.arange(quarter) / (head_dim // 2))
    coords = np.asarray(coords, dtype=float)
    angles = np.concatenate([coords[:, :1] * freqs, coords[:, 1:2] * freqs], axis=1)
    return np.cos(angles), np.sin(angles)


def rope_rotate(x, coords: np.ndarray, base: float = 100.0) -> T.DiffTensor:
    """Rotate adjacent feature pairs of ``x`` (..., T, head_dim) by position-dependent angles."""
    x = T.as_tensor(x)
    hd = x.shape[-1]
    cos, sin = rope_tables(coords, hd, base)
    return _rotate(x, cos, sin)


def _rotate(x: T.DiffTensor, cos: np.ndarray, sin: np.ndarray) -> T.DiffTensor:
    shape = x.shape
    pairs = x.data.reshape(shape[:-1] + (shape[-1] // 2, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(shape)

    def bw(g):
        gp = g.reshape(pairs.shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(shape),)

    return T._make(out, (x,), bw)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def linear(x, weight, bias):
    return T.matmul(x, weight) + bias


def _attention(x: T.DiffTensor, cos, sin, p: dict, prefix: str, n_heads: int, record: bool):
    """Multi-head self-attention over axis 1 of x (B, T, d)."""
    b, t, d = x.shape
    hd = d // n_heads

    def heads(z):
        return z.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    q = heads(linear(x, p[f"{prefix}.q_weight"], p[f"{prefix}.q_bias"]))
    k = heads(linear(x, p[f"{prefix}.k_weight"], p[f"{prefix}.k_bias"]))
    v = heads(linear(x, p[f"{prefix}.v_weight"], p[f"{prefix}.v_bias"]))
    q = _rotate(q, cos, sin)
    k = _rotate(k, cos, sin)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = linear(out, p[f"{prefix}.out_weight"], p[f"{prefix}.out_bias"])
    weights = attn.data.mean(axis=1) if record else None
    return out, weights


def _block(x: T.DiffTensor, cos, sin, p: dict, prefix: str, n_heads: int, eps: float, record: bool):
    h = T.layer_norm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"], eps)
    a, weights = _attention(h, cos, sin, p, f"{prefix}.attn", n_heads, record)
    x = x + a
    h = T.layer_norm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"], eps)
    h = T.gelu(linear(h, p[f"{prefix}.mlp.fc1_weight"], p[f"{prefix}.mlp.fc1_bias"]))
    x = x + linear(h, p[f"{prefix}.mlp.fc2_weight"], p[f"{prefix}.mlp.fc2_bias"])
    return x, weights


def frame_attention_block(tokens, grid: PatchGrid, params: dict, prefix: str, n_heads: int,
                          rope_base: float = 100.0, eps: float = 1e-6, record: bool = False):
    """Pre-norm attention + MLP block with attention restricted to each view's tokens."""
    tokens = T.as_tensor(tokens)
    cos, sin = rope_tables(grid.coords(), tokens.shape[-1] // n_heads, rope_base)
    out, w = _block(tokens, cos, sin, params, prefix, n_heads, eps, record)
    return (out, w) if record else out


def global_attention_block(tokens, grid: PatchGrid, params: dict, prefix: str, n_heads: int,
                           rope_base: float = 100.0, eps: float = 1e-6, record: bool = False):
    """Same block, attention over all V*N tokens; every view reuses its own grid coordinates."""
    tokens = T.as_tensor(tokens)
    v, n, d = tokens.shape
    coords = np.tile(grid.coords(), (v, 1))
    cos, sin = rope_tables(coords, d // n_heads, rope_base)
    flat = tokens.reshape(1, v * n, d)
    out, w = _block(flat, cos, sin, params, prefix, n_heads, eps, record)
    out = out.reshape(v, n, d)
    if record:
        return out, w[0]
    return out


def run_blocks(x: T.DiffTensor, grid: PatchGrid, params: dict, prefix: str, n_blocks: int, n_heads: int,
               rope_base: float, eps: float, record_attention: bool = False):
    """Alternating frame/global stack. Returns (final, per-block outputs, attention by block)."""
    v, n, d = x.shape
    hd = d // n_heads
    frame_cs = rope_tables(grid.coords(), hd, rope_base)
    global_cs = rope_tables(np.tile(grid.coords(), (v, 1)), hd, rope_base)
    outputs, record = [], {}
    for b in range(n_blocks):
        name = f"{prefix}.{b}"
        if b % 2 == 0:
            x, _ = _block(x, *frame_cs, params, name, n_heads, eps, False)
        else:
            flat, w = _block(x.reshape(1, v * n, d), *global_cs, params, name, n_heads, eps, record_attention)
            x = flat.reshape(v, n, d)
            if record_attention:
                record[b] = w[0]
        outputs.append(x)
    return x, outputs, record


def embed(patches, plan: MaskPlan, state: BackboneState) -> T.DiffTensor:
    """Linear patch embedding followed by mask-token substitution. No absolute positions."""
    patches = T.as_tensor(patches)
    cfg = state.config
    if patches.ndim != 3 or patches.shape[-1] != cfg.patch_dim or patches.shape[1] != cfg.grid.n_patches:
        raise DimensionError(f"patches {patches.shape} do not match config (N={cfg.grid.n_patches}, dim={cfg.patch_dim})")
    tokens = linear(patches, state["patch_embed.weight"], state["patch_embed.bias"])
    return apply_mask(tokens, plan, state["mask_token"])


def images_to_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    return np.stack([patchify(im, patch_size) for im in np.asarray(images)])


def forward(images, plan: MaskPlan, state: BackboneState, record_attention: bool = False,
            feature_block: int | None = None, keep_blocks: bool = False) -> ForwardOutput:
    cfg = state.config
    images = np.asarray(images, dtype=float)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(f"images {images.shape} do not match config image size {cfg.image_size}")
    if plan.masked.shape != (images.shape[0], cfg.grid.n_patches):
        raise DimensionError(f"mask plan {plan.masked.shape} does not match {images.shape[0]} views x {cfg.grid.n_patches} patches")
    fb = cfg.default_feature_block if feature_block is None else feature_block
    if not 0 <= fb < cfg.n_blocks:
        raise IndexError(f"feature_block {fb} out of range [0, {cfg.n_blocks})")
    x = embed(images_to_patches(images, cfg.patch_size), plan, state)
    x, outputs, record = run_blocks(x, cfg.grid, state.params, "blocks", cfg.n_blocks, cfg.n_heads,
                                    cfg.rope_base, cfg.ln_eps, record_attention)
    h = T.layer_norm(x, state["norm.gain"], state["norm.bias"], cfg.ln_eps)
    head = linear(h, state["head.weight"], state["head.bias"])
    pd = cfg.patch_dim
    pixels = head[..., :pd]
    confidence = T.sigmoid(head[..., pd])
    return ForwardOutput(outputs[fb], pixels, confidence, record if record_attention else None,
                         outputs if keep_blocks else None)
