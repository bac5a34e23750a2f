"""Pretraining loop for multi-view masked reconstruction."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..backbone import BackboneState, forward, images_to_patches, init_backbone
from ..errors import TrainingError
from ..masking import MaskPlan, sample_mask_plan
from ..objective import confidence_l2
from ..synthdata import generate_scene, make_training_stream, sample_spec, scene_seed
from .checkpoint import Checkpoint, canonical_json, checkpoint_to_state, state_to_checkpoint
from .config import TrainConfig
from .optim import AdamWConfig, AdamWState, adamw_step, clip_grad_norm, lr_at

LOG_SCHEMA = 1
_VAL_STREAM = 0x5EED_0001
_MASK_STREAM = 0x5EED_0002
_MEAN_STREAM = 0x5EED_0003


class JsonlLog:
    """Append-only JSON-lines log; every record carries the schema version."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, event: str, **fields) -> None:
        rec = {"schema": LOG_SCHEMA, "event": event, **{k: _clean(v) for k, v in fields.items()}}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(canonical_json(rec) + "\n")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


@dataclass
class ValidationSet:
    images: list  # per scene (V, H, W, 3)
    plans: list  # per scene MaskPlan

    @classmethod
    def build(cls, cfg: TrainConfig, n_scenes: int | None = None, seed: int | None = None, kinds=None,
              template=None, mask=None) -> "ValidationSet":
        n = cfg.n_val_scenes if n_scenes is None else n_scenes
        seed = scene_seed(cfg.seed, _VAL_STREAM) if seed is None else seed
        template = replace(cfg.scene_template(), n_views=cfg.val_views) if template is None else template
        mask = cfg.mask if mask is None else mask
        kinds = cfg.kind_list if kinds is None else kinds
        images, plans = [], []
        for i in range(n):
            rng = np.random.default_rng(scene_seed(seed, i))
            spec = replace(sample_spec(template, rng, kinds), n_views=template.n_views)
            batch = generate_scene(spec, rng)
            images.append(batch.images)
            plans.append(sample_mask_plan(mask, batch.n_views, cfg.model.grid, rng))
        return cls(images, plans)


def training_mean_color(cfg: TrainConfig, n_scenes: int = 16) -> np.ndarray:
    """Mean RGB over the first scenes of an independent copy of the training stream."""
    stream = make_training_stream(cfg.scene_template(), (cfg.min_views, cfg.max_views),
                                  seed=cfg.seed, kinds=cfg.kind_list)
    total, count = np.zeros(3), 0
    for _ in range(n_scenes):
        imgs = next(stream).images
        total += imgs.reshape(-1, 3).sum(axis=0)
        count += imgs.shape[0] * imgs.shape[1] * imgs.shape[2]
    return total / count


def masked_metrics(state: BackboneState, val: ValidationSet, mean_color: np.ndarray) -> dict:
    """Masked-region per-element MSE of the model and of a constant mean-color predictor."""
    p = state.config.patch_size
    const = np.tile(mean_color, p * p)
    se_model = se_base = 0.0
    n_elems = 0
    conf_sum, n_masked = 0.0, 0
    for images, plan in zip(val.images, val.plans):
        target = images_to_patches(images, p)
        with T.no_grad():
            out = forward(images, plan, state)
        m = plan.masked
        se_model += float(((out.pixels.data[m] - target[m]) ** 2).sum())
        se_base += float(((const - target[m]) ** 2).sum())
        n_elems += target[m].size
        conf_sum += float(out.confidence.data[m].sum())
        n_masked += int(m.sum())
    if n_elems == 0:
        return {"masked_mse": float("nan"), "baseline_mse": float("nan"), "ratio": float("nan"), "mean_confidence": float("nan")}
    mse, base = se_model / n_elems, se_base / n_elems
    return {"masked_mse": mse, "baseline_mse": base, "ratio": mse / base, "mean_confidence": conf_sum / n_masked}


@dataclass
class TrainResult:
    state: BackboneState
    log: list
    final_metrics: dict
    checkpoint_path: Path | None
    steps_done: int


def _save(state, cfg, step, metrics, path: Path | None):
    if path is None:
        return
    digest = hashlib.sha256(canonical_json(_clean(metrics)).encode()).hexdigest()
    state_to_checkpoint(state, {"train": {k: v for k, v in cfg.to_dict().items() if k != "model"},
                                "step": step, "metrics_digest": digest}).save(path)


def pretrain(cfg: TrainConfig, out_dir=None, val: ValidationSet | None = None, state: BackboneState | None = None,
             progress=None) -> TrainResult:
    """Stream scenes, mask, reconstruct, and update with AdamW under a warmup + cosine schedule.

    Writes ``log.jsonl`` and ``checkpoint.mske`` into ``out_dir`` (if given). A
    non-finite loss raises TrainingError; the checkpoint on disk stays the last good one.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    log = JsonlLog(out / "log.jsonl" if out else None)
    ckpt_path = out / "checkpoint.mske" if out else None

    state = init_backbone(cfg.model, cfg.seed) if state is None else state
    params = {n: p.data for n, p in state.params.items()}
    opt = AdamWState()
    ocfg = AdamWConfig(cfg.lr_peak, (cfg.beta1, cfg.beta2), 1e-8, cfg.weight_decay)
    stream = make_training_stream(cfg.scene_template(), (cfg.min_views, cfg.max_views),
                                  seed=cfg.seed, kinds=cfg.kind_list)
    mask_rng = np.random.default_rng(scene_seed(cfg.seed, _MASK_STREAM))
    val = ValidationSet.build(cfg) if val is None else val
    mean_color = training_mean_color(cfg)

    log.write("start", config=cfg.to_dict(), n_parameters=state.n_parameters(), mean_color=mean_color.tolist())
    metrics = masked_metrics(state, val, mean_color) if len(val.images) else {}
    log.write("eval", step=0, **metrics)
    _save(state, cfg, 0, metrics, ckpt_path)

    p = cfg.model.patch_size
    for step in range(1, cfg.steps + 1):
        lr = lr_at(step, cfg.steps, cfg.lr_peak, cfg.warmup_frac, cfg.min_lr)
        grads = {n: np.zeros_like(a) for n, a in params.items()}
        loss_sum, views, conf = 0.0, [], 0.0
        for _ in range(cfg.batch_scenes):
            batch = next(stream)
            plan = sample_mask_plan(cfg.mask, batch.n_views, cfg.model.grid, mask_rng)
            fo = forward(batch.images, plan, state)
            br = confidence_l2(fo.pixels, images_to_patches(batch.images, p), fo.confidence, plan, cfg.loss)
            loss = br.total * (1.0 / cfg.batch_scenes)
            loss_val = br.total.item()
            if not math.isfinite(loss_val):
                log.write("abort", step=step, reason="non-finite loss")
                raise TrainingError(f"non-finite loss at step {step}; last good checkpoint kept")
            T.backward(loss)
            for n, prm in state.params.items():
                if prm.grad is not None:
                    grads[n] += prm.grad
                    prm.grad = None
            loss_sum += loss_val
            views.append(batch.n_views)
            conf += br.mean_confidence
        gnorm = clip_grad_norm(grads, cfg.grad_clip)
        if not adamw_step(params, grads, opt, ocfg, step, lr):
            log.write("abort", step=step, reason="non-finite gradient")
            raise TrainingError(f"non-finite gradient at step {step}; last good checkpoint kept")
        if step % max(cfg.log_every, 1) == 0 or step == cfg.steps:
            log.write("step", step=step, loss=loss_sum / cfg.batch_scenes, lr=lr, grad_norm=gnorm, views=views,
                      mean_confidence=conf / cfg.batch_scenes)
        if progress is not None:
            progress(step, loss_sum / cfg.batch_scenes)
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps and len(val.images):
            metrics = masked_metrics(state, val, mean_color)
            log.write("eval", step=step, **metrics)
        if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step != cfg.steps:
            _save(state, cfg, step, metrics, ckpt_path)
            log.write("checkpoint", step=step)

    if cfg.steps and len(val.images):
        metrics = masked_metrics(state, val, mean_color)
        log.write("eval", step=cfg.steps, **metrics)
    _save(state, cfg, cfg.steps, metrics, ckpt_path)
    log.write("done", step=cfg.steps)
    return TrainResult(state, log.records, metrics, ckpt_path, cfg.steps)


def load_state(path) -> BackboneState:
    return checkpoint_to_state(Checkpoint.load(path))
