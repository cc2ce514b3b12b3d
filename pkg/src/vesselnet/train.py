"""Optimizer, schedule, and the train / evaluate / predict loops."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load_dataset, sample_patches
from .encoder import ConfigurationError, crop_to, pad_to_multiple
from .io import (CheckpointMismatch, config_diff, load_checkpoint, read_checkpoint_config,
                 read_tensor, save_checkpoint, write_tensor)
from .losses import INSTANCE_TERMS, LossWeights, instance_loss, semantic_loss
from .metrics import MetricReport, instance_metrics, semantic_metrics
from .model import ABLATIONS, ModelConfig, SegModel, _coerce
from .postproc import extract_instances, write_instance_map
from .tensor import ParameterError, Tensor

MODES = ("semantic-2d", "semantic-3d", "instance-2d")


@dataclass
class TrainConfig:
    mode: str = "semantic-2d"
    data: str = ""
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    iterations: int = 200
    batch: int = 2
    patch: int = 64
    seed: int = 0
    w_dice: float = 1.0
    w_ce: float = 1.0
    w_np: float = 1.0
    w_hv: float = 5.0
    w_nt: float = 1.0
    gamma: float = 2.0
    texture_aware: bool = True
    mamba_bottleneck: bool = True
    bifocal_decoder: bool = True
    depth: int = 4
    base_width: int = 48
    d_state: int = 16
    n_blocks: int = 16
    num_types: int = 2
    in_channels: int = 1
    residual: str = "literal"
    dtype: str = "float32"
    log_every: int = 1

    @property
    def dims(self) -> int:
        return 3 if self.mode == "semantic-3d" else 2

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigurationError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.iterations < 0 or self.batch < 1:
            raise ConfigurationError("iterations must be >= 0 and batch >= 1")
        if self.patch % (2 ** self.depth):
            raise ConfigurationError(f"patch {self.patch} not divisible by 2^{self.depth}")
        self.loss_weights().validate("semantic" if self.mode.startswith("semantic") else "instance")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dice, self.w_ce, self.w_np, self.w_hv, self.w_nt, self.gamma)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.in_channels, num_classes=2, dims=self.dims, depth=self.depth,
            base_width=self.base_width, d_state=self.d_state, n_blocks=self.n_blocks,
            mode="instance" if self.mode == "instance-2d" else "semantic", num_types=self.num_types,
            texture_aware=self.texture_aware, mamba_bottleneck=self.mamba_bottleneck,
            bifocal_decoder=self.bifocal_decoder, residual=self.residual, seed=self.seed, dtype=self.dtype,
        )

    def with_ablation(self, name: str) -> "TrainConfig":
        ta, mb, bf = ABLATIONS[name]
        return dataclasses.replace(self, texture_aware=ta, mamba_bottleneck=mb, bifocal_decoder=bf)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**{k: _coerce(v, names[k]) for k, v in d.items()})


# -- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction. A missing grad counts as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ParameterError(f"adam: {len(params)} params, {len(grads)} grads, state for {len(state.m)}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.data.shape:
            raise ParameterError(f"adam: state shape {state.m[i].shape} != parameter shape {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ParameterError(f"adam: grad shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total: int, lr_start: float = 1e-4, lr_end: float = 1e-7) -> float:
    """Cosine annealing from ``lr_start`` to ``lr_end``; steps past ``total`` stay at ``lr_end``."""
    if total <= 0:
        raise ParameterError(f"schedule length must be positive, got {total}")
    # endpoints returned verbatim: lr_end + (lr_start - lr_end) need not round back to lr_start
    if step <= 0:
        return lr_start
    if step >= total:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total))


# -- batches -----------------------------------------------------------------

def _targets_for(scene, corner, patch):
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
    return {
        "np": (scene.instances[sl] > 0).astype(np.int64),
        "hv": scene.hv[(slice(None),) + sl],
        "nt": scene.types[sl],
    }


def make_batch(scenes, cfg: TrainConfig, rng) -> tuple[np.ndarray, object]:
    """One training batch; about half of the crops are centred on foreground."""
    picks = rng.integers(len(scenes), size=cfg.batch)
    n_pos = math.ceil(cfg.batch / 2)
    images, labels, inst = [], [], []
    for b, idx in enumerate(picks):
        sc = scenes[idx]
        patch = (cfg.patch,) * sc.mask.ndim
        img, msk, corners = sample_patches(sc.image, sc.mask, patch, 1, rng=rng,
                                           pos_fraction=1.0 if b < n_pos else 0.0)
        images.append(img[0])
        labels.append(msk[0])
        if cfg.mode == "instance-2d":
            inst.append(_targets_for(sc, corners[0], patch))
    x = np.stack(images).astype(cfg.dtype)
    if cfg.mode == "instance-2d":
        return x, {k: np.stack([t[k] for t in inst]) for k in ("np", "hv", "nt")}
    return x, np.stack(labels)


def compute_loss(model: SegModel, cfg: TrainConfig, x: np.ndarray, y) -> tuple[Tensor, dict]:
    out = model(Tensor(x))
    if cfg.mode == "instance-2d":
        return instance_loss(*out, y, cfg.loss_weights())
    return semantic_loss(out, y, cfg.loss_weights())


# -- loops -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SegModel
    losses: list
    checkpoint: Path | None


def _log_line(step, lr, total, parts) -> str:
    body = " ".join(f"{k}={v:.8e}" for k, v in parts.items())
    return f"step={step} lr={lr:.8e} loss={total:.8e} {body}"


def train(cfg: TrainConfig, scenes=None, out_dir=None, batch_fn=None) -> TrainResult:
    """Adam + cosine schedule; writes ``train_log.txt`` and ``checkpoint/`` under ``out_dir``.

    ``scenes`` overrides loading ``cfg.data``. ``batch_fn(step, rng)`` overrides
    batch construction (a fixed batch for overfitting, for example).
    """
    cfg.validate()
    if scenes is None and batch_fn is None:
        _, scenes = load_dataset(cfg.data)
        if not scenes:
            raise ConfigurationError(f"dataset {cfg.data!r} is empty")
    model = SegModel(cfg.model_config())
    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng([cfg.seed, 1])
    log = []
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.txt", "w")
    try:
        for step in range(cfg.iterations):
            lr = cosine_lr(step, cfg.iterations, cfg.lr_start, cfg.lr_end)
            x, y = batch_fn(step, rng) if batch_fn else make_batch(scenes, cfg, rng)
            model.zero_grad()
            loss, parts = compute_loss(model, cfg, x, y)
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            log.append({"step": step, "lr": lr, "loss": loss.item(), **parts})
            if log_file and step % cfg.log_every == 0:
                log_file.write(_log_line(step, lr, loss.item(), parts) + "\n")
    finally:
        if log_file:
            log_file.close()
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint"
        save_checkpoint(ckpt, model.named_parameters(), cfg.to_dict(), cfg.iterations)
    return TrainResult(model, log, ckpt)


def read_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split())
        rows.append({k: int(v) if k == "step" else float(v) for k, v in fields.items()})
    return rows


def load_model(checkpoint, expect: dict | None = None) -> tuple[SegModel, TrainConfig]:
    """Rebuild the model stored in ``checkpoint``; ``expect`` keys must agree with it."""
    stored = read_checkpoint_config(checkpoint)
    if expect:
        diff = config_diff({k: str(v) for k, v in expect.items()}, {k: stored.get(k, "<missing>") for k in expect})
        if diff:
            raise CheckpointMismatch("config mismatch:\n  " + "\n  ".join(diff))
    cfg = TrainConfig.from_dict(stored)
    model = SegModel(cfg.model_config())
    load_checkpoint(checkpoint, model.named_parameters(), cfg.to_dict())
    return model, cfg


def infer(model: SegModel, image: np.ndarray):
    """Run one ``(C, *S)`` image, padding to a multiple of 2^depth and cropping back."""
    spatial = image.shape[1:]
    padded, _ = pad_to_multiple(image, 2 ** model.config.depth)
    with T.no_grad():
        out = model(Tensor(padded[None].astype(model.dtype)))
    if isinstance(out, tuple):
        return tuple(crop_to(o.data[0], spatial) for o in out)
    return crop_to(out.data[0], spatial)


def _softmax(z, axis=0):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def predict_scene(model: SegModel, image: np.ndarray):
    """Semantic label map, or ``(instances, types)`` in instance mode."""
    out = infer(model, image)
    if isinstance(out, tuple):
        np_logits, hv, nt = out
        return extract_instances(_softmax(np_logits)[1], hv, nt)
    return out.argmax(axis=0).astype(np.int64)


def evaluate(checkpoint, scenes=None, data=None, model=None) -> MetricReport:
    if model is None:
        model, _ = load_model(checkpoint)
    if scenes is None:
        _, scenes = load_dataset(data)
    report = MetricReport()
    for i, sc in enumerate(scenes):
        pred = predict_scene(model, sc.image)
        if isinstance(pred, tuple):
            inst, _ = pred
            vals = semantic_metrics(sc.mask, (inst > 0).astype(np.int64))
            vals.update(instance_metrics(sc.instances, inst))
        else:
            vals = semantic_metrics(sc.mask, pred)
        report.add(f"{i:05d}", vals)
    return report


def predict(checkpoint, image_path, out_path) -> Path:
    """Write a mask tensor (semantic) or an instance map plus type sidecar."""
    model, _ = load_model(checkpoint)
    image = read_tensor(image_path)
    if image.ndim == model.config.dims:
        image = image[None]
    pred = predict_scene(model, image)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(pred, tuple):
        write_instance_map(out_path, *pred)
    else:
        write_tensor(out_path, pred.astype(np.float32))
    return out_path


__all__ = [
    "MODES", "TrainConfig", "AdamState", "adam_step", "cosine_lr", "make_batch", "compute_loss",
    "train", "read_log", "load_model", "infer", "predict_scene", "evaluate", "predict", "INSTANCE_TERMS",
]
