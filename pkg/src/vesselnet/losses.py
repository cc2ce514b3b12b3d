"""Training objectives for the semantic and the three-head instance modes.

Logits are channel-first ``(N, K, *S)``; integer label maps are ``(N, *S)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParameterError, Tensor

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    dice: float = 1.0
    ce: float = 1.0
    np: float = 1.0
    hv: float = 5.0
    nt: float = 1.0
    gamma: float = 2.0

    def validate(self, mode: str) -> None:
        vals = [self.dice, self.ce, self.np, self.hv, self.nt, self.gamma]
        if any(v < 0 for v in vals):
            raise ParameterError("loss weights and gamma must be >= 0")
        active = (self.dice, self.ce) if mode == "semantic" else (self.np, self.hv, self.nt)
        if not any(v > 0 for v in active):
            raise ParameterError(f"at least one {mode} loss weight must be > 0")


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, *S)`` integer labels -> ``(N, K, *S)`` indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(out, -1, 1)


def _check(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels outside [0, {logits.shape[1]})")
    return labels


def dice_loss(probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum GP + eps) / (sum G + sum P + eps)`` per (sample, class), averaged."""
    target = np.asarray(target, dtype=probs.dtype)
    if target.shape != probs.shape:
        raise DimensionError(f"dice: probs {probs.shape} vs target {target.shape}")
    axes = tuple(range(2, probs.ndim))
    g = Tensor(target)
    inter = (probs * g).sum(axis=axes)
    denom = probs.sum(axis=axes) + Tensor(target.sum(axis=axes))
    score = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - score.mean()


def _nll(logp_true: Tensor, weight: Tensor | None = None) -> Tensor:
    terms = logp_true if weight is None else weight * logp_true
    return -terms.mean()


def _log_p_true(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    labels = _check(logits, labels)
    mask = one_hot(labels, logits.shape[1], logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    return (logp * Tensor(mask)).sum(axis=1), mask


def cross_entropy(logits: Tensor, labels) -> Tensor:
    logp_true, _ = _log_p_true(logits, labels)
    return _nll(logp_true)


def focal(logits: Tensor, labels, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_true)^gamma * log p_true``; gamma = 0 is cross entropy."""
    if gamma < 0:
        raise ParameterError("focal gamma must be >= 0")
    logp_true, _ = _log_p_true(logits, labels)
    if gamma == 0:
        return _nll(logp_true)
    # 1 - p can underflow to exactly 0 for confident pixels; clamp keeps pow finite
    one_minus = 1.0 - T.exp(logp_true)
    one_minus = T.add(one_minus, Tensor(np.asarray(np.finfo(logits.dtype).tiny, dtype=logits.dtype)))
    return _nll(logp_true, T.power(one_minus, gamma))


def bce(logits: Tensor, targets) -> Tensor:
    """Binary cross entropy with logits, mean over every element."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    # log(1 + e^x) - t*x, written with softplus for stability
    return (T.softplus(logits) - logits * Tensor(targets)).mean()


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    d = pred - Tensor(target)
    return (d * d).mean()


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """``x[i+1] - x[i]`` along ``axis`` with the last entry clamped to 0."""
    ax = axis % x.ndim
    n = x.shape[ax]
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
    d = x[tuple(hi)] - x[tuple(lo)]
    widths = [(0, 0)] * x.ndim
    widths[ax] = (0, 1)
    return T.pad(d, widths)


def forward_diff_np(x: np.ndarray, axis: int) -> np.ndarray:
    d = np.zeros_like(x)
    n = x.shape[axis]
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    d[tuple(lo)] = x[tuple(hi)] - x[tuple(lo)]
    return d


def msge(pred_hv: Tensor, target_hv, nuclei_mask) -> Tensor:
    """Masked MSE between horizontal grad of H and vertical grad of V.

    ``pred_hv``/``target_hv`` are ``(N, 2, H, W)`` (channel 0 = H, 1 = V);
    ``nuclei_mask`` is ``(N, H, W)``. Empty mask gives 0.
    """
    target_hv = np.asarray(target_hv, dtype=pred_hv.dtype)
    mask = np.asarray(nuclei_mask, dtype=pred_hv.dtype)
    if pred_hv.shape[1] != 2 or target_hv.shape != pred_hv.shape or mask.shape != (pred_hv.shape[0],) + pred_hv.shape[2:]:
        raise DimensionError(f"msge: pred {pred_hv.shape}, target {target_hv.shape}, mask {mask.shape}")
    w_ax, h_ax = pred_hv.ndim - 1, pred_hv.ndim - 2
    gp = T.concat([forward_diff(pred_hv[:, 0:1], w_ax), forward_diff(pred_hv[:, 1:2], h_ax)], axis=1)
    gt = np.concatenate([forward_diff_np(target_hv[:, 0:1], w_ax), forward_diff_np(target_hv[:, 1:2], h_ax)], axis=1)
    focus = np.repeat(mask[:, None], 2, axis=1)
    count = focus.sum()
    if count == 0:
        return (gp * 0.0).sum()
    d = gp - Tensor(gt)
    return (d * d * Tensor(focus)).sum() * (1.0 / count)


def semantic_loss(logits: Tensor, labels, w: LossWeights | None = None) -> tuple[Tensor, dict]:
    """``dice * L_dice + ce * L_ce`` on softmax probabilities; returns (total, parts)."""
    w = w or LossWeights()
    w.validate("semantic")
    labels = _check(logits, labels)
    target = one_hot(labels, logits.shape[1], logits.dtype)
    l_dice = dice_loss(T.softmax(logits, axis=1), target)
    l_ce = cross_entropy(logits, labels)
    total = l_dice * w.dice + l_ce * w.ce
    return total, {"dice": l_dice.item(), "ce": l_ce.item()}


INSTANCE_TERMS = ("np_focal", "np_dice", "hv_mse", "hv_msge", "nt_focal", "nt_dice", "nt_bce")


def instance_loss(np_logits: Tensor, hv: Tensor, nt_logits: Tensor, targets: dict,
                  w: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted NP (focal + dice), HV (mse + msge) and NT (focal + dice + bce) terms.

    ``targets`` holds ``np`` (N, *S) in {0, 1}, ``hv`` (N, 2, *S) and ``nt``
    (N, *S) type ids with 0 = background. The breakdown reports each term
    already multiplied by its head weight, so the parts sum to the total.
    """
    w = w or LossWeights()
    w.validate("instance")
    for key in ("np", "hv", "nt"):
        if key not in targets:
            raise KeyError(f"instance targets missing {key!r}")
    fg = np.asarray(targets["np"]).astype(np.int64)
    types = np.asarray(targets["nt"]).astype(np.int64)
    np_target = one_hot(fg, 2, np_logits.dtype)
    nt_target = one_hot(types, nt_logits.shape[1], nt_logits.dtype)
    raw = {
        "np_focal": focal(np_logits, fg, w.gamma),
        "np_dice": dice_loss(T.softmax(np_logits, axis=1), np_target),
        "hv_mse": mse(hv, targets["hv"]),
        "hv_msge": msge(hv, targets["hv"], fg),
        "nt_focal": focal(nt_logits, types, w.gamma),
        "nt_dice": dice_loss(T.softmax(nt_logits, axis=1), nt_target),
        "nt_bce": bce(nt_logits, nt_target),
    }
    head = {"np": w.np, "hv": w.hv, "nt": w.nt}
    weighted = {k: v * head[k.split("_")[0]] for k, v in raw.items()}
    total = weighted["np_focal"]
    for k in INSTANCE_TERMS[1:]:
        total = total + weighted[k]
    return total, {k: v.item() for k, v in weighted.items()}
