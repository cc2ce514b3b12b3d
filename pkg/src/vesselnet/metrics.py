"""Semantic and instance segmentation metrics.

Conventions for degenerate inputs:
  * Dice / IoU / precision / recall are 1.0 when both masks are empty for the
    class, and 0.0 when only the denominator's side is empty.
  * Hausdorff distance of an empty mask is missing (NaN), never 0.
  * AJI of two empty maps is 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "confusion", "dice", "iou", "precision", "recall", "miou", "boundary", "directed_hausdorff",
    "hausdorff", "match_instances", "Matches", "pq_dq_sq", "aji", "MetricReport", "semantic_metrics",
    "instance_metrics",
]


def confusion(g, p, c: int = 1) -> tuple[int, int, int, int]:
    """Pixel counts ``(TP, FP, FN, TN)`` for class ``c``."""
    g, p = np.asarray(g), np.asarray(p)
    if g.shape != p.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {p.shape}")
    gc, pc = g == c, p == c
    tp = int(np.count_nonzero(gc & pc))
    fp = int(np.count_nonzero(~gc & pc))
    fn = int(np.count_nonzero(gc & ~pc))
    return tp, fp, fn, int(g.size - tp - fp - fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _foreground_classes(g, p, classes):
    if classes is None:
        classes = int(max(np.max(g), np.max(p), 1)) + 1
    return range(1, classes)


def _per_class(fn_, g, p, classes=None) -> float:
    vals = [fn_(*confusion(g, p, c)) for c in _foreground_classes(g, p, classes)]
    return float(np.mean(vals))


def dice(g, p, classes=None) -> float:
    """Dice ``2TP / (2TP + FP + FN)``, mean over foreground classes."""
    return _per_class(lambda tp, fp, fn, tn: _ratio(2 * tp, 2 * tp + fp + fn, tp + fp + fn == 0), g, p, classes)


def iou(g, p, c: int = 1) -> float:
    tp, fp, fn, _ = confusion(g, p, c)
    return _ratio(tp, tp + fp + fn, tp + fp + fn == 0)


def precision(g, p, classes=None) -> float:
    return _per_class(lambda tp, fp, fn, tn: _ratio(tp, tp + fp, tp + fp + fn == 0), g, p, classes)


def recall(g, p, classes=None) -> float:
    return _per_class(lambda tp, fp, fn, tn: _ratio(tp, tp + fn, tp + fp + fn == 0), g, p, classes)


def sample_miou(g, p, classes: int) -> float:
    """IoU averaged over every class, background included."""
    return float(np.mean([iou(g, p, c) for c in range(classes)]))


def miou(pairs, classes: int = 2) -> float:
    """Mean over samples of the per-sample class-averaged IoU."""
    pairs = list(pairs)
    return float(np.mean([sample_miou(g, p, classes) for g, p in pairs]))


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a face-adjacent background neighbour (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    eroded = ndimage.binary_erosion(m, structure=struct, border_value=0)
    return m & ~eroded


def directed_hausdorff(g, p) -> float:
    """``max_{x in dG} min_{y in dP} |x - y|`` over boundary pixels; NaN if either is empty."""
    bg, bp = boundary(g), boundary(p)
    if not bg.any() or not bp.any():
        return math.nan
    dist = ndimage.distance_transform_edt(~bp)
    return float(dist[bg].max())


def hausdorff(g, p) -> float:
    """Symmetric Hausdorff distance in pixels."""
    a, b = directed_hausdorff(g, p), directed_hausdorff(p, g)
    return math.nan if math.isnan(a) or math.isnan(b) else max(a, b)


# -- instances ---------------------------------------------------------------

@dataclass
class Matches:
    tp: list = field(default_factory=list)  # (gt_id, pred_id, iou)
    fp: list = field(default_factory=list)  # pred ids
    fn: list = field(default_factory=list)  # gt ids


def _overlaps(g: np.ndarray, p: np.ndarray):
    """Intersection counts for every overlapping (gt, pred) id pair plus instance areas."""
    g, p = np.asarray(g).ravel().astype(np.int64), np.asarray(p).ravel().astype(np.int64)
    gids, garea = np.unique(g[g > 0], return_counts=True)
    pids, parea = np.unique(p[p > 0], return_counts=True)
    both = (g > 0) & (p > 0)
    pairs, counts = np.unique(np.stack([g[both], p[both]]), axis=1, return_counts=True)
    inter = {(int(a), int(b)): int(c) for (a, b), c in zip(pairs.T, counts)}
    return dict(zip(gids.tolist(), garea.tolist())), dict(zip(pids.tolist(), parea.tolist())), inter


def match_instances(g, p, iou_thresh: float = 0.5) -> Matches:
    """Pairs with IoU above ``iou_thresh``; for thresholds >= 0.5 each instance matches at most once."""
    garea, parea, inter = _overlaps(g, p)
    m = Matches()
    used_g, used_p = set(), set()
    cand = []
    for (gi, pi), n in inter.items():
        value = n / (garea[gi] + parea[pi] - n)
        if value > iou_thresh:
            cand.append((-value, gi, pi))
    for neg, gi, pi in sorted(cand):
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        m.tp.append((gi, pi, -neg))
    m.fp = sorted(set(parea) - used_p)
    m.fn = sorted(set(garea) - used_g)
    return m


def pq_dq_sq(matches: Matches) -> tuple[float, float, float]:
    tp, fp, fn = len(matches.tp), len(matches.fp), len(matches.fn)
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(v for _, _, v in matches.tp) / tp if tp else 0.0
    return dq * sq, dq, sq


def aji(g, p) -> float:
    """Aggregated Jaccard index with greedy, single-use assignment by descending IoU."""
    garea, parea, inter = _overlaps(g, p)
    if not garea and not parea:
        return 1.0
    cand = sorted(
        (-(n / (garea[gi] + parea[pi] - n)), gi, pi) for (gi, pi), n in inter.items()
    )
    assigned, used_p = {}, set()
    for _, gi, pi in cand:
        if gi in assigned or pi in used_p:
            continue
        assigned[gi] = pi
        used_p.add(pi)
    num = den = 0
    for gi, area in garea.items():
        pi = assigned.get(gi)
        if pi is None:
            den += area
        else:
            n = inter[(gi, pi)]
            num += n
            den += area + parea[pi] - n
    den += sum(a for pi, a in parea.items() if pi not in used_p)
    return num / den if den else 1.0


# -- reports -----------------------------------------------------------------

REPORT_KEYS = ("dice", "miou", "precision", "recall", "hd", "pq", "dq", "sq", "aji")


def semantic_metrics(g, p, classes: int = 2) -> dict:
    return {
        "dice": dice(g, p, classes),
        "miou": sample_miou(g, p, classes),
        "precision": precision(g, p, classes),
        "recall": recall(g, p, classes),
        "hd": hausdorff(np.asarray(g) > 0, np.asarray(p) > 0),
    }


def instance_metrics(g_inst, p_inst, iou_thresh: float = 0.5) -> dict:
    pq, dq, sq = pq_dq_sq(match_instances(g_inst, p_inst, iou_thresh))
    return {"pq": pq, "dq": dq, "sq": sq, "aji": aji(g_inst, p_inst)}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{v:.6f}"


@dataclass
class MetricReport:
    """Per-sample records plus their arithmetic means (missing values skipped)."""

    samples: list = field(default_factory=list)  # list[(sample_id, dict)]

    def add(self, sample_id: str, values: dict) -> None:
        self.samples.append((str(sample_id), dict(values)))

    def aggregate(self) -> dict:
        out = {}
        for k in REPORT_KEYS:
            vals = [v[k] for _, v in self.samples if k in v and not math.isnan(v[k])]
            out[k] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_text(self) -> str:
        lines = []
        for sid, vals in self.samples:
            body = " ".join(f"{k}={_fmt(vals.get(k, math.nan))}" for k in REPORT_KEYS)
            lines.append(f"sample={sid} {body}")
        agg = self.aggregate()
        body = " ".join(f"{k}={_fmt(agg[k])}" for k in REPORT_KEYS)
        lines.append(f"aggregate n={len(self.samples)} {body}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            if not line.startswith("sample="):
                continue
            fields = dict(tok.split("=", 1) for tok in line.split())
            sid = fields.pop("sample")
            rep.add(sid, {k: float(v) for k, v in fields.items()})
        return rep
