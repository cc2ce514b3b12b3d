"""Instance maps from (NP, HV, NT) head outputs, and the HV target convention.

HV convention: for every instance, the horizontal map is the column offset
from the instance's (rounded) centroid and the vertical map the row offset.
Positive and negative sides are scaled separately so each spans [-1, 1], and
the centroid pixel is exactly 0. Background is 0.
"""

from __future__ import annotations

import heapq
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import read_kv, read_tensor, write_kv, write_tensor
from .losses import forward_diff_np

TAU_NP = 0.5
TAU_E = 0.4
MIN_SIZE = 10


def connected_components(mask, connectivity: int = 1) -> np.ndarray:
    """Label foreground components; labels follow raster order of first pixel seen.

    ``connectivity`` 1 = face neighbours (4 in 2D), ``mask.ndim`` = full (8 in 2D).
    """
    mask = np.asarray(mask).astype(bool)
    struct = ndimage.generate_binary_structure(mask.ndim, connectivity)
    labels, _ = ndimage.label(mask, structure=struct)
    return relabel_raster(labels)


def relabel_raster(labels) -> np.ndarray:
    """Renumber positive ids 1..K in raster order of first appearance."""
    flat = np.asarray(labels).ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int64)
    lut[ids[np.argsort(first)]] = np.arange(1, len(ids) + 1)
    return lut[np.asarray(labels)].astype(np.int64)


def hv_maps(instances) -> np.ndarray:
    """``(H, W)`` instance map -> ``(2, H, W)`` horizontal / vertical offset maps."""
    inst = np.asarray(instances)
    out = np.zeros((2,) + inst.shape, dtype=np.float64)
    for iid in np.unique(inst):
        if iid == 0:
            continue
        ys, xs = np.nonzero(inst == iid)
        cy, cx = int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5))
        for ch, offs in ((0, xs - cx), (1, ys - cy)):
            vals = offs.astype(np.float64)
            pos, neg = vals > 0, vals < 0
            if pos.any():
                vals[pos] /= vals[pos].max()
            if neg.any():
                vals[neg] /= -vals[neg].min()
            out[ch, ys, xs] = vals
    return out


def hv_energy(hv) -> np.ndarray:
    """``max(|d/dx H|, |d/dy V|)`` with clamped forward differences."""
    hv = np.asarray(hv, dtype=np.float64)
    return np.maximum(np.abs(forward_diff_np(hv[0], 1)), np.abs(forward_diff_np(hv[1], 0)))


def _grow(markers: np.ndarray, fg: np.ndarray, energy: np.ndarray) -> np.ndarray:
    """Flood markers over ``fg`` in ascending energy order (ties by insertion)."""
    labels = markers.copy()
    h, w = labels.shape
    heap, count = [], 0

    def push_neighbours(y, x, lab):
        nonlocal count
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and labels[ny, nx] == 0:
                heapq.heappush(heap, (energy[ny, nx], count, ny, nx, lab))
                count += 1

    for y, x in zip(*np.nonzero(labels)):
        push_neighbours(y, x, labels[y, x])
    while heap:
        _, _, y, x, lab = heapq.heappop(heap)
        if labels[y, x]:
            continue
        labels[y, x] = lab
        push_neighbours(y, x, lab)
    return labels


def extract_instances(np_prob, hv, nt_logits=None, *, tau_np: float = TAU_NP, tau_e: float = TAU_E,
                      min_size: int = MIN_SIZE) -> tuple[np.ndarray, dict]:
    """Instance map and ``{instance id: type id}`` from one image's head outputs.

    ``np_prob`` (H, W) foreground probability; ``hv`` (2, H, W); ``nt_logits``
    (T, H, W) with channel 0 = background, or None (every instance gets type 1).
    """
    np_prob = np.asarray(np_prob)
    fg = np_prob > tau_np
    if not fg.any():
        return np.zeros(np_prob.shape, dtype=np.int64), {}
    energy = hv_energy(hv)
    markers = connected_components(fg & (energy < tau_e))
    labels = _grow(markers, fg, energy)
    # foreground islands that held no marker become their own instances
    orphans = connected_components(fg & (labels == 0))
    labels = np.where(orphans > 0, orphans + labels.max(), labels)
    ids, sizes = np.unique(labels[labels > 0], return_counts=True)
    small = ids[sizes < min_size]
    labels[np.isin(labels, small)] = 0
    labels = relabel_raster(labels)

    types = {}
    if nt_logits is None:
        types = {int(i): 1 for i in np.unique(labels) if i}
    else:
        nt = np.asarray(nt_logits)
        pix_type = nt[1:].argmax(axis=0) + 1
        for iid in np.unique(labels):
            if iid == 0:
                continue
            votes = np.bincount(pix_type[labels == iid], minlength=nt.shape[0])
            types[int(iid)] = int(votes.argmax())
    return labels, types


def write_instance_map(path, instances, types: dict) -> None:
    """``<path>`` tensor (f32 ids) plus ``<path>.txt`` sidecar with count and types."""
    path = Path(path)
    write_tensor(path, np.asarray(instances, dtype=np.float32))
    meta = {"instances": len(types)}
    meta.update({f"type.{k}": v for k, v in sorted(types.items())})
    write_kv(path.with_name(path.name + ".txt"), meta)


def read_instance_map(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    inst = read_tensor(path).astype(np.int64)
    meta = read_kv(path.with_name(path.name + ".txt"))
    types = {int(k[5:]): int(v) for k, v in meta.items() if k.startswith("type.")}
    if int(meta["instances"]) != len(types):
        raise ValueError("instance sidecar count does not match its type list")
    return inst, types
