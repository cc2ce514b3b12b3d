"""Seeded synthetic scenes and 3D patch sampling.

Every sample ``i`` of a dataset generated with ``seed`` draws from
``np.random.default_rng([seed, i])``, so regenerating is byte-identical and
independent of ``count``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .io import read_kv, read_tensor, write_kv, write_tensor
from .postproc import hv_maps

GENERATOR_VERSION = 1
KINDS = ("vessels2d", "vessels3d", "nuclei2d")


@dataclass
class SyntheticScene:
    image: np.ndarray  # (C, *S) float32
    mask: np.ndarray  # (*S) int class ids
    instances: np.ndarray | None = None  # (*S) instance ids, 0 = background
    hv: np.ndarray | None = None  # (2, H, W)
    types: np.ndarray | None = None  # (*S) type ids, 0 = background
    params: dict | None = None


# -- vessels -------------------------------------------------------------------

def _smooth_curve(rng, size: int, nd: int, n_points: int = 400) -> np.ndarray:
    """A gently bending curve crossing the field of view, as (n_points, nd) coordinates."""
    start = rng.uniform(0, size, nd)
    direction = rng.normal(size=nd)
    direction /= np.linalg.norm(direction)
    length = size * rng.uniform(0.8, 1.6)
    t = np.linspace(-0.5, 0.5, n_points)[:, None]
    pts = start + t * length * direction
    # low-frequency sinusoidal bending perpendicular-ish to the main direction
    for _ in range(2):
        bend = rng.normal(size=nd)
        bend -= bend.dot(direction) * direction
        bend /= max(np.linalg.norm(bend), 1e-9)
        amp = rng.uniform(0.0, 0.12) * size
        freq = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        pts = pts + amp * np.sin(2 * np.pi * freq * t + phase) * bend
    return pts


def _distance_to_polyline(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance from each grid point (M, nd) to the nearest of the densely sampled curve points."""
    return cKDTree(pts).query(grid)[0]


def make_vessels(rng, size: int = 64, nd: int = 2, n_vessels=(2, 5), widths=(1.0, 4.0),
                 noise: float = 0.1) -> SyntheticScene:
    shape = (size,) * nd
    grid = np.stack(np.meshgrid(*[np.arange(size)] * nd, indexing="ij"), -1).reshape(-1, nd).astype(np.float64)
    coverage = np.zeros(grid.shape[0])
    mask = np.zeros(grid.shape[0], dtype=bool)
    count = int(rng.integers(n_vessels[0], n_vessels[1] + 1))
    for _ in range(count):
        radius = rng.uniform(*widths) / 2.0
        dist = _distance_to_polyline(grid, _smooth_curve(rng, size, nd))
        mask |= dist <= radius
        coverage = np.maximum(coverage, np.clip(radius + 0.5 - dist, 0.0, 1.0))
    contrast = rng.uniform(0.7, 1.0)
    ramp = grid @ rng.normal(scale=0.1 / size, size=nd)
    background = 0.2 + ramp - ramp.mean()
    image = background + contrast * coverage + rng.normal(scale=noise, size=coverage.shape)
    return SyntheticScene(
        image=image.reshape((1,) + shape).astype(np.float32),
        mask=mask.reshape(shape).astype(np.int64),
        params={"vessels": count, "noise": noise, "contrast": round(float(contrast), 6)},
    )


# -- nuclei -------------------------------------------------------------------

def make_nuclei(rng, size: int = 64, n_nuclei=(4, 9), radii=(4.0, 8.0), num_types: int = 2,
                noise: float = 0.08, touch_gap: float = -0.5) -> SyntheticScene:
    """Ellipses placed so they at most lightly touch; later ones never overwrite earlier ones."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    inst = np.zeros((size, size), dtype=np.int64)
    types = np.zeros((size, size), dtype=np.int64)
    placed = []
    target = int(rng.integers(n_nuclei[0], n_nuclei[1] + 1))
    for _ in range(200):
        if len(placed) == target:
            break
        ry, rx = rng.uniform(*radii, 2)
        cy, cx = rng.uniform(ry, size - ry), rng.uniform(rx, size - rx)
        r = max(ry, rx)
        if any(np.hypot(cy - py, cx - px) < r + pr + touch_gap for py, px, pr in placed):
            continue
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / rx
        v = (-(xx - cx) * s + (yy - cy) * c) / ry
        region = (u * u + v * v <= 1.0) & (inst == 0)
        if region.sum() < 12:
            continue
        placed.append((cy, cx, r))
        inst[region] = len(placed)
        types[region] = int(rng.integers(1, num_types)) if num_types > 1 else 1
    brightness = np.where(types > 0, 0.5 + 0.3 * types / max(num_types - 1, 1), 0.15)
    image = brightness + rng.normal(scale=noise, size=inst.shape)
    return SyntheticScene(
        image=image[None].astype(np.float32),
        mask=(inst > 0).astype(np.int64),
        instances=inst,
        hv=hv_maps(inst).astype(np.float32),
        types=types,
        params={"nuclei": len(placed), "noise": noise},
    )


def make_scene(kind: str, rng, size: int | None = None) -> SyntheticScene:
    if kind == "vessels2d":
        return make_vessels(rng, size or 64, 2)
    if kind == "vessels3d":
        return make_vessels(rng, size or 32, 3)
    if kind == "nuclei2d":
        return make_nuclei(rng, size or 64)
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")


def gen_synthetic(kind: str, count: int, seed: int, out_dir, size: int | None = None) -> Path:
    """Write ``count`` scenes plus ``manifest.txt`` to ``out_dir``."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        scene = make_scene(kind, np.random.default_rng([seed, i]), size)
        sid = f"{i:05d}"
        ids.append(sid)
        write_tensor(out / f"{sid}_image.mvnt", scene.image)
        write_tensor(out / f"{sid}_mask.mvnt", scene.mask.astype(np.float32))
        if scene.instances is not None:
            write_tensor(out / f"{sid}_inst.mvnt", scene.instances.astype(np.float32))
            write_tensor(out / f"{sid}_hv.mvnt", scene.hv)
            write_tensor(out / f"{sid}_type.mvnt", scene.types.astype(np.float32))
    write_kv(out / "manifest.txt", {
        "kind": kind, "count": count, "seed": seed, "size": size or "default",
        "generator_version": GENERATOR_VERSION, "samples": ",".join(ids),
    })
    return out


def load_dataset(path) -> tuple[dict, list[SyntheticScene]]:
    path = Path(path)
    manifest = read_kv(path / "manifest.txt")
    ids = [s for s in manifest.get("samples", "").split(",") if s]
    scenes = []
    for sid in ids:
        image = read_tensor(path / f"{sid}_image.mvnt")
        mask = read_tensor(path / f"{sid}_mask.mvnt").astype(np.int64)
        extra = {}
        if (path / f"{sid}_inst.mvnt").exists():
            extra = {
                "instances": read_tensor(path / f"{sid}_inst.mvnt").astype(np.int64),
                "hv": read_tensor(path / f"{sid}_hv.mvnt"),
                "types": read_tensor(path / f"{sid}_type.mvnt").astype(np.int64),
            }
        scenes.append(SyntheticScene(image=image, mask=mask, **extra))
    return manifest, scenes


# -- patches -------------------------------------------------------------------

def sample_patches(volume, mask, patch, batch: int, seed=None, *, rng=None, pos_fraction: float = 0.5):
    """Random ``patch``-sized crops of ``volume`` (C, *S) and ``mask`` (*S).

    The first ``ceil(batch * pos_fraction)`` crops of every batch are centred on a
    random foreground voxel (when the mask has any), the rest are uniform.
    Returns ``(images (B, C, *patch), masks (B, *patch), corners (B, nd))``.
    """
    volume, mask = np.asarray(volume), np.asarray(mask)
    spatial = mask.shape
    patch = (patch,) * len(spatial) if isinstance(patch, int) else tuple(patch)
    if volume.shape[1:] != spatial:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} disagree")
    if any(p > s for p, s in zip(patch, spatial)):
        raise ValueError(f"volume {spatial} smaller than patch {patch}; need at least {patch}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    fg = np.argwhere(mask > 0)
    n_pos = int(np.ceil(batch * pos_fraction)) if len(fg) else 0
    hi = np.array(spatial) - np.array(patch)
    corners = []
    for b in range(batch):
        if b < n_pos:
            centre = fg[rng.integers(len(fg))]
            corner = np.clip(centre - np.array(patch) // 2, 0, hi)
        else:
            corner = np.array([rng.integers(0, h + 1) for h in hi])
        corners.append(corner)
    corners = np.array(corners, dtype=np.int64)
    sl = [tuple(slice(c, c + p) for c, p in zip(corner, patch)) for corner in corners]
    images = np.stack([volume[(slice(None),) + s] for s in sl])
    masks = np.stack([mask[s] for s in sl])
    return images, masks, corners
