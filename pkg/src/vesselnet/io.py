"""Binary tensor files and checkpoint directories.

Tensor file layout (little-endian)::

    b"MVNT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 extents | payload

Checkpoints are a directory of ``<param name>.mvnt`` files, a ``config.txt``
and a ``manifest.txt``; both text files are flat ``key=value`` lines.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    """Checkpoint does not fit the model or config it is loaded into."""


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("not an MVNT tensor file")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    start = 7 + 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - start != count * dtype.itemsize:
        raise FormatError(f"payload size {len(buf) - start} does not match shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, offset=start).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- key=value text --------------------------------------------------------

def format_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict:
    return parse_kv(Path(path).read_text())


def write_kv(path, items: dict) -> None:
    Path(path).write_text(format_kv(items))


# -- checkpoints -------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(format_kv(config).encode()).hexdigest()[:16]


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def save_checkpoint(path, named_params, config: dict, step: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "vesselnet-checkpoint", "version": VERSION,
                "config_hash": config_hash(config), "step": step}
    for name, t in named_params:
        data = t.data if hasattr(t, "data") else t
        write_tensor(path / f"{name}.mvnt", data)
        manifest[f"param.{name}"] = _shape_str(data.shape)
    write_kv(path / "config.txt", config)
    write_kv(path / "manifest.txt", manifest)


def read_checkpoint_config(path) -> dict:
    return read_kv(Path(path) / "config.txt")


def config_diff(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [f"{k}: {a.get(k, '<missing>')} != {b.get(k, '<missing>')}"
            for k in keys if str(a.get(k, "<missing>")) != str(b.get(k, "<missing>"))]


def load_checkpoint(path, named_params, config: dict | None = None) -> int:
    """Copy stored tensors into ``named_params`` in place; returns the step count.

    Every name and shape must match. With ``config`` given, the stored config
    must match too; the error lists the differing keys.
    """
    path = Path(path)
    manifest = read_kv(path / "manifest.txt")
    if config is not None:
        stored = read_checkpoint_config(path)
        diff = config_diff({k: str(v) for k, v in config.items()}, stored)
        if diff:
            raise CheckpointMismatch("config mismatch:\n  " + "\n  ".join(diff))
    stored_names = {k[len("param."):]: v for k, v in manifest.items() if k.startswith("param.")}
    names = {n for n, _ in named_params}
    if set(stored_names) != names:
        missing = sorted(names - set(stored_names))
        extra = sorted(set(stored_names) - names)
        raise CheckpointMismatch(f"parameter names differ: missing={missing} unexpected={extra}")
    for name, t in named_params:
        arr = read_tensor(path / f"{name}.mvnt")
        if arr.shape != t.data.shape or stored_names[name] != _shape_str(arr.shape):
            raise CheckpointMismatch(f"{name}: stored shape {arr.shape} != model shape {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=False)
    return int(manifest.get("step", 0))


def output_root(default=".") -> Path:
    return Path(os.environ.get("VESSELNET_OUTPUT", default))
