"""Adam optimizer and the binary checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SEGF0001"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, name: str, detail: str = "non-finite gradient"):
        super().__init__(f"training diverged at step {step}: {detail} in {name!r}")
        self.step = step
        self.name = name


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(step, name)
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    new_params, m_out, v_out = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g is None:
            new_params[name], m_out[name], v_out[name] = p, m, v
            continue
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        m_out[name] = m.astype(p.dtype)
        v_out[name] = v.astype(p.dtype)
    return new_params, AdamState(step, m_out, v_out)


_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | raw little-endian buffers``.

    Buffers appear in header order; the header lists name, shape and dtype.
    """
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = _NAMES.get(arr.dtype)
        if key is None:
            raise TypeError(f"{name!r}: unsupported dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))
        offset += count * dt.itemsize
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after declared buffers")
    return arrays, header["meta"]
