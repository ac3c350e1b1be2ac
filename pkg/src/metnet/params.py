"""Named parameters, Adam, and the on-disk checkpoint format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .tensor import Tensor

CHECKPOINT_FORMAT = "metnet-checkpoint-v1"


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


@dataclass
class ParameterStore:
    """Parameters by dotted path plus Adam moments and the step counter."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    frozen: bool = False

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> "ParameterStore":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
        return self

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every parameter cast (used for float64 gradient checks)."""
        out = ParameterStore(step=self.step)
        for name, p in self.params.items():
            out.add(name, p.data.astype(dtype))
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()


def adam_step(
    store: ParameterStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    if store.frozen:
        raise RuntimeError("parameter store is frozen")
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {store.params[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = store.params[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return store


def global_norm_clip(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def _blob_name(index: int, name: str) -> str:
    return f"{index:04d}_{name}.f32"


def save_checkpoint(store: ParameterStore, directory, profile_hash: str = "", extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(sorted(store.params)):
        data = np.ascontiguousarray(store.params[name].data, dtype="<f4")
        fname = _blob_name(i, name)
        (directory / fname).write_bytes(data.tobytes())
        entries.append({"name": name, "shape": list(data.shape), "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "f32le",
        "step": store.step,
        "profile_hash": profile_hash,
        "parameters": entries,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ParameterStore, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("dtype") != "f32le":
        raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    store = ParameterStore(step=int(manifest["step"]))
    for entry in manifest["parameters"]:
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4")
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"blob {entry['file']} has {raw.size} values, expected shape {shape}")
        store.add(entry["name"], raw.reshape(shape).astype(np.float32))
    return store, manifest
