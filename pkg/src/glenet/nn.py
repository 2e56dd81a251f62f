"""Layers, optimizer, learning-rate schedule, and checkpoint serialization.

Everything is built on the :mod:`glenet.autodiff` tensor. Parameters are
named so a whole model can be flattened into an ordered ``{name: Tensor}``
dict for the optimizer and for checkpointing.

Checkpoints are a single file: one UTF-8 JSON manifest line (schema tag,
parameter names/shapes/offsets, user metadata) followed by the raw
little-endian float64 bytes of every parameter in manifest order. Raw bytes
mean a save/load round-trip reproduces inference outputs bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

_F8 = np.dtype("<f8")


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Fan-in-scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine map ``x @ W + b`` with named parameters.

    ``init_scale`` multiplies the drawn weights; distribution heads pass 0.0
    so their first outputs are exactly zero (a unit-sigma start for a
    log-sigma head) while consuming the same number of rng draws as any
    other layer.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str,
                 init_scale: float = 1.0):
        self.name = name
        self.W = Tensor.param(kaiming_uniform(rng, fan_in, fan_out) * init_scale)
        self.b = Tensor.param(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Iterable[int], rng: np.random.Generator, name: str):
        dims = list(dims)
        if len(dims) < 2:
            raise ConfigError(f"MLP '{name}' needs at least an input and output width")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.fc{i}") for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i < len(self.layers) - 1:
                out = ad.relu(out)
        return out

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


class PointNet:
    """Shared per-point MLP followed by max-pooling over the point axis.

    Input is a flat ``(B * N, C_in)`` tensor; the pooled output is
    ``(B, C_out)``. ReLU is applied after every layer (including the last)
    so the pooled feature is a max over non-negative activations.
    """

    def __init__(self, dims: Iterable[int], rng: np.random.Generator, name: str):
        dims = list(dims)
        self.out_dim = dims[-1]
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.pt{i}") for i in range(len(dims) - 1)
        ]

    def __call__(self, points_flat: Tensor, batch: int, n_points: int) -> Tensor:
        out = points_flat
        for layer in self.layers:
            out = ad.relu(layer(out))
        per_point = ad.reshape(out, (batch, n_points, self.out_dim))
        return ad.reduce_max(per_point, axis=1)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class OneCycleSchedule:
    """Linear warm-up to a peak, then cosine decay to a small floor.

    ``lr(0) = peak / div_start``; the peak is reached after
    ``warmup_frac`` of the total steps; the last step lands on
    ``peak * final_factor``.
    """

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    div_start: float = 25.0
    final_factor: float = 1e-3

    def __post_init__(self):
        if self.total_steps < 2:
            raise ConfigError("OneCycleSchedule needs at least 2 steps")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)")

    def lr_at(self, step: int) -> float:
        last = self.total_steps - 1
        # The schedule is defined on [0, last]; a query past the end (the
        # optimizer's lr readout after its final step) returns the final value.
        step = min(step, last)
        warm = min(max(1, int(round(self.warmup_frac * last))), last)
        start = self.peak_lr / self.div_start
        if step <= warm:
            return start + (self.peak_lr - start) * (step / warm)
        u = (step - warm) / (last - warm)
        floor = self.peak_lr * self.final_factor
        return floor + (self.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


@dataclass
class Adam:
    """Adam with bias correction; the schedule (if any) drives the step size."""

    params: dict[str, Tensor]
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    schedule: Optional[OneCycleSchedule] = None
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        if self.schedule is not None:
            return self.schedule.lr_at(self.step_count)
        return self.lr

    def step(self) -> float:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return lr


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_SCHEMA = "glenet/checkpoint@1"


def save_checkpoint(path: str, params: dict[str, Tensor], meta: Optional[dict] = None) -> None:
    """Write a manifest line plus raw float64 parameter bytes, atomically."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype=_F8)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "schema": _CHECKPOINT_SCHEMA,
        "dtype": "<f8",
        "meta": meta or {},
        "params": entries,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back into plain arrays plus its metadata dict."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("schema") != _CHECKPOINT_SCHEMA:
        raise DataError(f"unexpected checkpoint schema {manifest.get('schema')!r} in {path}")
    out: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise DataError(f"checkpoint blob truncated for parameter {entry['name']!r}")
        arr = np.frombuffer(blob[lo:hi], dtype=_F8).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.float64).copy()
    return out, manifest.get("meta", {})


def assign_parameters(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into live parameter tensors (shapes must match)."""
    missing = sorted(set(params) - set(values))
    if missing:
        raise DataError(f"checkpoint is missing parameters: {missing}")
    for name, tensor in params.items():
        arr = values[name]
        if arr.shape != tensor.data.shape:
            raise ShapeError(
                f"checkpoint shape {arr.shape} != model shape {tensor.data.shape} for {name!r}"
            )
        tensor.data = arr.astype(np.float64).copy()
