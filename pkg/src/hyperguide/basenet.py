"""Base classifier f(x, W) over a flat weight vector, NTK-parametrised.

Each layer computes ``a @ w / sqrt(fan_in) + b``. Flat vectors may carry
leading batch dimensions, so one call evaluates a different network per task:
``x`` of shape (B, n, d) with ``W`` of shape (B, D) gives logits (B, n, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .universe import LabeledSet


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_bias: bool = True

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + (self.out_dim if self.has_bias else 0)


@dataclass(frozen=True)
class BaseNetConfig:
    input_dim: int = 2
    hidden: tuple = (32, 32)
    n_classes: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if any(h <= 0 for h in self.hidden) or self.input_dim <= 0:
            raise ValueError("layer widths must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.activation != "relu":
            raise ValueError("only relu activations are supported")

    def manifest(self) -> tuple[LayerSpec, ...]:
        dims = (self.input_dim, *self.hidden, self.n_classes)
        return tuple(LayerSpec(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.manifest())


@dataclass
class BaseWeights:
    flat: np.ndarray
    manifest: tuple = field(default_factory=lambda: BaseNetConfig().manifest())

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        expected = sum(layer.n_params for layer in self.manifest)
        if self.flat.shape[-1] != expected:
            raise ValueError(f"flat vector has {self.flat.shape[-1]} entries, manifest needs {expected}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("weights must be finite")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        out, off = [], 0
        for layer in self.manifest:
            nw = layer.in_dim * layer.out_dim
            w = self.flat[..., off:off + nw].reshape(self.flat.shape[:-1] + (layer.in_dim, layer.out_dim))
            off += nw
            b = None
            if layer.has_bias:
                b = self.flat[..., off:off + layer.out_dim]
                off += layer.out_dim
            out.append((w, b))
        return out

    @classmethod
    def from_layers(cls, layers, manifest) -> "BaseWeights":
        parts = []
        for (w, b), layer in zip(layers, manifest):
            lead = w.shape[:-2]
            parts.append(w.reshape(lead + (-1,)))
            if layer.has_bias:
                parts.append(b)
        return cls(np.concatenate(parts, axis=-1), tuple(manifest))


def init_base(cfg: BaseNetConfig, seed: int) -> BaseWeights:
    """Kaiming init in NTK form: stored weights N(0, 2), so the effective
    weight ``w / sqrt(fan_in)`` has variance 2 / fan_in. Biases start at zero."""
    rng = np.random.default_rng([int(seed), 0xBA5E])
    layers = []
    for layer in cfg.manifest():
        w = rng.standard_normal((layer.in_dim, layer.out_dim)) * math.sqrt(2.0)
        layers.append((w, np.zeros(layer.out_dim) if layer.has_bias else None))
    return BaseWeights.from_layers(layers, cfg.manifest())


def kaiming_stored_std() -> float:
    """Per-entry std of freshly initialised stored base weights."""
    return math.sqrt(2.0)


def base_forward(x, flat, manifest=None) -> Tensor:
    """Logits of the base network. ``flat`` is a Tensor (..., D) or BaseWeights."""
    if isinstance(flat, BaseWeights):
        manifest, flat = flat.manifest, Tensor(flat.flat)
    if manifest is None:
        raise ValueError("a manifest is required unless BaseWeights are passed")
    flat = ad.as_tensor(flat)
    a = ad.as_tensor(x)
    expected = sum(layer.n_params for layer in manifest)
    if flat.shape[-1] != expected:
        raise ValueError(f"weight vector length {flat.shape[-1]} != {expected}")
    if a.shape[-1] != manifest[0].in_dim:
        raise ValueError(f"input dim {a.shape[-1]} != {manifest[0].in_dim}")
    lead = flat.shape[:-1]
    pre = (slice(None),) * len(lead)
    off = 0
    for i, layer in enumerate(manifest):
        nw = layer.in_dim * layer.out_dim
        w = ad.reshape(flat[pre + (slice(off, off + nw),)], lead + (layer.in_dim, layer.out_dim))
        off += nw
        a = ad.matmul(a, w) * (1.0 / math.sqrt(layer.in_dim))
        if layer.has_bias:
            b = ad.reshape(flat[pre + (slice(off, off + layer.out_dim),)], lead + (1, layer.out_dim))
            off += layer.out_dim
            a = a + b
        if i < len(manifest) - 1:
            a = ad.relu(a)
    return a


def task_loss(flat, batch: LabeledSet, manifest) -> Tensor:
    """Mean softmax cross-entropy of the base network on ``batch``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return ad.softmax_cross_entropy(base_forward(batch.x, flat, manifest), batch.y)


def batched_loss(flat, x: np.ndarray, y: np.ndarray, manifest) -> Tensor:
    """Sum over tasks of per-task mean cross-entropy; x (B, n, d), y (B, n)."""
    return ad.tsum(ad.softmax_cross_entropy(base_forward(x, flat, manifest), y))


def predict(flat: np.ndarray, x: np.ndarray, manifest) -> np.ndarray:
    return base_forward(x, Tensor(flat), manifest).data.argmax(-1)


def accuracy(flat: np.ndarray, batch: LabeledSet, manifest) -> float:
    return float(np.mean(predict(flat, batch.x, manifest) == batch.y))


def fine_tune(w0: BaseWeights, support: LabeledSet, steps: int = 50, lr: float = 0.1) -> BaseWeights:
    """Full-batch gradient descent on the support loss. ``w0`` is not modified."""
    if steps < 0 or lr <= 0:
        raise ValueError("need steps >= 0 and lr > 0")
    flat = w0.flat.copy()
    for step in range(steps):
        w = Tensor(flat)
        with ad.Tape() as tape:
            tape.watch(w)
            loss = task_loss(w, support, w0.manifest)
        g = tape.gradient(loss, w).data
        flat = flat - lr * g
        if not np.all(np.isfinite(flat)):
            raise ad.NonFiniteError(f"fine-tuning diverged at step {step}")
    return BaseWeights(flat, w0.manifest)
