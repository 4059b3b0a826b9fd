"""Hypernetwork h(z, theta): an MLP from a latent or descriptor to base weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class HyperConfig:
    d_in: int = 16
    hidden: tuple = (64,)
    # multiplier on the Kaiming std of the output layer
    out_scale: float = 1.0

    def __post_init__(self):
        if self.d_in <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("dimensions must be positive")
        if self.out_scale <= 0:
            raise ValueError("out_scale must be positive")


def layer_names(n_layers: int) -> list[tuple[str, str]]:
    return [(f"w{i}", f"b{i}") for i in range(n_layers)]


def init_mlp(dims, rng: np.random.Generator, gains=None, prefix: str = "") -> dict:
    """Kaiming-normal weights (std sqrt(gain/fan_in)), zero biases."""
    gains = gains or [2.0] * (len(dims) - 1)
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}w{i}"] = rng.standard_normal((a, b)) * math.sqrt(gains[i] / a)
        params[f"{prefix}b{i}"] = np.zeros(b)
    return params


def mlp_forward(x, params, n_layers: int, act=ad.relu, prefix: str = "") -> Tensor:
    """Plain MLP with activation between layers and a linear head."""
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = ad.matmul(h, params[f"{prefix}w{i}"]) + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


def init_hnet(cfg: HyperConfig, n_out: int, seed: int) -> tuple[dict, np.ndarray]:
    """Kaiming-initialised theta plus a standard-normal initial latent z0."""
    rng = np.random.default_rng([int(seed), 0x4E7])
    dims = (cfg.d_in, *cfg.hidden, n_out)
    theta = init_mlp(dims, rng)
    last = f"w{len(dims) - 2}"
    theta[last] = theta[last] * cfg.out_scale
    z0 = rng.standard_normal(cfg.d_in)
    return theta, z0


def n_layers(theta) -> int:
    return sum(1 for k in theta if k.startswith("w"))


def hnet_forward(z, theta) -> Tensor:
    """Generated flat weights for latent(s) ``z`` of shape (..., d_in)."""
    z = ad.as_tensor(z)
    d_in = np.shape(theta["w0"].data if isinstance(theta["w0"], Tensor) else theta["w0"])[0]
    if z.shape[-1] != d_in:
        raise ValueError(f"latent has dim {z.shape[-1]}, hypernetwork expects {d_in}")
    h = z if z.ndim >= 2 else ad.reshape(z, (1, d_in))
    out = mlp_forward(h, theta, n_layers(theta))
    return out if z.ndim >= 2 else ad.reshape(out, (out.shape[-1],))


def generate(z: np.ndarray, theta: dict) -> np.ndarray:
    return hnet_forward(Tensor(z), theta).data


def lipschitz_estimate(theta: dict, zs: np.ndarray, delta: float = 1e-3, seed: int = 0) -> float:
    """Largest observed ||h(z + d) - h(z)|| / ||d|| over the sample points."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(zs.shape)
    d *= delta / np.linalg.norm(d, axis=-1, keepdims=True)
    diff = generate(zs + d, theta) - generate(zs, theta)
    return float(np.max(np.linalg.norm(diff, axis=-1) / delta))
