"""Hypernetwork VAE: encoder d(W, omega) -> (mu, logvar), decoder h(z, theta) -> W."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypernet import hnet_forward, init_mlp, mlp_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VAEConfig:
    d_z: int = 16
    enc_hidden: tuple = (128, 64)
    dec_hidden: tuple = (64,)
    beta_kl: float = 1e-3
    warmup_frac: float = 0.1
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 32
    clip_norm: float = 1000.0

    def __post_init__(self):
        if self.d_z <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("d_z and batch_size must be positive, epochs non-negative")
        if self.beta_kl < 0 or self.lr < 0 or self.clip_norm <= 0:
            raise ValueError("beta_kl and lr must be >= 0, clip_norm > 0")


def init_vae(cfg: VAEConfig, n_weights: int, seed: int) -> tuple[dict, dict]:
    """Kaiming-initialised encoder (omega) and decoder (theta)."""
    rng = np.random.default_rng([int(seed), 0x7AE])
    enc_dims = (n_weights, *cfg.enc_hidden, 2 * cfg.d_z)
    omega = init_mlp(enc_dims, rng, gains=[2.0] * (len(enc_dims) - 2) + [1.0])
    theta = init_mlp((cfg.d_z, *cfg.dec_hidden, n_weights), rng)
    return omega, theta


def vae_encode(W, omega) -> tuple[Tensor, Tensor]:
    n = sum(1 for k in omega if k.startswith("w"))
    w0 = omega["w0"]
    if np.shape(ad.as_tensor(W).data)[-1] != np.shape(ad.as_tensor(w0).data)[0]:
        raise ValueError("weight vector does not match the encoder input size")
    out = mlp_forward(W, omega, n)
    d = out.shape[-1] // 2
    lead = (slice(None),) * (out.ndim - 1)
    return out[lead + (slice(0, d),)], out[lead + (slice(d, 2 * d),)]


def reparameterize(mu, logvar, eps) -> Tensor:
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.shape != logvar.shape or np.shape(eps) != mu.shape:
        raise ValueError("mu, logvar and eps must share a shape")
    return mu + ad.exp(logvar * 0.5) * eps


def kl_standard_normal(mu, logvar) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over the last axis."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    return ad.tsum(mu * mu + ad.exp(logvar) - 1.0 - logvar, -1) * 0.5


def vae_loss(W, omega, theta, beta_kl: float, eps) -> Tensor:
    """Mean over rows of ||W - h(z)||^2 / dim(W) + beta_kl * KL."""
    W = ad.as_tensor(W)
    mu, logvar = vae_encode(W, omega)
    z = reparameterize(mu, logvar, eps)
    diff = W - hnet_forward(z, theta)
    recon = ad.mean(diff * diff, -1)
    return ad.mean(recon + kl_standard_normal(mu, logvar) * beta_kl)


def vae_train(W: np.ndarray, cfg: VAEConfig, seed: int = 0):
    """Train on a stack of weight vectors (N, D); returns (omega, theta, history).

    Encoder and decoder gradients are clipped independently. The KL weight
    ramps linearly from 0 over the first ``warmup_frac`` of epochs.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0:
        raise ValueError("corpus must be a non-empty (N, D) array")
    rng = np.random.default_rng([int(seed), 0x7AE7])
    omega, theta = init_vae(cfg, W.shape[1], seed)
    params = {**{f"enc.{k}": v for k, v in omega.items()}, **{f"dec.{k}": v for k, v in theta.items()}}
    opt = ad.AdamState()
    history = []
    warm = max(1, int(math.ceil(cfg.warmup_frac * cfg.epochs)))
    for epoch in range(cfg.epochs):
        beta = cfg.beta_kl * min(1.0, (epoch + 1) / warm)
        order = rng.permutation(W.shape[0])
        for start in range(0, W.shape[0], cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            eps = rng.standard_normal((rows.size, cfg.d_z))

            def fn(p):
                om = {k[4:]: v for k, v in p.items() if k.startswith("enc.")}
                th = {k[4:]: v for k, v in p.items() if k.startswith("dec.")}
                return vae_loss(W[rows], om, th, beta, eps)

            loss, grads = ad.value_and_grad(fn, params)
            if not np.isfinite(loss):
                raise ad.NonFiniteError(f"VAE loss diverged at epoch {epoch}")
            enc = ad.clip_global_norm({k: g for k, g in grads.items() if k.startswith("enc.")}, cfg.clip_norm)
            dec = ad.clip_global_norm({k: g for k, g in grads.items() if k.startswith("dec.")}, cfg.clip_norm)
            params, opt = ad.adam_step(params, {**enc, **dec}, opt, cfg.lr)
            history.append(loss)
    omega = {k[4:]: v for k, v in params.items() if k.startswith("enc.")}
    theta = {k[4:]: v for k, v in params.items() if k.startswith("dec.")}
    return omega, theta, np.array(history)


def encode_means(W: np.ndarray, omega: dict) -> np.ndarray:
    return vae_encode(Tensor(W), omega)[0].data


def reconstruction_mse(W: np.ndarray, omega: dict, theta: dict) -> float:
    mu = encode_means(W, omega)
    return float(np.mean((W - hnet_forward(Tensor(mu), theta).data) ** 2))
