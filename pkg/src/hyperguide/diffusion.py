"""Task-conditional latent diffusion over generator latents.

Latents are standardised per dimension before diffusion; the statistics live
on the model and are inverted after sampling. The null conditioning token is
the all-zeros descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hyperclip import hyperclip_encode
from .hypernet import hnet_forward


@dataclass(frozen=True)
class Schedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_mode: str

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep must lie in [1, {self.T}]")
        return t.astype(np.int64)

    def at(self, name: str, t):
        """Schedule entry for 1-based timestep(s) ``t``."""
        return getattr(self, name)[self.check_t(t) - 1]


def make_schedule(T: int = 100, beta_1: float = 1e-4, beta_T: float = 0.06, sigma_mode: str = "beta") -> Schedule:
    if T < 2 or not 0 < beta_1 <= beta_T < 1:
        raise ValueError("need T >= 2 and 0 < beta_1 <= beta_T < 1")
    betas = np.linspace(beta_1, beta_T, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma_mode == "beta":
        sigmas = np.sqrt(betas)
    elif sigma_mode == "tilde":
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    else:
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    return Schedule(T, betas, alphas, alpha_bars, sigmas, sigma_mode)


def q_sample(z0, t, eps, sched: Schedule) -> np.ndarray:
    """Closed-form forward marginal; ``t`` may be a scalar or one step per row."""
    ab = sched.at("alpha_bars", t)
    z0, eps = np.asarray(z0, np.float64), np.asarray(eps, np.float64)
    if np.ndim(ab) == 1 and z0.ndim > 1:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def q_step(z_prev, t, eps, sched: Schedule) -> np.ndarray:
    """Single forward transition q(z^t | z^{t-1})."""
    b = sched.at("betas", t)
    return np.sqrt(1.0 - b) * np.asarray(z_prev) + np.sqrt(b) * np.asarray(eps)


def time_embed(t, d_t: int = 150) -> np.ndarray:
    """Interleaved sin/cos embedding: entry 2i is sin(t w_i), 2i+1 is cos(t w_i), w_i = 10000^(-2i/d_t)."""
    if d_t % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, d_t, 2) / d_t)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (d_t,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class LDMConfig:
    T: int = 100
    beta_1: float = 1e-4
    beta_T: float = 0.06
    sigma_mode: str = "beta"
    hidden: tuple = (256, 512, 256)
    d_t: int = 150
    se_reduction: int = 4
    p_drop: float = 0.1
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 64
    clip_norm: float = 1.0
    tau_g: float = 10.0
    standardize: bool = True

    def __post_init__(self):
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.steps < 0 or self.lr < 0 or self.batch_size <= 0:
            raise ValueError("invalid optimisation settings")
        if self.d_t % 2 or self.se_reduction <= 0 or not self.hidden:
            raise ValueError("invalid network shape")

    def schedule(self) -> Schedule:
        return make_schedule(self.T, self.beta_1, self.beta_T, self.sigma_mode)


def init_noise_net(d_z: int, d_e: int, cfg: LDMConfig, seed: int) -> dict:
    """Residual MLP with gated blocks; the output layer starts at zero."""
    rng = np.random.default_rng([int(seed), 0xD1FF])

    def dense(a, b, gain=2.0):
        return rng.standard_normal((a, b)) * math.sqrt(gain / a), np.zeros(b)

    d_c = cfg.d_t + d_e
    p = {}
    p["in.w"], p["in.b"] = dense(d_z + d_c, cfg.hidden[0])
    prev = cfg.hidden[0]
    for i, h in enumerate(cfg.hidden):
        r = max(1, h // cfg.se_reduction)
        p[f"b{i}.w1"], p[f"b{i}.b1"] = dense(prev + d_c, h)
        p[f"b{i}.w2"], p[f"b{i}.b2"] = dense(h, h, 1.0)
        p[f"b{i}.s1"], p[f"b{i}.sb1"] = dense(h, r)
        p[f"b{i}.s2"], p[f"b{i}.sb2"] = dense(r, h, 1.0)
        if h != prev:
            p[f"b{i}.proj"] = dense(prev, h, 1.0)[0]
        prev = h
    p["out.w"], p["out.b"] = np.zeros((prev + d_c, d_z)), np.zeros(d_z)
    return p


def n_blocks(params) -> int:
    return sum(1 for k in params if k.endswith(".w1"))


def noise_net(zt, t, e, params) -> Tensor:
    """Noise estimate for latents (B, d_z) at steps ``t`` (scalar or (B,)) under descriptors (B, d_e)."""
    zt = ad.as_tensor(zt)
    d_z = np.shape(ad.as_tensor(params["out.b"]).data)[0]
    w_in = ad.as_tensor(params["in.w"])
    e = np.broadcast_to(np.asarray(e, np.float64), zt.shape[:-1] + (np.shape(e)[-1],))
    t = np.broadcast_to(np.asarray(t), zt.shape[:-1])
    temb = time_embed(t, w_in.shape[0] - d_z - e.shape[-1])
    if zt.shape[-1] != d_z or temb.shape[-1] <= 0:
        raise ValueError("latent or descriptor dimension does not match the network")
    cond = np.concatenate([temb, e], axis=-1)
    h = ad.relu(ad.matmul(ad.concat([zt, cond], -1), w_in) + params["in.b"])
    for i in range(n_blocks(params)):
        u = ad.concat([h, cond], -1)
        v = ad.relu(ad.matmul(u, params[f"b{i}.w1"]) + params[f"b{i}.b1"])
        v = ad.matmul(v, params[f"b{i}.w2"]) + params[f"b{i}.b2"]
        s = ad.relu(ad.matmul(v, params[f"b{i}.s1"]) + params[f"b{i}.sb1"])
        v = v * ad.sigmoid(ad.matmul(s, params[f"b{i}.s2"]) + params[f"b{i}.sb2"])
        skip = ad.matmul(h, params[f"b{i}.proj"]) if f"b{i}.proj" in params else h
        h = ad.relu(skip + v)
    return ad.matmul(ad.concat([h, cond], -1), params["out.w"]) + params["out.b"]


def ldm_loss(params, z0: np.ndarray, e: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: Schedule) -> Tensor:
    """Mean over rows of ||eps - eps_psi(q_sample(z0, t, eps), t, e)||^2."""
    zt = q_sample(z0, t, eps, sched)
    d = Tensor(eps) - noise_net(zt, t, e, params)
    return ad.mean(ad.tsum(d * d, -1))


@dataclass
class HyperLDM:
    params: dict
    cfg: LDMConfig
    mean: np.ndarray
    scale: np.ndarray
    d_e: int
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def schedule(self) -> Schedule:
        return self.cfg.schedule()

    def to_latent(self, s):
        return s * self.scale + self.mean

    def from_latent(self, z):
        return (np.asarray(z) - self.mean) / self.scale


def draw_training_batch(n: int, cfg: LDMConfig, d_z: int, rng: np.random.Generator):
    rows = rng.integers(n, size=cfg.batch_size)
    t = rng.integers(1, cfg.T + 1, size=cfg.batch_size)
    eps = rng.standard_normal((cfg.batch_size, d_z))
    keep = rng.random(cfg.batch_size) >= cfg.p_drop
    return rows, t, eps, keep


def ldm_train_step(params, opt, z0, e, t, eps, keep, sched: Schedule, lr: float, clip: float):
    """One Adam step on a batch; rows with ``keep`` False see the null descriptor."""
    if len(z0) == 0:
        raise ValueError("empty batch")
    e = np.where(np.asarray(keep)[:, None], e, 0.0)
    loss, grads = ad.value_and_grad(lambda p: ldm_loss(p, z0, e, t, eps, sched), params)
    if not np.isfinite(loss):
        raise ad.NonFiniteError("diffusion loss is not finite")
    grads = ad.clip_global_norm(grads, clip)
    params, opt = ad.adam_step(params, grads, opt, lr)
    return params, opt, loss


def ldm_train(Z: np.ndarray, E: np.ndarray, cfg: LDMConfig, seed: int = 0) -> HyperLDM:
    """Fit the noise network on latents ``Z`` (N, d_z) with descriptors ``E`` (N, d_e).

    Rows whose descriptor is all zeros are trained unconditionally only.
    """
    Z, E = np.asarray(Z, np.float64), np.asarray(E, np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0 or E.shape[0] != Z.shape[0]:
        raise ValueError("latents must be a non-empty (N, d_z) array aligned with descriptors")
    if cfg.standardize:
        mean, scale = Z.mean(0), Z.std(0) + 1e-8
    else:
        mean, scale = np.zeros(Z.shape[1]), np.ones(Z.shape[1])
    S = (Z - mean) / scale
    sched = cfg.schedule()
    rng = np.random.default_rng([int(seed), 0x1D3])
    params = init_noise_net(Z.shape[1], E.shape[1], cfg, seed)
    opt = ad.AdamState()
    history = np.empty(cfg.steps)
    for step in range(cfg.steps):
        rows, t, eps, keep = draw_training_batch(len(S), cfg, S.shape[1], rng)
        params, opt, history[step] = ldm_train_step(params, opt, S[rows], E[rows], t, eps, keep,
                                                    sched, cfg.lr, cfg.clip_norm)
    return HyperLDM(params, cfg, mean, scale, E.shape[1], history)


def cfg_mix(eps_u, eps_c, gamma: float) -> np.ndarray:
    return (1.0 - gamma) * np.asarray(eps_u) + gamma * np.asarray(eps_c)


def ddpm_step(zt, t: int, eps_hat, xi, sched: Schedule) -> np.ndarray:
    """Ancestral reverse step; no noise is added at t = 1."""
    sched.check_t(t)
    b, a, ab = sched.at("betas", t), sched.at("alphas", t), sched.at("alpha_bars", t)
    sigma = 0.0 if t == 1 else sched.at("sigmas", t)
    return (np.asarray(zt) - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a) + sigma * np.asarray(xi)


def guided_eps(zt, t: int, e, gamma: float, params) -> np.ndarray:
    """Classifier-free mix; gamma in {0, 1} evaluates a single branch."""
    if gamma == 0:
        return noise_net(zt, t, np.zeros_like(e), params).data
    if gamma == 1:
        return noise_net(zt, t, e, params).data
    return cfg_mix(noise_net(zt, t, np.zeros_like(e), params).data, noise_net(zt, t, e, params).data, gamma)


def reverse_process(model: HyperLDM, n: int, seed: int, eps_fn) -> np.ndarray:
    """Run the sampler with ``eps_fn(zt, t)``; returns standardised latents (n, d_z)."""
    sched = model.schedule
    d_z = model.mean.shape[0]
    rng = np.random.default_rng([int(seed), 0x5A3])
    z = rng.standard_normal((n, d_z))
    for t in range(sched.T, 0, -1):
        xi = rng.standard_normal((n, d_z))
        z = ddpm_step(z, t, eps_fn(z, t), xi, sched)
    return z


def sample_latent(model: HyperLDM, e, gamma: float, seed: int, n: int | None = None) -> np.ndarray:
    """Latents (un-standardised) for descriptors ``e`` (B, d_e), or ``n`` unconditional draws when e is None."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if e is None:
        if gamma != 0:
            raise ValueError("conditional sampling requires a descriptor")
        if n is None:
            raise ValueError("give n when sampling without descriptors")
        e = np.zeros((n, model.d_e))
    e = np.atleast_2d(np.asarray(e, np.float64))
    s = reverse_process(model, e.shape[0], seed, lambda z, t: guided_eps(z, t, e, gamma, model.params))
    return model.to_latent(s)


def classifier_guidance_mix(eps, grad_logp, eta: float, scale) -> np.ndarray:
    """eps - eta * scale * grad log p(e | z)."""
    return np.asarray(eps) - eta * np.asarray(scale) * np.asarray(grad_logp)


def clip_log_likelihood_grad(s, e, model: HyperLDM, clip_params, theta, tau_g: float) -> np.ndarray:
    """Gradient w.r.t. standardised latents of tau_g * cos(CLIP_H(h(z)), e)."""
    st = Tensor(s)
    with ad.Tape() as tape:
        tape.watch(st)
        emb = hyperclip_encode(hnet_forward(st * model.scale + model.mean, theta), clip_params)
        if np.any(np.linalg.norm(emb.data, axis=-1) == 0):
            raise ad.ZeroNormError("HyperCLIP embedding is zero")
        logp = ad.tsum(ad.cosine_similarity(emb, e)) * tau_g
    return tape.gradient(logp, st).data


def classifier_guided_eps(zt, t: int, e, eta: float, model: HyperLDM, clip_params, theta) -> np.ndarray:
    """Conditional noise estimate pushed along the HyperCLIP likelihood gradient, scaled by sigma_t."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    eps = noise_net(zt, t, e, model.params).data
    if eta == 0:
        return eps
    grad = clip_log_likelihood_grad(zt, e, model, clip_params, theta, model.cfg.tau_g)
    return classifier_guidance_mix(eps, grad, eta, model.schedule.at("sigmas", t))


def sample_classifier_guided(model: HyperLDM, e, eta: float, seed: int, clip_params, theta) -> np.ndarray:
    e = np.atleast_2d(np.asarray(e, np.float64))
    s = reverse_process(model, e.shape[0], seed,
                        lambda z, t: classifier_guided_eps(z, t, e, eta, model, clip_params, theta))
    return model.to_latent(s)
