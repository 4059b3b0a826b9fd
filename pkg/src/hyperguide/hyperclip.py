"""Reverse hypernetwork mapping base weights into descriptor space, trained contrastively.

Also hosts latent-space guidance: gradient descent on a generator latent so the
generated weights' embedding aligns with a target descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypernet import hnet_forward, init_mlp, mlp_forward


@dataclass(frozen=True)
class CLIPConfig:
    hidden: int = 64
    d_embed: int = 16
    tau_init: float = 1.0 / 0.07
    learn_tau: bool = True
    epochs: int = 1500
    lr: float = 1e-3
    batch_size: int = 64
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.hidden <= 0 or self.d_embed <= 0 or self.batch_size <= 0:
            raise ValueError("dimensions and batch size must be positive")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 0.01
    steps: int = 10
    lr: float = 0.1
    squared: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.steps < 0 or self.lr < 0:
            raise ValueError("lam, steps and lr must be non-negative")


def init_clip(cfg: CLIPConfig, n_weights: int, seed: int) -> dict:
    """Encoder weights (tanh hidden layer) plus ``log_tau``, the log logit scale."""
    rng = np.random.default_rng([int(seed), 0xC119])
    params = init_mlp((n_weights, cfg.hidden, cfg.d_embed), rng, gains=[1.0, 1.0])
    params["log_tau"] = np.array(math.log(cfg.tau_init))
    return params


def input_stats(W: np.ndarray) -> dict:
    """Per-coordinate standardisation constants, frozen into the encoder."""
    return {"in_mean": W.mean(axis=0), "in_scale": W.std(axis=0) + 1e-3}


def tau_inv(params) -> float:
    lt = params["log_tau"]
    return float(np.exp(lt.data if isinstance(lt, Tensor) else lt))


def hyperclip_encode(W, params) -> Tensor:
    """Raw (unnormalised) embedding of weights (..., D)."""
    W = ad.as_tensor(W)
    w0 = params["w0"]
    if W.shape[-1] != np.shape(w0.data if isinstance(w0, Tensor) else w0)[0]:
        raise ValueError(f"weights have length {W.shape[-1]}, encoder expects {np.shape(w0)[0]}")
    if "in_mean" in params:
        W = (W - params["in_mean"]) / params["in_scale"]
    if W.ndim == 1:
        return ad.reshape(mlp_forward(ad.reshape(W, (1, W.shape[0])), params, 2, act=ad.tanh), (-1,))
    return mlp_forward(W, params, 2, act=ad.tanh)


def unit(x, axis: int = -1) -> Tensor:
    """Normalise rows to unit length; zero rows are rejected."""
    x = ad.as_tensor(x)
    n = ad.norm(x, axis, keepdims=True)
    if np.any(n.data == 0):
        raise ad.ZeroNormError("cannot normalise a zero embedding")
    return x / n


def clip_matrix_loss(T, H, scale) -> Tensor:
    """Symmetric cross-entropy over scale * T H^T against the identity matching."""
    T, H = ad.as_tensor(T), ad.as_tensor(H)
    if T.ndim != 2 or T.shape != H.shape:
        raise ValueError("T and H must be matching (N, d) matrices")
    if T.shape[0] == 0:
        raise ValueError("need at least one pair")
    for name, m in (("T", T), ("H", H)):
        if np.max(np.abs(np.linalg.norm(m.data, axis=1) - 1.0)) > 1e-6:
            raise ValueError(f"rows of {name} must be unit-norm")
    labels = np.arange(T.shape[0])
    logits = ad.matmul(T, H.T) * scale
    return (ad.softmax_cross_entropy(logits, labels) + ad.softmax_cross_entropy(logits.T, labels)) * 0.5


def contrastive_batches(task_ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Row batches with distinct task ids: one random entry per task, tasks shuffled."""
    ids = np.unique(task_ids)
    rows = np.array([rng.choice(np.flatnonzero(task_ids == t)) for t in ids])
    rows = rows[rng.permutation(rows.size)]
    return [rows[i:i + batch_size] for i in range(0, rows.size, batch_size)]


def clip_loss(params, W, E) -> Tensor:
    if np.unique(E, axis=0).shape[0] != E.shape[0]:
        raise ValueError("batch contains duplicate tasks")
    H = unit(hyperclip_encode(W, params))
    return clip_matrix_loss(unit(E), H, ad.exp(params["log_tau"]))


def train_hyperclip(W: np.ndarray, E: np.ndarray, task_ids: np.ndarray, cfg: CLIPConfig, seed: int = 0):
    """Contrastive training on corpus weights ``W`` with descriptors ``E``.

    Returns (params, loss history). Each batch pairs distinct tasks only.
    Inputs are standardised with corpus statistics that stay fixed during training.
    """
    W, E, task_ids = np.asarray(W, np.float64), np.asarray(E, np.float64), np.asarray(task_ids)
    if not (W.shape[0] == E.shape[0] == task_ids.shape[0]) or W.shape[0] == 0:
        raise ValueError("corpus arrays must be non-empty and aligned")
    rng = np.random.default_rng([int(seed), 0xC11A])
    params = init_clip(cfg, W.shape[1], seed)
    stats = input_stats(W)
    opt = ad.AdamState()
    history = []
    for _ in range(cfg.epochs):
        for rows in contrastive_batches(task_ids, cfg.batch_size, rng):
            if len(set(task_ids[rows].tolist())) != rows.size:
                raise ValueError("batch contains duplicate task ids")
            loss, grads = ad.value_and_grad(lambda p: clip_loss({**p, **stats}, W[rows], E[rows]), params)
            if not cfg.learn_tau:
                grads["log_tau"] = np.zeros_like(grads["log_tau"])
            grads = ad.clip_global_norm(grads, cfg.clip_norm)
            params, opt = ad.adam_step(params, grads, opt, cfg.lr)
            history.append(loss)
    return {**params, **stats}, np.array(history)


def task_inference(W: np.ndarray, candidates: np.ndarray, params) -> np.ndarray:
    """Softmax over scaled cosine similarity between CLIP_H(W) and each candidate."""
    candidates = np.atleast_2d(np.asarray(candidates, np.float64))
    if candidates.shape[0] == 0:
        raise ValueError("need at least one candidate")
    h = unit(hyperclip_encode(Tensor(W), params)).data
    c = unit(candidates).data
    logits = tau_inv(params) * (h @ c.T)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def retrieval_accuracy(W: np.ndarray, task_ids: np.ndarray, E_table: np.ndarray, table_ids: np.ndarray,
                       params, n_way: int = 16, seed: int = 0) -> float:
    """Top-1 retrieval over candidate sets of the true descriptor plus ``n_way - 1`` distractors."""
    rng = np.random.default_rng([int(seed), 0x2E7])
    table_ids = np.asarray(table_ids)
    if len(table_ids) < n_way:
        raise ValueError("not enough tasks for the candidate set size")
    hits = 0
    for w, tid in zip(W, task_ids):
        others = np.flatnonzero(table_ids != tid)
        pick = rng.choice(others, n_way - 1, replace=False)
        cand = np.concatenate([E_table[table_ids == tid][:1], E_table[pick]])
        hits += int(np.argmax(task_inference(w, cand, params)) == 0)
    return hits / len(task_ids)


def guidance_loss(z, z0, e_target, theta, params, lam: float, squared: bool = False) -> Tensor:
    """Per-row -cos(CLIP_H(h(z)), e) + lam * ||z - z0|| (or its square), summed over rows."""
    z = ad.as_tensor(z)
    emb = hyperclip_encode(hnet_forward(z, theta), params)
    if np.any(np.linalg.norm(emb.data, axis=-1) == 0):
        raise ad.ZeroNormError("HyperCLIP embedding vanished during guidance")
    sim = ad.cosine_similarity(emb, e_target)
    d = z - z0
    pen = ad.tsum(d * d, -1) if squared else ad.norm(d, -1)
    return ad.tsum(pen * lam - sim)


def hyperclip_guidance(z0: np.ndarray, e_target: np.ndarray, theta: dict, params: dict,
                       cfg: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Plain gradient descent on the guidance loss starting at ``z0``; rows are independent tasks."""
    e_target = np.asarray(e_target, np.float64)
    if np.max(np.abs(np.linalg.norm(e_target, axis=-1) - 1.0)) > 1e-6:
        raise ValueError("target descriptor must be unit-norm")
    z0 = np.array(z0, dtype=np.float64)
    z = z0.copy()
    consts = ad.tensors(params), ad.tensors(theta)
    for _ in range(cfg.steps):
        zt = Tensor(z)
        with ad.Tape() as tape:
            tape.watch(zt)
            loss = guidance_loss(zt, z0, e_target, consts[1], consts[0], cfg.lam, cfg.squared)
        z = z - cfg.lr * tape.gradient(loss, zt).data
    return z
