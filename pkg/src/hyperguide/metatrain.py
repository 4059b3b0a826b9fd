"""Multitask and MAML-family trainers, plus the adapted-weights corpus.

Every variant is described by two things: the tensor that gets adapted per
task (base weights W, hypernetwork latent z, or descriptor e) and how that
tensor is decoded into base weights. Task batches are processed in one
vectorised pass, with a different network per task.

=====================  ===============================  ===============
variant                generated weights                owned params
=====================  ===============================  ===============
mnet-multitask         W                                W
mnet-maml / -fomaml    A(W0)                            W0
hnet-maml-uncond       h(A(z0), theta)                  theta, z0
hnet-multitask-cond    h(e, theta)                      theta
hnet-maml-cond         h(A(e), theta)                   theta
=====================  ===============================  ===============
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .basenet import BaseNetConfig, base_forward, init_base
from .hypernet import HyperConfig, hnet_forward, init_hnet
from .universe import TaskSpec, realize_split

log = logging.getLogger(__name__)

VARIANTS = (
    "mnet-multitask",
    "mnet-maml",
    "mnet-fomaml",
    "hnet-maml-uncond",
    "hnet-maml-cond",
    "hnet-multitask-cond",
)
CONDITIONAL = {"hnet-maml-cond", "hnet-multitask-cond"}
MULTITASK = {"mnet-multitask", "hnet-multitask-cond"}


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 0.1
    steps: tuple = (0, 10)
    order: str = "first"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("adaptation lr must be non-negative")
        lo, hi = self.steps
        if not 0 <= lo <= hi:
            raise ValueError("adaptation steps range must satisfy 0 <= lo <= hi")
        if self.order not in ("first", "exact"):
            raise ValueError("order must be 'first' or 'exact'")


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 100
    lr: float = 1e-3
    adapt: AdaptConfig = AdaptConfig()
    meta_batch: int = 32
    n_support: int = 20
    n_query: int = 40
    clip_norm: float = 10.0


def default_trainer(variant: str) -> TrainerConfig:
    """Desk-scale recipe per variant (adaptation settings as in the baselines table)."""
    if variant == "mnet-multitask":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.01, (0, 0)))
    if variant == "mnet-maml":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.01, (0, 10), "exact"))
    if variant == "mnet-fomaml":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.01, (0, 10), "first"))
    if variant == "hnet-maml-uncond":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.1, (0, 10), "exact"))
    if variant == "hnet-maml-cond":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.1, (0, 10), "exact"))
    if variant == "hnet-multitask-cond":
        return TrainerConfig(epochs=150, lr=1e-3, adapt=AdaptConfig(0.1, (0, 0)))
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class MetaModel:
    variant: str
    params: dict
    manifest: tuple
    hyper: HyperConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def conditional(self) -> bool:
        return self.variant in CONDITIONAL

    @property
    def adapts(self) -> str:
        """Which tensor few-step adaptation acts on: 'W', 'z' or 'e'."""
        if self.variant.startswith("mnet"):
            return "W"
        return "e" if self.conditional else "z"

    def owned(self) -> tuple[str, ...]:
        if self.variant == "mnet-multitask":
            return ("W",)
        if self.variant in ("mnet-maml", "mnet-fomaml"):
            return ("W0",)
        hnet = tuple(sorted(k for k in self.params if k.startswith("hnet.")))
        return hnet + (("z0",) if self.variant == "hnet-maml-uncond" else ())

    def theta(self, params=None) -> dict:
        params = self.params if params is None else params
        return {k[5:]: v for k, v in params.items() if k.startswith("hnet.")}

    def start(self, params, descriptors, n_tasks: int) -> Tensor:
        """Per-task starting point of adaptation, shape (B, d)."""
        if self.adapts == "e":
            if descriptors is None:
                raise ValueError(f"{self.variant} needs task descriptors")
            return ad.as_tensor(descriptors)
        key = {"mnet-multitask": "W"}.get(self.variant, "W0" if self.adapts == "W" else "z0")
        p = params[key]
        return ad.broadcast_to(p, (n_tasks,) + tuple(np.shape(ad.as_tensor(p).data)))

    def decode(self, params, phi) -> Tensor:
        if self.adapts == "W":
            return ad.as_tensor(phi)
        return hnet_forward(phi, self.theta(params))

    def weights(self, phi: np.ndarray) -> np.ndarray:
        return self.decode(self.params, Tensor(phi)).data

    def start_numpy(self, descriptors, n_tasks: int) -> np.ndarray:
        return self.start(self.params, descriptors, n_tasks).data


def init_model(variant: str, base_cfg: BaseNetConfig, seed: int,
               hyper: HyperConfig | None = None, d_embed: int = 16) -> MetaModel:
    manifest = base_cfg.manifest()
    if variant.startswith("mnet"):
        key = "W" if variant == "mnet-multitask" else "W0"
        return MetaModel(variant, {key: init_base(base_cfg, seed).flat}, manifest)
    hyper = hyper or HyperConfig()
    if variant in CONDITIONAL:
        hyper = replace(hyper, d_in=d_embed)
    theta, z0 = init_hnet(hyper, base_cfg.n_params, seed)
    params = {f"hnet.{k}": v for k, v in theta.items()}
    if variant == "hnet-maml-uncond":
        params["z0"] = z0
    return MetaModel(variant, params, manifest, hyper)


@dataclass
class TaskBatch:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    descriptors: np.ndarray
    steps: np.ndarray
    task_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return self.query_x.shape[0]


def make_batch(tasks: list[TaskSpec], n_support: int, n_query: int, draw_seed: int,
               steps=None) -> TaskBatch:
    sx, sy, qx, qy = [], [], [], []
    for t in tasks:
        s, q = realize_split(t, n_support, n_query, draw_seed)
        sx.append(s.x), sy.append(s.y), qx.append(q.x), qy.append(q.y)
    n = len(tasks)
    steps = np.zeros(n, dtype=int) if steps is None else np.broadcast_to(np.asarray(steps, dtype=int), (n,))
    return TaskBatch(np.stack(sx), np.stack(sy), np.stack(qx), np.stack(qy),
                     np.stack([t.descriptor for t in tasks]), steps.copy(),
                     np.array([t.id for t in tasks]))


def adapt(init, loss_fn, lr: float, steps, order: str = "first") -> Tensor:
    """Few-step gradient descent ``phi <- phi - lr * grad loss_fn(phi)``.

    ``steps`` is an int or one count per row of ``init``; rows stop updating
    once their count is reached. With ``order='exact'`` the steps are taped so
    an enclosing tape differentiates through them; with ``'first'`` the
    inner gradients are treated as constants.
    """
    phi = ad.as_tensor(init)
    counts = np.asarray(steps, dtype=int)
    n_max = int(counts.max()) if counts.size else 0
    if lr == 0 or n_max == 0:
        return phi
    for s in range(n_max):
        if counts.ndim == 0:
            mask = 1.0
        else:
            mask = (counts > s).astype(np.float64).reshape(counts.shape + (1,) * (phi.ndim - counts.ndim))
        if order == "exact":
            with ad.Tape() as inner:
                inner.watch(phi)
                loss = loss_fn(phi)
            g = inner.gradient(loss, phi)
        else:
            with ad.paused():
                probe = ad.stop_gradient(phi)
                with ad.Tape() as inner:
                    inner.watch(probe)
                    loss = loss_fn(probe)
                g = ad.stop_gradient(inner.gradient(loss, probe))
        phi = phi - g * (lr * mask) if counts.ndim else phi - g * lr
    return phi


def support_loss_fn(model: MetaModel, params, x, y):
    """Sum over tasks of per-task mean support loss, as a function of phi."""
    return lambda phi: ad.tsum(ad.softmax_cross_entropy(base_forward(x, model.decode(params, phi), model.manifest), y))


def meta_gradient(model: MetaModel, batch: TaskBatch, acfg: AdaptConfig,
                  extra: dict | None = None) -> tuple[float, dict]:
    """Mean post-adaptation query loss and its gradient for every parameter.

    ``extra`` tensors are watched too so that callers can confirm that
    parameters outside the variant's owned set receive exactly zero gradient.
    """
    params = ad.tensors(model.params)
    if extra:
        params.update(ad.tensors(extra))
    with ad.Tape() as tape:
        tape.watch(*params.values())
        phi0 = model.start(params, batch.descriptors, len(batch))
        if np.any(batch.steps > 0):
            fn = support_loss_fn(model, params, batch.support_x, batch.support_y)
            phi = adapt(phi0, fn, acfg.lr, batch.steps, acfg.order)
        else:
            phi = phi0
        W = model.decode(params, phi)
        per_task = ad.softmax_cross_entropy(base_forward(batch.query_x, W, model.manifest), batch.query_y)
        loss = ad.mean(per_task)
    grads = tape.gradient(loss, params)
    return float(loss.data), {k: g.data for k, g in grads.items()}


def _apply(model: MetaModel, grads: dict, opt_state: ad.AdamState, lr: float, clip: float):
    owned = {k: model.params[k] for k in model.owned()}
    g = ad.clip_global_norm({k: grads[k] for k in owned}, clip)
    new, opt_state = ad.adam_step(owned, g, opt_state, lr)
    params = dict(model.params)
    params.update(new)
    return replace(model, params=params), opt_state


def meta_outer_step(model: MetaModel, batch: TaskBatch, acfg: AdaptConfig,
                    opt_state: ad.AdamState, lr: float, clip: float = 10.0):
    loss, grads = meta_gradient(model, batch, acfg)
    if not np.isfinite(loss):
        raise ad.NonFiniteError("non-finite meta-loss")
    model, opt_state = _apply(model, grads, opt_state, lr, clip)
    return model, opt_state, loss


def merge_all_data(batch: TaskBatch) -> TaskBatch:
    """Multitask batches use support and query together, with no adaptation."""
    x = np.concatenate([batch.support_x, batch.query_x], axis=1)
    y = np.concatenate([batch.support_y, batch.query_y], axis=1)
    n = len(batch)
    return TaskBatch(x[:, :0], y[:, :0], x, y, batch.descriptors, np.zeros(n, dtype=int), batch.task_ids)


def multitask_step(model: MetaModel, batch: TaskBatch, opt_state: ad.AdamState,
                   lr: float, clip: float = 10.0, available=None):
    """Gradient step on the mean task loss over all batch data.

    Conditional variants skip tasks whose descriptor is unavailable.
    """
    if available is not None and model.conditional:
        keep = np.asarray(available, dtype=bool)
        if not keep.any():
            return model, opt_state, float("nan")
        batch = TaskBatch(batch.support_x[keep], batch.support_y[keep], batch.query_x[keep],
                          batch.query_y[keep], batch.descriptors[keep], batch.steps[keep],
                          batch.task_ids[keep] if batch.task_ids.size else batch.task_ids)
    merged = merge_all_data(batch)
    return meta_outer_step(model, merged, AdaptConfig(0.0, (0, 0)), opt_state, lr, clip)


def train_meta(variant: str, tasks: list[TaskSpec], base_cfg: BaseNetConfig, tcfg: TrainerConfig,
               seed: int, hyper: HyperConfig | None = None, available=None, d_embed: int = 16):
    """Train one variant; returns (model, per-step loss history).

    ``available`` is an optional per-task descriptor mask; conditional variants
    train only on tasks whose descriptor is available.
    """
    rng = np.random.default_rng([int(seed), 0x3E7A])
    model = init_model(variant, base_cfg, seed, hyper, d_embed)
    pool = list(tasks)
    if available is not None and model.conditional:
        pool = [t for t, a in zip(tasks, available) if a]
        if not pool:
            raise ValueError("no training task has an available descriptor")
    opt = ad.AdamState()
    history = []
    lo, hi = tcfg.adapt.steps
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), tcfg.meta_batch):
            chunk = [pool[i] for i in order[start:start + tcfg.meta_batch]]
            draw = int(rng.integers(2**31 - 1))
            if variant in MULTITASK:
                batch = make_batch(chunk, tcfg.n_support, tcfg.n_query, draw)
                model, opt, loss = multitask_step(model, batch, opt, tcfg.lr, tcfg.clip_norm)
            else:
                steps = rng.integers(lo, hi + 1, size=len(chunk))
                batch = make_batch(chunk, tcfg.n_support, tcfg.n_query, draw, steps)
                model, opt, loss = meta_outer_step(model, batch, tcfg.adapt, opt, tcfg.lr, tcfg.clip_norm)
            history.append(loss)
        if epoch % 25 == 0:
            log.debug("%s epoch %d loss %.4f", variant, epoch, history[-1])
    return model, np.array(history)


def adapt_numpy(model: MetaModel, phi0: np.ndarray, x: np.ndarray, y: np.ndarray,
                steps: int, lr: float) -> np.ndarray:
    """First-order adaptation of ``phi0`` (B, d) on per-task data, returned as numpy."""
    if steps == 0 or lr == 0:
        return np.array(phi0, dtype=np.float64)
    fn = support_loss_fn(model, ad.tensors(model.params), x, y)
    return adapt(Tensor(phi0), fn, lr, steps, "first").data


@dataclass
class Corpus:
    """Adapted base weights with their latents, descriptors and task ids."""

    W: np.ndarray
    z: np.ndarray | None
    e: np.ndarray
    task_id: np.ndarray
    repeat: np.ndarray

    def __len__(self):
        return self.W.shape[0]

    def subset(self, rows) -> "Corpus":
        rows = np.asarray(rows)
        return Corpus(self.W[rows], None if self.z is None else self.z[rows], self.e[rows],
                      self.task_id[rows], self.repeat[rows])


def collect_corpus(model: MetaModel, tasks: list[TaskSpec], n_repeats: int = 1, steps: int = 50,
                   lr: float = 0.1, n_support: int = 40, seed: int = 0) -> Corpus:
    """Adapt the meta-learned latent on a fresh support draw per (task, repeat)."""
    if model.variant != "hnet-maml-uncond":
        raise ValueError("corpus collection expects an hnet-maml-uncond model")
    rng = np.random.default_rng([int(seed), 0xC0C0])
    rows = [(t, r) for t in tasks for r in range(n_repeats)]
    draws = rng.integers(2**31 - 1, size=len(rows))
    xs, ys = [], []
    for (t, _), d in zip(rows, draws):
        s, _ = realize_split(t, n_support, 1, int(d))
        xs.append(s.x), ys.append(s.y)
    x, y = np.stack(xs), np.stack(ys)
    z0 = model.start_numpy(None, len(rows))
    z = adapt_numpy(model, z0, x, y, steps, lr)
    W = model.weights(z)
    return Corpus(W, z, np.stack([t.descriptor for t, _ in rows]),
                  np.array([t.id for t, _ in rows]), np.array([r for _, r in rows]))
