"""Experiment orchestration: artifact store, zero/few-shot evaluation, sweeps, pipeline.

Each seed retrains every component on the same task universe. Artifacts are
checkpointed under ``<out>/seed_<s>/`` and reused when their config
fingerprint matches, which makes the pipeline resumable.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .basenet import base_forward, init_base
from .checkpoint import (Checkpoint, FingerprintMismatch, fingerprint, load_checkpoint, prefixed,
                         save_checkpoint, unprefix)
from .config import NEEDS, ExperimentConfig
from .diffusion import HyperLDM, LDMConfig, ldm_train, sample_latent
from .hvae import encode_means, vae_train
from .hyperclip import hyperclip_guidance, retrieval_accuracy, train_hyperclip
from .hypernet import HyperConfig, hnet_forward
from .metatrain import CONDITIONAL, VARIANTS, Corpus, MetaModel, adapt, collect_corpus, train_meta
from .universe import (LabeledSet, TaskSpec, bayes_accuracy, descriptor_mask, export_task_csv, realize_split,
                       task_list)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("method", "setting", "mean_accuracy", "std", "n_seeds")


class MissingArtifact(RuntimeError):
    pass


# evaluation data ---------------------------------------------------------------

class EvalSet:
    """Test tasks with fixed query sets. Support data sits behind a counted accessor."""

    support_reads = 0

    def __init__(self, tasks: list[TaskSpec], query: list[LabeledSet], support: list[LabeledSet]):
        self.tasks = tasks
        self.descriptors = np.stack([t.descriptor for t in tasks])
        self.query_x = np.stack([q.x for q in query])
        self.query_y = np.stack([q.y for q in query])
        self._support = support

    def __len__(self):
        return len(self.tasks)

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        EvalSet.support_reads += 1
        return np.stack([s.x for s in self._support]), np.stack([s.y for s in self._support])


def build_eval_set(cfg: ExperimentConfig, seed: int) -> EvalSet:
    """Query sets depend only on the universe; support sets are redrawn per seed."""
    tasks = task_list(cfg.universe, cfg.universe.test_indices)
    ev = cfg.eval
    query = [realize_split(t, 0, ev.n_query, ev.query_seed)[1] for t in tasks]
    support_seed = ev.query_seed + 1 + int(seed)
    support = [realize_split(t, max(ev.n_support, 1), 1, support_seed)[0] for t in tasks]
    if ev.n_support == 0:
        support = [LabeledSet(s.x[:0], s.y[:0]) for s in support]
    return EvalSet(tasks, query, support)


@dataclass
class Solution:
    """Per-task adaptable tensor (B, d), how it becomes base weights, and its adaptation lr."""

    phi: np.ndarray
    decode: Callable[[Tensor], Tensor]
    lr: float


def query_accuracy(W: np.ndarray, ev: EvalSet, manifest) -> np.ndarray:
    pred = base_forward(ev.query_x, Tensor(W), manifest).data.argmax(-1)
    return np.mean(pred == ev.query_y, axis=1)


def eval_zero_shot(sol: Solution, ev: EvalSet, manifest) -> np.ndarray:
    return query_accuracy(sol.decode(Tensor(sol.phi)).data, ev, manifest)


def adapt_solution(sol: Solution, ev: EvalSet, manifest, steps: int) -> np.ndarray:
    x, y = ev.support()
    if x.shape[1] == 0 or steps == 0 or sol.lr == 0:
        return sol.phi

    def loss_fn(phi):
        return ad.tsum(ad.softmax_cross_entropy(base_forward(x, sol.decode(phi), manifest), y))

    return adapt(Tensor(sol.phi), loss_fn, sol.lr, steps, "first").data


def eval_few_shot(sol: Solution, ev: EvalSet, manifest, steps: int) -> np.ndarray:
    phi = adapt_solution(sol, ev, manifest, steps)
    return query_accuracy(sol.decode(Tensor(phi)).data, ev, manifest)


# artifacts ---------------------------------------------------------------------

def _hyper_from(meta) -> HyperConfig | None:
    if meta is None:
        return None
    return HyperConfig(d_in=meta["d_in"], hidden=tuple(meta["hidden"]), out_scale=meta["out_scale"])


def _ldm_cfg(d: dict) -> LDMConfig:
    return LDMConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _frac_tag(fraction: float) -> str:
    return f"f{fraction:g}"


class ArtifactStore:
    """Load-or-train access to every per-seed artifact.

    Training happens only when the producing stage is in ``allowed``;
    otherwise a missing checkpoint raises MissingArtifact.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, allowed=None, overwrite: bool = False):
        self.cfg = cfg
        self.seed = int(seed)
        self.dir = cfg.output_dir() / f"seed_{self.seed}"
        self.allowed = set(cfg.stages if allowed is None else allowed)
        self.overwrite = overwrite
        self.train_tasks = task_list(cfg.universe, cfg.universe.train_indices)
        self.test_tasks = task_list(cfg.universe, cfg.universe.test_indices)
        self._cache: dict = {}

    # generic load-or-produce
    def _get(self, key: str, stage: str, component: str, fp: str, produce, restore):
        if key in self._cache:
            return self._cache[key]
        path = self.dir / f"{key}.ckpt"
        if path.exists():
            try:
                obj = restore(load_checkpoint(path, component, fp))
                self._cache[key] = obj
                return obj
            except FingerprintMismatch:
                if not self.overwrite:
                    raise
                log.info("config changed, retraining %s", key)
        if stage not in self.allowed:
            raise MissingArtifact(f"{path} is missing and stage '{stage}' was not requested")
        log.info("seed %d: producing %s", self.seed, key)
        obj, ck = produce()
        ck.fingerprint, ck.seed = fp, self.seed
        save_checkpoint(path, ck)
        self._cache[key] = obj
        return obj

    def mask(self, fraction: float) -> np.ndarray:
        m = descriptor_mask(self.cfg.universe, fraction, self.cfg.universe.train_indices)
        if not m.any():
            raise ValueError(f"descriptor fraction {fraction} leaves no training descriptor")
        return m

    def fp_model(self, variant: str, fraction: float = 1.0) -> str:
        c = self.cfg
        return fingerprint({"stage": "train", "variant": variant, "fraction": fraction, "seed": self.seed,
                            "universe": c.universe, "base": c.base, "hyper": c.hyper,
                            "trainer": c.trainer(variant)})

    def model(self, variant: str, fraction: float = 1.0) -> MetaModel:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant not in CONDITIONAL:
            fraction = 1.0
        key = f"meta_{variant}" + ("" if fraction == 1.0 else "_" + _frac_tag(fraction))
        stage = "train" if fraction == 1.0 else "sweep-fraction"

        def produce():
            avail = self.mask(fraction) if fraction < 1.0 else None
            m, hist = train_meta(variant, self.train_tasks, self.cfg.base, self.cfg.trainer(variant), self.seed,
                                 self.cfg.hyper, available=avail, d_embed=self.cfg.universe.d_embed)
            hyper = dataclasses.asdict(m.hyper) if m.hyper else None
            arrays = {**{f"param/{k}": v for k, v in m.params.items()}, "history": hist}
            return m, Checkpoint("meta-model", arrays, meta={"variant": variant, "hyper": hyper})

        def restore(ck):
            params = unprefix(ck.arrays, "param")
            return MetaModel(ck.meta["variant"], params, self.cfg.base.manifest(), _hyper_from(ck.meta["hyper"]))

        return self._get(key, stage, "meta-model", self.fp_model(variant, fraction), produce, restore)

    def fp_corpus(self) -> str:
        return fingerprint([self.fp_model("hnet-maml-uncond"), self.cfg.corpus])

    def corpus(self) -> Corpus:
        c = self.cfg.corpus

        def produce():
            m = self.model("hnet-maml-uncond")
            cor = collect_corpus(m, self.train_tasks, c.n_repeats, c.steps, c.lr, c.n_support, self.seed)
            arrays = {"W": cor.W, "z": cor.z, "e": cor.e, "task_id": cor.task_id, "repeat": cor.repeat}
            return cor, Checkpoint("corpus", arrays)

        def restore(ck):
            a = ck.arrays
            return Corpus(a["W"], a["z"], a["e"], a["task_id"], a["repeat"])

        return self._get("corpus", "corpus", "corpus", self.fp_corpus(), produce, restore)

    def fp_vae(self) -> str:
        return fingerprint([self.fp_corpus(), self.cfg.vae])

    def vae(self) -> dict:
        """{'omega', 'theta', 'latents'}: encoder, decoder and corpus posterior means."""

        def produce():
            cor = self.corpus()
            omega, theta, hist = vae_train(cor.W, self.cfg.vae, self.seed)
            lat = encode_means(cor.W, omega)
            obj = {"omega": omega, "theta": theta, "latents": lat}
            arrays = {**prefixed({"enc": omega, "dec": theta}), "latents": lat, "history": hist}
            return obj, Checkpoint("hvae", arrays)

        def restore(ck):
            return {"omega": unprefix(ck.arrays, "enc"), "theta": unprefix(ck.arrays, "dec"),
                    "latents": ck.arrays["latents"]}

        return self._get("hvae", "hvae", "hvae", self.fp_vae(), produce, restore)

    def fp_clip(self) -> str:
        return fingerprint([self.fp_corpus(), self.cfg.hyperclip, self.cfg.eval.n_way])

    def clip(self) -> dict:
        def produce():
            cor = self.corpus()
            params, hist = train_hyperclip(cor.W, cor.e, cor.task_id, self.cfg.hyperclip, self.seed)
            meta = self._retrieval(params)
            return params, Checkpoint("hyperclip", {**params, "history": hist}, meta=meta)

        def restore(ck):
            return {k: v for k, v in ck.arrays.items() if k != "history"}

        return self._get("hyperclip", "hyperclip", "hyperclip", self.fp_clip(), produce, restore)

    def _retrieval(self, params) -> dict:
        """Top-1 retrieval on fresh corpus draws of train tasks and on test tasks."""
        c, n_way = self.cfg.corpus, self.cfg.eval.n_way
        m = self.model("hnet-maml-uncond")
        held = collect_corpus(m, self.train_tasks, c.heldout_repeats, c.steps, c.lr, c.n_support,
                              self.seed + 10_000)
        test = collect_corpus(m, self.test_tasks, c.heldout_repeats, c.steps, c.lr, c.n_support,
                              self.seed + 20_000)
        table = np.stack([t.descriptor for t in self.train_tasks])
        ids = np.array([t.id for t in self.train_tasks])
        t_table = np.stack([t.descriptor for t in self.test_tasks])
        t_ids = np.array([t.id for t in self.test_tasks])
        return {
            "heldout_train_top1": retrieval_accuracy(held.W, held.task_id, table, ids, params, n_way, self.seed),
            "test_top1": retrieval_accuracy(test.W, test.task_id, t_table, t_ids, params,
                                            min(n_way, len(t_ids)), self.seed),
        }

    def retrieval(self) -> dict:
        self.clip()
        return load_checkpoint(self.dir / "hyperclip.ckpt", "hyperclip").meta

    def decoder(self, source: str) -> dict:
        return self.model("hnet-maml-uncond").theta() if source == "hnet" else self.vae()["theta"]

    def latents(self, source: str) -> np.ndarray:
        return self.corpus().z if source == "hnet" else self.vae()["latents"]

    def ldm(self, source: str, fraction: float = 1.0) -> HyperLDM:
        key = f"hyperldm_{source}" + ("" if fraction == 1.0 else "_" + _frac_tag(fraction))
        stage = "hyperldm" if fraction == 1.0 else "sweep-fraction"
        upstream = self.fp_corpus() if source == "hnet" else self.fp_vae()
        fp = fingerprint([upstream, self.cfg.hyperldm, fraction, self.cfg.universe])

        def produce():
            cor = self.corpus()
            E = cor.e.copy()
            if fraction < 1.0:
                avail = dict(zip((t.id for t in self.train_tasks), self.mask(fraction)))
                E[~np.array([avail[i] for i in cor.task_id])] = 0.0
            mod = ldm_train(self.latents(source), E, self.cfg.hyperldm, self.seed)
            arrays = {**prefixed({"psi": mod.params}), "mean": mod.mean, "scale": mod.scale,
                      "history": mod.history}
            meta = {"cfg": dataclasses.asdict(mod.cfg), "d_e": mod.d_e, "source": source, "fraction": fraction}
            return mod, Checkpoint("hyperldm", arrays, meta=meta)

        def restore(ck):
            a = ck.arrays
            return HyperLDM(unprefix(a, "psi"), _ldm_cfg(ck.meta["cfg"]), a["mean"], a["scale"],
                            ck.meta["d_e"], a["history"])

        return self._get(key, stage, "hyperldm", fp, produce, restore)


# methods -----------------------------------------------------------------------

def _decoder_fn(theta: dict):
    th = ad.tensors(theta)
    return lambda phi: hnet_forward(phi, th)


def adaptation_lr(cfg: ExperimentConfig, variant: str) -> float:
    """Multitask baselines adapt with the scheme of their MAML counterpart."""
    counterpart = {"mnet-multitask": "mnet-maml", "hnet-multitask-cond": "hnet-maml-cond"}.get(variant, variant)
    return cfg.trainer(counterpart).adapt.lr


def solution(method: str, store: ArtifactStore, descriptors: np.ndarray, gamma: float | None = None,
             fraction: float = 1.0) -> Solution:
    """Zero-shot starting point for each task, built from descriptors only."""
    cfg = store.cfg
    n = descriptors.shape[0]
    latent_lr = cfg.corpus.lr
    if method == "untrained":
        w = init_base(cfg.base, 7919 + store.seed).flat
        return Solution(np.tile(w, (n, 1)), lambda phi: phi, adaptation_lr(cfg, "mnet-maml"))
    if method in VARIANTS:
        m = store.model(method, fraction)
        params = ad.tensors(m.params)
        return Solution(m.start_numpy(descriptors, n), lambda phi: m.decode(params, phi), adaptation_lr(cfg, method))
    source, kind = method.split("-")
    theta = store.decoder(source)
    if kind == "hyperclip":
        if source == "hnet":
            z0 = store.model("hnet-maml-uncond").start_numpy(None, n)
        else:
            z0 = np.tile(store.vae()["latents"].mean(axis=0), (n, 1))
        z = hyperclip_guidance(z0, descriptors, theta, store.clip(), cfg.guidance)
        return Solution(z, _decoder_fn(theta), latent_lr)
    if kind == "hyperldm":
        g = cfg.eval.ldm_gamma if gamma is None else gamma
        z = sample_latent(store.ldm(source, fraction), descriptors, g, seed=store.seed)
        return Solution(z, _decoder_fn(theta), latent_lr)
    raise ValueError(f"unknown method {method!r}")


def evaluate_method(method: str, store: ArtifactStore, ev: EvalSet, few_shot: bool = True, **kw) -> dict:
    sol = solution(method, store, ev.descriptors, **kw)
    manifest = store.cfg.base.manifest()
    out = {"zero-shot": float(np.mean(eval_zero_shot(sol, ev, manifest)))}
    if few_shot:
        out["few-shot"] = float(np.mean(eval_few_shot(sol, ev, manifest, store.cfg.eval.steps)))
    return out


def gamma_curve(store: ArtifactStore, ev: EvalSet, gammas, source: str | None = None) -> dict:
    source = source or store.cfg.latent_source
    return {g: evaluate_method(f"{source}-hyperldm", store, ev, few_shot=False, gamma=g)["zero-shot"]
            for g in gammas}


def fraction_curve(store: ArtifactStore, ev: EvalSet, methods, fractions) -> dict:
    out = {}
    for m in methods:
        for f in fractions:
            out[(m, f)] = evaluate_method(m, store, ev, few_shot=False, fraction=f)["zero-shot"]
    return out


# csv -----------------------------------------------------------------------------

def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def summarize(values) -> tuple[float, float, int]:
    v = np.asarray(values, dtype=np.float64)
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std, int(v.size)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# pipeline ------------------------------------------------------------------------

def export_universe(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir() / "universe"
    rows = []
    for split, idx in (("train", cfg.universe.train_indices), ("test", cfg.universe.test_indices)):
        for t in task_list(cfg.universe, idx):
            n_s, n_q = (cfg.eval.n_support, cfg.eval.n_query) if split == "test" else (20, 40)
            export_task_csv(t, out / f"task_{t.id:03d}.csv", n_s, n_q, cfg.eval.query_seed)
            p = t.params
            bayes, _ = bayes_accuracy(t, 20000, seed=t.id)
            rows.append((t.id, split, f"{p.alpha:.6f}", f"{p.radius:.6f}", p.pattern, f"{p.sigma:.6f}", f"{bayes:.4f}"))
    return write_csv(out / "tasks.csv", ("task_id", "split", "alpha", "radius", "pattern", "sigma", "bayes_accuracy"), rows)


def _needed(cfg: ExperimentConfig) -> set:
    need = set()
    for m in cfg.methods:
        need.update(NEEDS[m])
    return need


def run_pipeline(cfg: ExperimentConfig, stages=None, overwrite: bool = False) -> dict:
    """Execute the requested stages for every seed and write the CSV outputs.

    Returns a dict with the per-seed results of the evaluation stages that ran.
    """
    stages = tuple(cfg.stages if stages is None else stages)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    results = {"metrics": {}, "gamma": {}, "fraction": {}, "retrieval": {}}
    if "universe" in stages:
        export_universe(cfg)
    need = _needed(cfg)
    for seed in cfg.seeds:
        store = ArtifactStore(cfg, seed, allowed=stages, overwrite=overwrite)
        if "train" in stages:
            for v in VARIANTS:
                if v in need or (v == "hnet-maml-uncond" and need & {"corpus"}):
                    store.model(v)
        if "corpus" in stages and "corpus" in need:
            store.corpus()
        if "hvae" in stages and "hvae" in need:
            store.vae()
        if "hyperclip" in stages and "hyperclip" in need:
            results["retrieval"][seed] = store.retrieval()
        if "hyperldm" in stages and "hyperldm" in need:
            for src in {m.split("-")[0] for m in cfg.methods if m.endswith("hyperldm")}:
                store.ldm(src)
        if {"eval", "sweep-gamma", "sweep-fraction"} & set(stages):
            ev = build_eval_set(cfg, seed)
        if "eval" in stages:
            results["metrics"][seed] = {m: evaluate_method(m, store, ev) for m in cfg.methods}
        if "sweep-gamma" in stages:
            results["gamma"][seed] = gamma_curve(store, ev, cfg.eval.gammas)
        if "sweep-fraction" in stages:
            methods = [m if not m.endswith("hyperldm") else f"{cfg.latent_source}-hyperldm"
                       for m in cfg.eval.fraction_methods]
            results["fraction"][seed] = fraction_curve(store, ev, methods, cfg.eval.fractions)
    write_outputs(cfg, results)
    return results


def write_outputs(cfg: ExperimentConfig, results: dict) -> None:
    out = cfg.output_dir()
    seeds = sorted(results["metrics"])
    if seeds:
        per_seed, rows = [], []
        for m in cfg.methods:
            for setting in ("zero-shot", "few-shot"):
                vals = [results["metrics"][s][m][setting] for s in seeds]
                per_seed += [(s, m, setting, pct(v)) for s, v in zip(seeds, vals)]
                mean, std, n = summarize(vals)
                rows.append((m, setting, pct(mean), pct(std), n))
        write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
        write_csv(out / "metrics_per_seed.csv", ("seed", "method", "setting", "accuracy"), per_seed)
    seeds = sorted(results["gamma"])
    if seeds:
        per_seed, rows = [], []
        for g in cfg.eval.gammas:
            vals = [results["gamma"][s][g] for s in seeds]
            per_seed += [(s, f"{g:g}", pct(v)) for s, v in zip(seeds, vals)]
            mean, std, n = summarize(vals)
            rows.append((f"{g:g}", pct(mean), pct(std), n))
        write_csv(out / "gamma_sweep.csv", ("gamma", "mean_accuracy", "std", "n_seeds"), rows)
        write_csv(out / "gamma_sweep_per_seed.csv", ("seed", "gamma", "accuracy"), per_seed)
    seeds = sorted(results["fraction"])
    if seeds:
        keys = list(results["fraction"][seeds[0]])
        per_seed, rows = [], []
        for m, f in keys:
            vals = [results["fraction"][s][(m, f)] for s in seeds]
            per_seed += [(s, m, f"{f:g}", pct(v)) for s, v in zip(seeds, vals)]
            mean, std, n = summarize(vals)
            rows.append((m, f"{f:g}", pct(mean), pct(std), n))
        write_csv(out / "fraction_sweep.csv", ("method", "fraction", "mean_accuracy", "std", "n_seeds"), rows)
        write_csv(out / "fraction_sweep_per_seed.csv", ("seed", "method", "fraction", "accuracy"), per_seed)
    seeds = sorted(results["retrieval"])
    if seeds:
        rows = [(s, pct(results["retrieval"][s]["heldout_train_top1"]), pct(results["retrieval"][s]["test_top1"]))
                for s in seeds]
        write_csv(out / "retrieval.csv", ("seed", "heldout_train_top1", "test_top1"), rows)
