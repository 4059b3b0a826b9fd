"""Command-line entry point: ``hyperguide <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .autodiff import Tensor
from .config import ExperimentConfig, load_config
from .harness import ArtifactStore, build_eval_set, query_accuracy, run_pipeline, solution
from .metatrain import VARIANTS

STAGE_COMMANDS = {
    "universe": "universe",
    "corpus": "corpus",
    "train-vae": "hvae",
    "train-hyperclip": "hyperclip",
    "train-hyperldm": "hyperldm",
    "eval": "eval",
    "sweep-gamma": "sweep-gamma",
    "sweep-fraction": "sweep-fraction",
}


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def _seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return dataclasses.replace(cfg, seeds=tuple(seeds)) if seeds else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperguide", description="Weight-space guidance experiments on a synthetic task universe.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
        sp.add_argument("--overwrite", action="store_true", help="retrain artifacts whose config changed")
        return sp

    for name in STAGE_COMMANDS:
        common(sub.add_parser(name, help=f"run the '{STAGE_COMMANDS[name]}' stage"))
    tr = common(sub.add_parser("train", help="train one meta/multitask variant"))
    tr.add_argument("method", choices=VARIANTS)
    run = common(sub.add_parser("run", help="run every configured stage"), config=False)
    run.add_argument("config")

    g = sub.add_parser("guide", help="HyperCLIP-guided latent for one test task")
    g.add_argument("--config")
    g.add_argument("--task-id", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--source", choices=("hnet", "hvae"), default="hnet")

    s = sub.add_parser("sample", help="HyperLDM sample for one test task")
    s.add_argument("--config")
    s.add_argument("--task-id", type=int, required=True)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--source", choices=("hnet", "hvae"), default="hnet")
    return p


def _single_task(args, method: str, **kw) -> dict:
    cfg = _config(args.config)
    store = ArtifactStore(cfg, args.seed, allowed=())
    ev = build_eval_set(cfg, args.seed)
    ids = [t.id for t in ev.tasks]
    if args.task_id not in ids:
        raise SystemExit(f"task {args.task_id} is not a test task (choose from {ids[0]}..{ids[-1]})")
    i = ids.index(args.task_id)
    sol = solution(method, store, ev.descriptors, **kw)
    W = sol.decode(Tensor(sol.phi)).data
    acc = query_accuracy(W, ev, cfg.base.manifest())
    return {"task_id": args.task_id, "method": method, "seed": args.seed, "latent": sol.phi[i].tolist(),
            "weights": W[i].tolist(), "query_accuracy": float(acc[i])}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "guide":
            print(json.dumps(_single_task(args, f"{args.source}-hyperclip")))
            return 0
        if args.command == "sample":
            print(json.dumps(_single_task(args, f"{args.source}-hyperldm", gamma=args.gamma)))
            return 0
        if args.command == "run":
            cfg = _seeds(load_config(args.config), args.seeds)
            run_pipeline(cfg, overwrite=args.overwrite)
        elif args.command == "train":
            cfg = dataclasses.replace(_seeds(_config(args.config), args.seeds), methods=(args.method,))
            run_pipeline(cfg, stages=("train",), overwrite=args.overwrite)
        else:
            cfg = _seeds(_config(args.config), args.seeds)
            run_pipeline(cfg, stages=(STAGE_COMMANDS[args.command],), overwrite=args.overwrite)
        print(f"outputs in {cfg.output_dir()}")
        return 0
    except Exception as exc:  # every stage failure maps to a nonzero exit
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
