"""Command-line entry point: ``trigan {train,sweep,generate,eval}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, no_grad
from ..nets import load_checkpoint, read_checkpoint
from ..training import TrainingAborted, evaluate, train_run
from .config import ExperimentConfig, default_out_dir, resolve_datasets, resolve_pool
from .export import write_montage, write_pgm
from .sweep import run_sweep, sweep_cells

logger = logging.getLogger("trigan")


def _add_run_flags(p, sweep=False):
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file; flags override its values")
    if not sweep:
        p.add_argument("--algo", dest="trainer", default=S,
                       help="vanilla | multitask | ecgan | 3ngan (aliases of the trainer kinds)")
        p.add_argument("--n-train", dest="n_train", type=int, default=S, help="balanced training subset size")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", default=S, help="use the synthetic proxy dataset")
    src.add_argument("--data-dir", dest="data_dir", default=S, help="image tree: <class>/ or train/<class>/ + test/<class>/")
    p.add_argument("--val-dir", dest="val_dir", default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--data-seed", dest="data_seed", type=int, default=S)
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--lambda", dest="lam", type=float, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--beta1", type=float, default=S)
    p.add_argument("--beta2", type=float, default=S)
    p.add_argument("--image-size", dest="image_size", type=int, default=S)
    p.add_argument("--base-width", dest="base_width", type=int, default=S)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=S)
    p.add_argument("--kl-direction", dest="kl_direction", choices=["real-to-fake", "fake-to-real"], default=S)
    p.add_argument("--update-order", dest="update_order", default=S, help="permutation of DGC (default DGC)")
    p.add_argument("--sample-every", dest="sample_every", type=int, default=S)
    p.add_argument("--wall-clock", dest="record_wall_time", action="store_true", default=S,
                   help="fill the wall_ms column (makes metrics.csv non-reproducible)")
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("--jobs", type=int, default=S)
    if sweep:
        p.add_argument("--sizes", dest="train_sizes", type=int, nargs="+", default=S)
        p.add_argument("--repeats", type=int, default=S)
        p.add_argument("--trainers", nargs="+", default=S)
        p.add_argument("--dry-run", action="store_true", help="write the cell plan without training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigan", description="Three-network semi-supervised GAN experiments")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("train", help="train one configuration"))
    _add_run_flags(sub.add_parser("sweep", help="trainer x size x repeat grid"), sweep=True)

    g = sub.add_parser("generate", help="sample images from a generator checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", dest="out_dir", default=None)

    e = sub.add_parser("eval", help="accuracy of a classifier checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--data-dir", dest="data_dir", default="")
    e.add_argument("--val-dir", dest="val_dir", default="")
    e.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in {"command", "config", "quiet", "synthetic", "dry_run"}
    }
    if getattr(args, "synthetic", False):
        overrides["data_dir"] = ""
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    digest = cfg.run_hash()
    run_dir = Path(cfg.out_dir) / digest
    train, val = resolve_datasets(cfg)
    logger.info("training %s on %d samples (%s), run dir %s", cfg.trainer, len(train), train.provenance, run_dir)
    result = train_run(cfg, train, val, run_dir, config_hash=digest)
    print(json.dumps({
        "run_dir": str(run_dir),
        "initial_accuracy": result.initial_accuracy,
        "final_accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
    }))
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    if args.dry_run:
        plan_dir = Path(cfg.out_dir) / cfg.sweep_hash()
        plan_dir.mkdir(parents=True, exist_ok=True)
        lines = ["trainer,size,repeat,seed,epochs,batch_size,run"]
        for k, cell in sweep_cells(cfg):
            lines.append(f"{cell.trainer},{cell.n_train},{k},{cell.seed},{cell.epochs},{cell.batch_size},{cell.run_hash()}")
        (plan_dir / "plan.csv").write_text("\n".join(lines) + "\n")
        print(str(plan_dir / "plan.csv"))
        return 0
    sweep_dir, rows, agg, failed = run_sweep(cfg)
    print((sweep_dir / "table.md").read_text(), end="")
    print(json.dumps({"sweep_dir": str(sweep_dir), "cells": len(rows), "failed": failed}))
    return 1 if failed else 0


def cmd_generate(args) -> int:
    if args.count < 1:
        raise ValueError(f"--count must be positive, got {args.count}")
    G = load_checkpoint(args.checkpoint, role="generator").eval()
    blob = Path(args.checkpoint).read_bytes()
    digest = hashlib.sha256(blob + f"|{args.count}|{args.seed}".encode()).hexdigest()[:12]
    out = Path(args.out_dir or default_out_dir()) / f"gen-{digest}"
    z = np.random.default_rng(args.seed).standard_normal((args.count, G.spec.latent_dim))
    with no_grad():
        images = np.concatenate([G(Tensor(z[i : i + 64])).data for i in range(0, args.count, 64)])
    for i, img in enumerate(images):
        write_pgm(img, out / f"sample_{i:04d}.pgm")
    write_montage(images, out / "montage.pgm")
    print(str(out))
    return 0


def cmd_eval(args) -> int:
    spec, _ = read_checkpoint(args.checkpoint)
    C = load_checkpoint(args.checkpoint, role="classifier")
    cfg = ExperimentConfig(
        image_size=spec.image_size, data_dir=args.data_dir, val_dir=args.val_dir, data_seed=args.data_seed
    )
    _, val = resolve_pool(cfg)
    acc = evaluate(C, val, num_classes=val.num_classes)
    print(json.dumps({"checkpoint": args.checkpoint, "n": len(val), "accuracy": acc}))
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "generate": cmd_generate, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError) as exc:
        print(f"trigan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"trigan {args.command}: aborted: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"trigan {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
