"""Command line front end.

Workflow order: ``train-teacher`` makes a frozen full-precision model,
``calibrate`` previews inconsistency thresholds, ``train`` runs the
data-free loop, then ``synthesize`` / ``evaluate`` / ``ablate`` inspect
the result.

Any extra ``--section.key value`` flag overrides the config file, e.g.
``dfquant train --teacher t/ --loss.lambda_r 0``. Run directories default
to ``$DFQUANT_RUNS`` (or ``./runs``). Exit codes: 0 ok, 2 bad usage or
config, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import ConfigError
from .generator import sample_latent
from .robustness import calibrate_thresholds, save_thresholds
from .softlabel import sample_rows
from .teachers import TeacherSpec, load_dataset, load_teacher, save_teacher, train_teacher
from .trainer import TrainingDiverged, ablate, evaluate_student, load_run, train


def parse_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, _, val = body.partition("=")
            i += 1
        else:
            key = body
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise ConfigError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def _load_config(args, extra) -> cfgmod.TrainConfig:
    return cfgmod.parse_config(getattr(args, "config", None), parse_overrides(extra))


def _default_run_dir(cfg) -> Path:
    root = Path(os.environ.get("DFQUANT_RUNS", "runs"))
    return root / f"{cfgmod.config_hash(cfg)}-s{cfg.run.seed}"


def cmd_train_teacher(args, extra):
    if extra:
        raise ConfigError(f"unexpected argument {extra[0]!r}")
    spec = TeacherSpec(depth=args.depth, width=args.width,
                       num_classes=args.num_classes)
    data = load_dataset(args.dataset, root=args.data_root, split="train",
                        seed=args.seed, n_per_class=args.n_per_class,
                        num_classes=args.num_classes)
    held_out = load_dataset(args.dataset, root=args.data_root, split="test",
                            seed=args.seed, n_per_class=max(args.n_per_class // 4, 1),
                            num_classes=args.num_classes)
    model, acc = train_teacher(spec, data, epochs=args.epochs, seed=args.seed,
                               batch_size=args.batch_size, lr=args.lr,
                               eval_dataset=held_out)
    save_teacher(model, acc, args.out)
    print(f"teacher saved to {args.out} (held-out top-1 {acc:.4f})")
    return 0


def cmd_calibrate(args, extra):
    cfg = _load_config(args, extra)
    teacher, _ = load_teacher(args.teacher)
    shape = (teacher.spec.in_channels, teacher.spec.image_size, teacher.spec.image_size)
    g = torch.Generator().manual_seed(cfg.run.seed * 10000 + 4)
    thr = calibrate_thresholds(teacher, cfgmod.suite(cfg), epsilon=cfg.robust.epsilon,
                               n_noise=cfg.robust.n_noise, image_shape=shape,
                               g=g, seed=cfg.run.seed)
    save_thresholds(thr, args.out)
    print(f"theta_f={thr.theta_f:.6f} theta_p={thr.theta_p:.6f} "
          f"(epsilon={thr.epsilon}, n={thr.n_noise}) -> {args.out}")
    return 0


def cmd_train(args, extra):
    cfg = _load_config(args, extra)
    teacher, manifest = load_teacher(args.teacher)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(cfg)
    print(f"training in {run_dir} (teacher top-1 {manifest['accuracy']:.4f})")
    result = train(teacher, cfg, run_dir=run_dir, resume=args.resume)
    tail = result.logs[-cfg.run.batches_per_epoch:]
    if tail:
        mean = {k: sum(r[k] for r in tail) / len(tail)
                for k in ("l_ce", "l_bns", "l_robust", "l_kd")}
        print("final epoch means: " +
              " ".join(f"{k}={v:.4f}" for k, v in mean.items()))
    print(f"done: {run_dir}")
    return 0


def cmd_synthesize(args, extra):
    if extra:
        raise ConfigError(f"unexpected argument {extra[0]!r}")
    from torchvision.utils import save_image

    run = load_run(args.run)
    out = Path(args.out) if args.out else Path(args.run) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    rows, idx = sample_rows(run.label_matrix, args.n, np.random.default_rng(args.seed))
    z = sample_latent(args.n, run.cfg.gen.z_dim,
                      torch.Generator().manual_seed(args.seed))
    with torch.no_grad():
        images = run.generator(z, torch.from_numpy(rows).to(torch.float32))
    save_image(images, out / "grid.png", nrow=8, normalize=True,
               value_range=(-1, 1))
    with open(out / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label_row", "argmax_class", "label_weight"])
        for i in range(args.n):
            writer.writerow([i, idx[i], int(rows[i].argmax()), f"{rows[i].max():.6f}"])
    print(f"wrote {args.n} images to {out / 'grid.png'} (from {run.checkpoint})")
    return 0


def cmd_evaluate(args, extra):
    if extra:
        raise ConfigError(f"unexpected argument {extra[0]!r}")
    teacher, _ = load_teacher(args.teacher)
    run = load_run(args.run, teacher=teacher)
    data = load_dataset(args.dataset, root=args.data_root, split=args.split,
                        seed=args.seed, n_per_class=args.n_per_class,
                        num_classes=args.num_classes)
    acc = evaluate_student(run.student, data)
    print(f"student top-1 {acc['top1']:.4f} top-5 {acc['top5']:.4f} "
          f"({run.checkpoint})")
    return 0


def parse_grid_file(path: str | Path) -> list[tuple[str, dict]]:
    grid = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'name: key=value, ...'")
        name, _, rest = line.partition(":")
        cell = {}
        for pair in filter(None, (p.strip() for p in rest.split(","))):
            if "=" not in pair:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {pair!r}")
            key, _, val = pair.partition("=")
            cell[key.strip()] = val.strip()
        grid.append((name.strip(), cell))
    if not grid:
        raise ConfigError(f"{path}: empty ablation grid")
    return grid


def cmd_ablate(args, extra):
    cfg = _load_config(args, extra)
    teacher, _ = load_teacher(args.teacher)
    data = load_dataset(args.dataset, root=args.data_root, split=args.split,
                        seed=args.seed, n_per_class=args.n_per_class,
                        num_classes=args.num_classes)
    rows = ablate(teacher, cfg, parse_grid_file(args.grid), data, args.out)
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        mark = f"top-1 {r['top1']}" if r["status"] == "ok" else f"FAILED ({r['error']})"
        print(f"{r['name']:<{width}}  {mark}")
    return 0


def _add_eval_data_args(p):
    p.add_argument("--dataset", default="gratings",
                   choices=["gratings", "cifar10", "cifar100", "folder"])
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfquant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train and save a frozen teacher")
    p.add_argument("--dataset", default="gratings",
                   choices=["gratings", "cifar10", "cifar100", "folder"])
    p.add_argument("--data-root", default=None)
    p.add_argument("--n-per-class", type=int, default=500)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("calibrate", help="compute noise inconsistency thresholds")
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="run data-free generator/student training")
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="sample an image grid from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score a trained student on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--teacher", required=True)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep config overrides from a grid file")
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    _add_eval_data_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:  # argparse already printed the message
        return int(e.code or 0)
    try:
        return args.func(args, extra)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
