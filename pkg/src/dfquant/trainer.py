"""Training orchestration.

One run: calibrate inconsistency thresholds on noise, place the label
matrix, then alternate generator and student updates. The generator
learns to synthesize confident, BN-aligned, perturbation-stable images;
after warm-up the quantized student distills from the teacher on fresh
synthesized batches.

Rng discipline: labels, latents, perturbations, and calibration each get
their own stream derived from run.seed. A run with loss.lambda_r == 0
never touches the perturbation or calibration streams, so it is
bit-for-bit the plain baseline.

Per-batch draw order: label rows, latents, [perturbation channel +
draws], then for the student phase a second label/latent draw.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import config as cfgmod
from .config import TrainConfig
from .generator import ConditionalGenerator, sample_latent
from .guard import guard
from .losses import distillation_loss, generator_objective
from .metrics import topk_accuracy
from .quant import QuantizedModel, build_quantized
from .robustness import RobustnessThresholds, calibrate_thresholds, pick_channel, \
    save_thresholds
from .softlabel import identity_label_matrix, load_labels, optimize_labels, \
    sample_rows, save_labels

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "l_ce", "l_bns", "l_robust", "rf_mean", "rp_mean",
               "l_kd", "l_total"]


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_checkpoint: str | None = None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class RngStreams:
    labels: np.random.Generator
    latent: torch.Generator
    perturb: torch.Generator
    calib: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        base = seed * 10000
        return cls(
            labels=np.random.default_rng(base + 1),
            latent=torch.Generator().manual_seed(base + 2),
            perturb=torch.Generator().manual_seed(base + 3),
            calib=torch.Generator().manual_seed(base + 4),
        )

    def state_blob(self) -> dict:
        return {
            "labels": self.labels.bit_generator.state,
            "latent": self.latent.get_state(),
            "perturb": self.perturb.get_state(),
            "calib": self.calib.get_state(),
        }

    def load_blob(self, blob: dict) -> None:
        self.labels.bit_generator.state = blob["labels"]
        self.latent.set_state(blob["latent"])
        self.perturb.set_state(blob["perturb"])
        self.calib.set_state(blob["calib"])


@dataclass
class TrainResult:
    generator: ConditionalGenerator
    student: QuantizedModel
    logs: list[dict]
    run_dir: Path | None
    thresholds: RobustnessThresholds | None
    label_matrix: np.ndarray


def _infer_classes(teacher: nn.Module) -> int:
    if hasattr(teacher, "spec"):
        return teacher.spec.num_classes
    last = [m for m in teacher.modules() if isinstance(m, nn.Linear)]
    if not last:
        raise ValueError("cannot infer class count from teacher")
    return last[-1].out_features


def _infer_image_shape(teacher: nn.Module) -> tuple[int, int, int]:
    if hasattr(teacher, "spec"):
        s = teacher.spec
        return (s.in_channels, s.image_size, s.image_size)
    return (3, 32, 32)


def _build_student(teacher: nn.Module, cfg: TrainConfig) -> QuantizedModel:
    student = build_quantized(copy.deepcopy(teacher), cfgmod.quant_config(cfg))
    for p in student.parameters():
        p.requires_grad_(True)
    return student


def _quantizer_manifest(student: QuantizedModel) -> list[dict]:
    rows = []
    for name, q in student.quantizers():
        rows.append({
            "name": name,
            "bits": q.bits,
            "calibrated": bool(q.calibrated),
            "min": [repr(v) for v in q.min_obs.flatten().tolist()],
            "max": [repr(v) for v in q.max_obs.flatten().tolist()],
        })
    return rows


def _atomic_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    tmp.rename(path)


def save_checkpoint(run_dir: Path, epoch: int, cfg: TrainConfig,
                    gen: ConditionalGenerator, student: QuantizedModel,
                    opt_g, opt_s, sched_g, sched_s, streams: RngStreams) -> Path:
    path = run_dir / f"ckpt-{epoch:04d}"
    path.mkdir(parents=True, exist_ok=True)
    torch.save(gen.state_dict(), path / "generator.pt")
    torch.save(student.state_dict(), path / "student.pt")
    torch.save({
        "opt_g": opt_g.state_dict(), "opt_s": opt_s.state_dict(),
        "sched_g": sched_g.state_dict(), "sched_s": sched_s.state_dict(),
    }, path / "optim.pt")
    torch.save(streams.state_blob(), path / "rng.pt")
    _atomic_json(path / "manifest.json", {
        "format": "dfquant-ckpt-v1",
        "epoch": epoch,
        "config_hash": cfgmod.config_hash(cfg),
        "quantizers": _quantizer_manifest(student),
    })
    return path


def latest_checkpoint(run_dir: Path) -> Path | None:
    candidates = sorted(Path(run_dir).glob("ckpt-*/manifest.json"))
    return candidates[-1].parent if candidates else None


def _load_checkpoint(path: Path, cfg: TrainConfig, gen, student, opt_g, opt_s,
                     sched_g, sched_s, streams) -> int:
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("config_hash") != cfgmod.config_hash(cfg):
        raise TrainingDiverged(f"checkpoint {path} was written under a different config")
    gen.load_state_dict(torch.load(path / "generator.pt", weights_only=True))
    student.load_state_dict(torch.load(path / "student.pt", weights_only=True))
    opts = torch.load(path / "optim.pt", weights_only=False)
    opt_g.load_state_dict(opts["opt_g"])
    opt_s.load_state_dict(opts["opt_s"])
    sched_g.load_state_dict(opts["sched_g"])
    sched_s.load_state_dict(opts["sched_s"])
    streams.load_blob(torch.load(path / "rng.pt", weights_only=False))
    return manifest["epoch"]


def prepare_label_matrix(cfg: TrainConfig, num_classes: int) -> np.ndarray:
    if cfg.labels.mode == "identity":
        return identity_label_matrix(num_classes)
    return optimize_labels(cfg.labels.n, num_classes, steps=cfg.labels.steps,
                           step_size=cfg.labels.step_size,
                           rng=np.random.default_rng(cfg.run.seed * 10000 + 7))


def train(teacher: nn.Module, cfg: TrainConfig, run_dir: str | Path | None = None,
          resume: bool = False) -> TrainResult:
    """Run Algorithm-1-style training; returns generator, student, and logs."""
    if teacher.training:
        raise ValueError("teacher must be frozen in eval mode")
    cfgmod.validate(cfg)
    num_classes = _infer_classes(teacher)
    image_shape = _infer_image_shape(teacher)
    robust_on = cfg.loss.lambda_r > 0
    streams = RngStreams.from_seed(cfg.run.seed)
    weights = cfgmod.loss_weights(cfg)
    suite = cfgmod.suite(cfg) if robust_on else None

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfgmod.render(cfg))

    guard_ctx = guard.enforce() if cfg.run.data_free_guard else contextlib.nullcontext()
    with guard_ctx:
        thresholds = None
        if robust_on:
            thresholds = calibrate_thresholds(
                teacher, suite, epsilon=cfg.robust.epsilon, n_noise=cfg.robust.n_noise,
                image_shape=image_shape, g=streams.calib, seed=cfg.run.seed)
        labels = prepare_label_matrix(cfg, num_classes)

        torch.manual_seed(cfg.run.seed * 10000 + 5)
        gen = ConditionalGenerator(num_classes=num_classes, z_dim=cfg.gen.z_dim,
                                   base_width=cfg.gen.base_width,
                                   image_size=image_shape[1],
                                   out_channels=image_shape[0])
        student = _build_student(teacher, cfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.gen.lr)
        opt_s = torch.optim.SGD(student.parameters(), lr=cfg.student.lr,
                                momentum=cfg.student.momentum)
        sched_g = torch.optim.lr_scheduler.CosineAnnealingLR(opt_g, T_max=cfg.run.epochs)
        kd_epochs = max(1, cfg.run.epochs - cfg.run.warmup_epochs)
        sched_s = torch.optim.lr_scheduler.CosineAnnealingLR(opt_s, T_max=kd_epochs)

        start_epoch = 0
        last_ckpt: Path | None = None
        if resume:
            if run_dir is None:
                raise ValueError("resume needs a run directory")
            ckpt = latest_checkpoint(run_dir)
            if ckpt is None:
                raise TrainingDiverged(f"no checkpoint to resume in {run_dir}")
            start_epoch = _load_checkpoint(ckpt, cfg, gen, student, opt_g, opt_s,
                                           sched_g, sched_s, streams) + 1
            last_ckpt = ckpt

        if run_dir is not None and not resume:
            save_labels(labels, run_dir / "labels.csv")
            if thresholds is not None:
                save_thresholds(thresholds, run_dir / "thresholds.json")
            _atomic_json(run_dir / "manifest.json", {
                "format": "dfquant-run-v1",
                "config_hash": cfgmod.config_hash(cfg),
                "seed": cfg.run.seed,
                "num_classes": num_classes,
                "image_shape": list(image_shape),
                "status": "running",
            })

        logs: list[dict] = []

        def synth_batch():
            rows, _ = sample_rows(labels, cfg.run.batch_size, streams.labels)
            z = sample_latent(cfg.run.batch_size, cfg.gen.z_dim, streams.latent)
            return torch.from_numpy(rows).to(torch.float32), z

        for epoch in range(start_epoch, cfg.run.epochs):
            for step in range(cfg.run.batches_per_epoch):
                rows, z = synth_batch()
                gen.train()
                x = gen(z, rows)
                channel = None
                if robust_on and suite.strategy == "random_pick":
                    channel = pick_channel(streams.perturb)
                total, parts = generator_objective(
                    x, rows, teacher, weights, suite=suite, thr=thresholds,
                    g=streams.perturb if robust_on else None, channel=channel)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite generator loss at epoch {epoch} step {step}",
                        last_checkpoint=str(last_ckpt) if last_ckpt else None)
                opt_g.zero_grad()
                total.backward()
                opt_g.step()

                kd_val = 0.0
                if epoch >= cfg.run.warmup_epochs:
                    rows2, z2 = synth_batch()
                    gen.eval()
                    with torch.no_grad():
                        x2 = gen(z2, rows2)
                    student.train()
                    s_logits = student(x2)
                    with torch.no_grad():
                        t_logits = teacher(x2)
                    kd = distillation_loss(s_logits, t_logits, rows2,
                                           temperature=cfg.student.temperature)
                    if not torch.isfinite(kd):
                        raise TrainingDiverged(
                            f"non-finite distillation loss at epoch {epoch} step {step}",
                            last_checkpoint=str(last_ckpt) if last_ckpt else None)
                    opt_s.zero_grad()
                    kd.backward()
                    opt_s.step()
                    kd_val = kd.item()

                logs.append({
                    "epoch": epoch, "step": step,
                    "l_ce": parts["ce"], "l_bns": parts["bns"],
                    "l_robust": parts["robust"], "rf_mean": parts["rf_mean"],
                    "rp_mean": parts["rp_mean"], "l_kd": kd_val,
                    "l_total": parts["total"],
                })
            sched_g.step()
            if epoch >= cfg.run.warmup_epochs:
                sched_s.step()
            if run_dir is not None:
                last_ckpt = save_checkpoint(run_dir, epoch, cfg, gen, student,
                                            opt_g, opt_s, sched_g, sched_s, streams)
                append_logs(run_dir / "logs.csv", logs[-cfg.run.batches_per_epoch:])

    if run_dir is not None:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        manifest["status"] = "done"
        manifest["epochs_done"] = cfg.run.epochs
        _atomic_json(run_dir / "manifest.json", manifest)
    gen.eval()
    student.eval()
    return TrainResult(generator=gen, student=student, logs=logs,
                       run_dir=run_dir, thresholds=thresholds, label_matrix=labels)


@dataclass
class LoadedRun:
    cfg: TrainConfig
    generator: ConditionalGenerator
    student: QuantizedModel | None
    label_matrix: np.ndarray
    checkpoint: Path


def load_run(run_dir: str | Path, teacher: nn.Module | None = None) -> LoadedRun:
    """Rebuild the generator (and student, when a teacher is supplied) from
    the latest checkpoint of a finished or interrupted run."""
    run_dir = Path(run_dir)
    cfg = cfgmod.parse_config(run_dir / "config.txt")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    gen = ConditionalGenerator(num_classes=manifest["num_classes"],
                               z_dim=cfg.gen.z_dim, base_width=cfg.gen.base_width,
                               image_size=manifest["image_shape"][1],
                               out_channels=manifest["image_shape"][0])
    gen.load_state_dict(torch.load(ckpt / "generator.pt", weights_only=True))
    gen.eval()
    student = None
    if teacher is not None:
        student = _build_student(teacher, cfg)
        student.load_state_dict(torch.load(ckpt / "student.pt", weights_only=True))
        student.eval()
    labels = load_labels(run_dir / "labels.csv")
    return LoadedRun(cfg=cfg, generator=gen, student=student,
                     label_matrix=labels, checkpoint=ckpt)


def append_logs(path: Path, rows: list[dict]) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def evaluate_student(student: nn.Module, dataset) -> dict:
    return {
        "top1": topk_accuracy(student, dataset, k=1),
        "top5": topk_accuracy(student, dataset, k=5),
    }


def ablate(teacher: nn.Module, base_cfg: TrainConfig, grid: list[tuple[str, dict]],
           eval_dataset, run_root: str | Path) -> list[dict]:
    """Run each named override set; individual failures don't stop the grid."""
    run_root = Path(run_root)
    run_root.mkdir(parents=True, exist_ok=True)
    results = []
    for name, overrides in grid:
        flat = cfgmod.to_flat(base_cfg)
        flat.update({k: str(v) for k, v in overrides.items()})
        row = {"name": name, "top1": "", "top5": "", "status": "ok", "error": ""}
        try:
            cfg = cfgmod.from_flat(flat)
            result = train(teacher, cfg, run_dir=run_root / name)
            acc = evaluate_student(result.student, eval_dataset)
            row.update(top1=f"{acc['top1']:.4f}", top5=f"{acc['top5']:.4f}")
        except Exception as e:  # noqa: BLE001 - grid must survive bad cells
            log.warning("ablation cell %s failed: %s", name, e)
            row.update(status="error", error=str(e))
        results.append(row)
    with open(run_root / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "top1", "top5", "status", "error"])
        writer.writeheader()
        writer.writerows(results)
    return results
