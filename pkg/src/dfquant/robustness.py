"""Output-inconsistency metrics under perturbation and their thresholds.

A batch is pushed through the teacher clean and under n input / m weight
perturbations. Feature inconsistency is the worst cosine distance of the
penultimate embedding to its clean value; prediction inconsistency is the
worst L1 gap between softmax rows. Thresholds for both come from the
upper tail of the same statistics measured on pure-noise images, so the
hinge loss only fires on images less stable than the top epsilon share
of noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .perturb import (
    InputPerturbation,
    WeightPerturbation,
    apply_input,
    perturb_weights,
    pick_channel,
)

STRATEGIES = ("serial", "parallel", "random_pick")


@dataclass
class PerturbSuite:
    """What gets perturbed per batch and how the two channels combine."""

    input_spec: InputPerturbation = field(default_factory=InputPerturbation)
    weight_spec: WeightPerturbation = field(default_factory=WeightPerturbation)
    n_input: int = 3
    m_weight: int = 1
    strategy: str = "random_pick"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n_input < 1 or self.m_weight < 1:
            raise ValueError("need n_input >= 1 and m_weight >= 1")


@dataclass(frozen=True)
class RobustnessThresholds:
    theta_f: float
    theta_p: float
    epsilon: float
    n_noise: int
    seed: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.theta_f) and math.isfinite(self.theta_p)):
            raise ValueError("thresholds must be finite")


@dataclass
class PerturbedOutputs:
    f0: torch.Tensor            # (B, D) clean features
    p0: torch.Tensor            # (B, C) clean softmax rows
    fs: list[torch.Tensor]      # perturbed features, each (B, D)
    ps: list[torch.Tensor]      # perturbed softmax rows, each (B, C)

    def __post_init__(self):
        if len(self.fs) != len(self.ps):
            raise ValueError("feature and prediction lists must align")
        for t in [self.f0, self.p0, *self.fs, *self.ps]:
            if not torch.isfinite(t).all():
                raise ValueError("non-finite perturbed output")
        if any(f.shape != self.f0.shape for f in self.fs):
            raise ValueError("inconsistent feature shapes")
        if any(p.shape != self.p0.shape for p in self.ps):
            raise ValueError("inconsistent prediction shapes")

    @property
    def n(self) -> int:
        return len(self.fs)


def _softmax_pair(out: tuple[torch.Tensor, torch.Tensor]):
    feat, logits = out
    return feat, torch.softmax(logits, dim=1)


def perturbed_forwards(teacher, x: torch.Tensor, suite: PerturbSuite,
                       g: torch.Generator, channel: str | None = None,
                       clean: tuple[torch.Tensor, torch.Tensor] | None = None,
                       labels: torch.Tensor | None = None) -> PerturbedOutputs:
    """Clean plus perturbed teacher outputs for one batch.

    channel: "input"/"weight" for the random_pick strategy during
    training; None runs the full set the strategy defines (serial cross
    product, otherwise inputs followed by weight views), which is what
    calibration uses. Input draws consume rng before weight draws.
    """
    if clean is None:
        f0, p0 = _softmax_pair(teacher.forward_features(x))
    else:
        f0, p0 = clean

    def input_batches():
        return [apply_input(x, suite.input_spec, g) for _ in range(suite.n_input)]

    def weight_views():
        views = []
        for _ in range(suite.m_weight):
            batch = None
            if suite.weight_spec.kind == "adversarial":
                # data-free stand-in for labels: the teacher's own verdict
                y = labels if labels is not None else p0.argmax(dim=1)
                batch = (x, y)
            views.append(perturb_weights(teacher, suite.weight_spec, g, batch=batch))
        return views

    outs = []
    if suite.strategy == "serial" and channel is None:
        ins = input_batches()
        for view in weight_views():
            outs += [_softmax_pair(view.forward_features(xi)) for xi in ins]
    elif channel == "input":
        outs = [_softmax_pair(teacher.forward_features(xi)) for xi in input_batches()]
    elif channel == "weight":
        outs = [_softmax_pair(view.forward_features(x)) for view in weight_views()]
    elif channel is None:
        # parallel set; also the calibration superset for random_pick
        outs = [_softmax_pair(teacher.forward_features(xi)) for xi in input_batches()]
        outs += [_softmax_pair(view.forward_features(x)) for view in weight_views()]
    else:
        raise ValueError(f"unknown channel {channel!r}")
    return PerturbedOutputs(f0, p0, [o[0] for o in outs], [o[1] for o in outs])


def feature_inconsistency(outs: PerturbedOutputs) -> torch.Tensor:
    """Per-image worst cosine distance of perturbed features to clean."""
    if outs.n < 1:
        raise ValueError("need at least one perturbed forward")
    norms0 = outs.f0.norm(dim=1)
    worst = None
    for f in outs.fs:
        normsi = f.norm(dim=1)
        if (norms0 == 0).any() or (normsi == 0).any():
            raise ValueError("zero-norm feature vector: degenerate activation")
        cos = (outs.f0 * f).sum(dim=1) / (norms0 * normsi)
        d = 1.0 - cos
        worst = d if worst is None else torch.maximum(worst, d)
    return worst


def _check_prob_rows(p: torch.Tensor):
    if (p.sum(dim=1) - 1.0).abs().max() > 1e-4:
        raise ValueError("prediction rows must sum to 1 (post-softmax expected)")


def prediction_inconsistency(outs: PerturbedOutputs) -> torch.Tensor:
    """Per-image worst L1 gap between perturbed and clean softmax rows."""
    if outs.n < 1:
        raise ValueError("need at least one perturbed forward")
    _check_prob_rows(outs.p0)
    worst = None
    for p in outs.ps:
        _check_prob_rows(p)
        d = (outs.p0 - p).abs().sum(dim=1)
        worst = d if worst is None else torch.maximum(worst, d)
    return worst


def nearest_rank_quantile(values, level: float) -> float:
    """Nearest-rank quantile: the element at 1-based index ceil(level*M)."""
    v = torch.as_tensor(values, dtype=torch.float64).flatten()
    if v.numel() == 0:
        raise ValueError("empty value list")
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must be in [0, 1]")
    idx = max(1, math.ceil(level * v.numel()))
    return float(v.sort().values[idx - 1])


@torch.no_grad()
def calibrate_thresholds(teacher, suite: PerturbSuite, epsilon: float = 0.1,
                         n_noise: int = 1000, image_shape=(3, 32, 32),
                         g: torch.Generator | None = None, seed: int | None = None,
                         batch_size: int = 100) -> RobustnessThresholds:
    """Set theta_f/theta_p at the (1-epsilon) nearest-rank quantile of the
    inconsistencies of standard-normal noise images; larger epsilon means
    lower thresholds, i.e. less tolerance."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    if n_noise < 10:
        raise ValueError("n_noise must be >= 10")
    if g is None:
        g = torch.Generator().manual_seed(0 if seed is None else seed)
    rf, rp = [], []
    for start in range(0, n_noise, batch_size):
        b = min(batch_size, n_noise - start)
        noise = torch.randn((b, *image_shape), generator=g)
        outs = perturbed_forwards(teacher, noise, suite, g, channel=None)
        rf.append(feature_inconsistency(outs))
        rp.append(prediction_inconsistency(outs))
    rf = torch.cat(rf)
    rp = torch.cat(rp)
    return RobustnessThresholds(
        theta_f=nearest_rank_quantile(rf, 1.0 - epsilon),
        theta_p=nearest_rank_quantile(rp, 1.0 - epsilon),
        epsilon=epsilon,
        n_noise=n_noise,
        seed=seed,
    )


def robustness_loss(r_f, r_p, thr: RobustnessThresholds, beta: float) -> torch.Tensor:
    """Mean over the batch of max(R_f - theta_f, 0) + beta * max(R_p - theta_p, 0)."""
    r_f = torch.as_tensor(r_f, dtype=torch.float32 if not torch.is_tensor(r_f) else None)
    r_p = torch.as_tensor(r_p, dtype=torch.float32 if not torch.is_tensor(r_p) else None)
    excess = F.relu(r_f - thr.theta_f) + beta * F.relu(r_p - thr.theta_p)
    return excess.mean()


@torch.no_grad()
def positive_loss_fraction(teacher, suite: PerturbSuite, thr: RobustnessThresholds,
                           beta: float, n: int, image_shape=(3, 32, 32),
                           g: torch.Generator | None = None,
                           batch_size: int = 100) -> float:
    """Share of fresh noise images with a strictly positive hinge loss."""
    if g is None:
        g = torch.Generator().manual_seed(1)
    positives = 0
    for start in range(0, n, batch_size):
        b = min(batch_size, n - start)
        noise = torch.randn((b, *image_shape), generator=g)
        outs = perturbed_forwards(teacher, noise, suite, g, channel=None)
        rf = feature_inconsistency(outs)
        rp = prediction_inconsistency(outs)
        per_image = F.relu(rf - thr.theta_f) + beta * F.relu(rp - thr.theta_p)
        positives += int((per_image > 0).sum())
    return positives / n


def save_thresholds(thr: RobustnessThresholds, path: str | Path) -> None:
    Path(path).write_text(json.dumps(thr.__dict__, indent=2))


def load_thresholds(path: str | Path) -> RobustnessThresholds:
    return RobustnessThresholds(**json.loads(Path(path).read_text()))
