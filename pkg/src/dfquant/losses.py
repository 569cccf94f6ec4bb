"""Generator and student losses.

The generator objective is classification confidence (CE against the
sampled label row) plus BN-statistics alignment, with the robustness
hinge added on top when enabled. The student trains by distillation:
hard/soft CE plus temperature-scaled KL to the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .robustness import (
    PerturbSuite,
    RobustnessThresholds,
    feature_inconsistency,
    perturbed_forwards,
    prediction_inconsistency,
    robustness_loss,
)

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1       # BNS weight
    lambda_r: float = 1.0    # robustness-loss weight
    beta: float = 1.0        # prediction-vs-feature balance inside the hinge

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_r < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


def cross_entropy(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean CE of probability rows against hard indices or simplex rows."""
    if pred.ndim != 2:
        raise ValueError("pred must be (B, C) probability rows")
    if (pred.sum(dim=1) - 1.0).abs().max() > 1e-4:
        raise ValueError("pred rows must sum to 1")
    if not torch.is_tensor(target):
        target = torch.as_tensor(target)
    if target.dtype in (torch.int64, torch.int32):
        target = F.one_hot(target, pred.shape[1]).to(pred.dtype)
    if target.shape != pred.shape:
        raise ValueError("target shape mismatch")
    return -(target * pred.clamp_min(LOG_CLAMP).log()).sum(dim=1).mean()


@dataclass
class BNStatPair:
    stored_mean: torch.Tensor
    stored_std: torch.Tensor
    batch_mean: torch.Tensor
    batch_std: torch.Tensor


def forward_with_bn_stats(teacher: nn.Module, x: torch.Tensor):
    """One forward returning (features, logits, BNStatPair list).

    Batch statistics are taken from each BN layer's input, reduced over
    batch and spatial axes; they stay differentiable w.r.t. x so the
    alignment loss can drive the generator.
    """
    if x.ndim != 4 or x.shape[0] < 1 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError("need a non-empty (B, C, H, W) batch")
    bns = [m for m in teacher.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        raise ValueError("teacher has no BN layers to align against")
    pairs: list[BNStatPair] = []
    handles = []

    def probe(module, inputs):
        inp = inputs[0]
        dims = (0,) + tuple(range(2, inp.ndim))
        pairs.append(BNStatPair(
            stored_mean=module.running_mean.detach(),
            stored_std=module.running_var.detach().clamp_min(0).sqrt(),
            batch_mean=inp.mean(dim=dims),
            batch_std=inp.std(dim=dims, unbiased=False),
        ))

    try:
        for m in bns:
            handles.append(m.register_forward_pre_hook(probe))
        feat, logits = teacher.forward_features(x)
    finally:
        for h in handles:
            h.remove()
    return feat, logits, pairs


def capture_bn_inputs(teacher: nn.Module, x: torch.Tensor) -> list[BNStatPair]:
    return forward_with_bn_stats(teacher, x)[2]


def bns_loss(pairs: list[BNStatPair]) -> torch.Tensor:
    if not pairs:
        raise ValueError("no BN statistics captured")
    total = None
    for p in pairs:
        term = ((p.batch_mean - p.stored_mean) ** 2).sum() \
            + ((p.batch_std - p.stored_std) ** 2).sum()
        total = term if total is None else total + term
    return total


def generator_objective(x: torch.Tensor, target, teacher: nn.Module, w: LossWeights,
                        suite: PerturbSuite | None = None,
                        thr: RobustnessThresholds | None = None,
                        g: torch.Generator | None = None,
                        channel: str | None = None):
    """CE + alpha*BNS (+ lambda_r * robustness hinge) on a synthesized batch.

    With lambda_r == 0 the robustness machinery is skipped entirely: no
    perturbed forwards and no rng consumption, so such a run is
    bit-for-bit the plain baseline objective.
    """
    feat, logits, pairs = forward_with_bn_stats(teacher, x)
    probs = torch.softmax(logits, dim=1)
    ce = cross_entropy(probs, target)
    bns = bns_loss(pairs)
    total = ce + w.alpha * bns
    parts = {"ce": ce.item(), "bns": bns.item(), "robust": 0.0,
             "rf_mean": 0.0, "rp_mean": 0.0}
    if w.lambda_r > 0:
        if suite is None or thr is None or g is None:
            raise ValueError("lambda_r > 0 needs a perturbation suite, thresholds, and rng")
        outs = perturbed_forwards(teacher, x, suite, g, channel=channel,
                                  clean=(feat, probs))
        r_f = feature_inconsistency(outs)
        r_p = prediction_inconsistency(outs)
        robust = robustness_loss(r_f, r_p, thr, w.beta)
        total = total + w.lambda_r * robust
        parts.update(robust=robust.item(), rf_mean=r_f.mean().item(),
                     rp_mean=r_p.mean().item())
    parts["total"] = total.item()
    return total, parts


def distillation_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                      target, temperature: float = 4.0) -> torch.Tensor:
    """CE to the label plus T^2-scaled KL(teacher || student) of softened rows."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not torch.is_tensor(target):
        target = torch.as_tensor(target)
    ce = F.cross_entropy(student_logits, target)
    kl = F.kl_div(
        F.log_softmax(student_logits / temperature, dim=1),
        F.softmax(teacher_logits / temperature, dim=1),
        reduction="batchmean",
    )
    return ce + temperature ** 2 * kl
