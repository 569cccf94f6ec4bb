"""Differentiable input perturbations and transient teacher-weight views.

Input perturbations keep gradients flowing to the image (noise add,
zero-pad shift, bilinear resize round trip). Weight perturbations never
touch stored teacher parameters: they build an override dict and run the
forward through torch.func.functional_call, so the view evaporates with
the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad

log = logging.getLogger(__name__)

INPUT_KINDS = ("gaussian_noise", "translation", "resize")
WEIGHT_KINDS = ("gaussian", "adversarial", "dropout")


@dataclass(frozen=True)
class InputPerturbation:
    kind: str = "random_select"
    sigma: float = 0.05          # gaussian_noise
    max_shift: int = 2           # translation, pixels
    scale_lo: float = 0.9        # resize
    scale_hi: float = 1.1

    def __post_init__(self):
        if self.kind not in INPUT_KINDS + ("random_select",):
            raise ValueError(f"unknown input perturbation {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if not (0 < self.scale_lo <= self.scale_hi):
            raise ValueError("need 0 < scale_lo <= scale_hi")


@dataclass(frozen=True)
class WeightPerturbation:
    kind: str = "gaussian"
    sigma_rel: float = 0.01      # gaussian: std relative to per-layer weight std
    gamma: float = 0.01          # adversarial: step size relative to layer norm
    p: float = 0.1               # dropout: neuron drop probability

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight perturbation {self.kind!r}")
        if self.sigma_rel < 0 or self.gamma < 0 or not (0 <= self.p < 1):
            raise ValueError("invalid weight perturbation parameters")


def resolve_kind(spec: InputPerturbation, g: torch.Generator) -> str:
    """One concrete kind per batch; random_select draws uniformly."""
    if spec.kind != "random_select":
        return spec.kind
    i = int(torch.randint(0, len(INPUT_KINDS), (1,), generator=g))
    return INPUT_KINDS[i]


def apply_input(x: torch.Tensor, spec: InputPerturbation, g: torch.Generator) -> torch.Tensor:
    if x.ndim != 4:
        raise ValueError("expected a (B, C, H, W) image batch")
    h = x.shape[-2]
    if spec.max_shift > h // 4:
        raise ValueError("max_shift exceeds a quarter of the image height")
    kind = resolve_kind(spec, g)
    if kind == "gaussian_noise":
        if spec.sigma == 0:
            return x
        return x + spec.sigma * torch.randn(x.shape, generator=g, dtype=x.dtype)
    if kind == "translation":
        s = spec.max_shift
        if s == 0:
            return x
        dy, dx = (int(v) for v in torch.randint(-s, s + 1, (2,), generator=g))
        if dy == 0 and dx == 0:
            return x
        pad = F.pad(x, (s, s, s, s))
        w = x.shape[-1]
        return pad[..., s - dy:s - dy + h, s - dx:s - dx + w]
    if kind == "resize":
        scale = spec.scale_lo + (spec.scale_hi - spec.scale_lo) * float(
            torch.rand(1, generator=g)
        )
        size = max(1, round(h * scale))
        down = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return F.interpolate(down, size=x.shape[-2:], mode="bilinear", align_corners=False)
    raise AssertionError(kind)


class PerturbedTeacher:
    """Read-only forward of a teacher under a weight override dict."""

    def __init__(self, teacher: nn.Module, overrides: dict[str, torch.Tensor]):
        self.teacher = teacher
        self.overrides = overrides
        self._shim = _FeatureShim(teacher)
        self._shim_overrides = {f"base.{k}": v for k, v in overrides.items()}

    def forward_features(self, x):
        return functional_call(self._shim, self._shim_overrides, (x,))

    def __call__(self, x):
        return self.forward_features(x)[1]


class _FeatureShim(nn.Module):
    # functional_call only reaches forward(); route it to forward_features
    def __init__(self, base):
        super().__init__()
        self.base = base

    def forward(self, x):
        return self.base.forward_features(x)


def _target_weights(teacher: nn.Module) -> dict[str, torch.Tensor]:
    # conv/linear kernels only; biases and norm affines stay put
    return {n: p for n, p in teacher.named_parameters() if p.ndim >= 2}


def perturb_weights(teacher: nn.Module, spec: WeightPerturbation, g: torch.Generator,
                    batch: tuple[torch.Tensor, torch.Tensor] | None = None) -> PerturbedTeacher:
    weights = _target_weights(teacher)
    overrides: dict[str, torch.Tensor] = {}
    if spec.kind == "gaussian":
        if spec.sigma_rel > 0:
            for name, w in weights.items():
                std = w.detach().std()
                noise = torch.randn(w.shape, generator=g, dtype=w.dtype)
                overrides[name] = (w + spec.sigma_rel * std * noise).detach()
    elif spec.kind == "dropout":
        if spec.p > 0:
            for name, w in weights.items():
                keep = (torch.rand(w.shape[0], generator=g) >= spec.p).to(w.dtype)
                shape = (w.shape[0],) + (1,) * (w.ndim - 1)
                overrides[name] = (w * keep.view(shape)).detach()
    elif spec.kind == "adversarial":
        if batch is None:
            raise ValueError("adversarial weight perturbation needs an (x, y) batch")
        if spec.gamma > 0:
            overrides = _adversarial_overrides(teacher, weights, spec.gamma, batch)
    return PerturbedTeacher(teacher, overrides)


def _adversarial_overrides(teacher, weights, gamma, batch):
    x, y = batch
    params = {n: p.detach() for n, p in weights.items()}

    def ce(p):
        return F.cross_entropy(functional_call(teacher, p, (x,)), y)

    grads = grad(ce)(params)
    overrides = {}
    for name, w in weights.items():
        gnorm = grads[name].norm()
        if gnorm == 0:
            log.warning("zero adversarial gradient for %s; layer left unperturbed", name)
            continue
        v = gamma * grads[name] / gnorm * w.detach().norm()
        overrides[name] = (w + v).detach()
    return overrides


def pick_channel(g: torch.Generator) -> str:
    """Per-batch coin flip between perturbing the input or the weights."""
    return "input" if int(torch.randint(0, 2, (1,), generator=g)) == 0 else "weight"
