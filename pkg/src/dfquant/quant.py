"""Fake quantization of weights and activations.

Per-tensor (optionally per-channel for weights) asymmetric uniform
quantization simulated in floating point, with straight-through gradients
clipped to the observed range. A frozen full-precision network is converted
into a trainable low-bit student by swapping conv/linear layers for
quantized wrappers around full-precision shadow weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class QuantizationError(RuntimeError):
    pass


class NotCalibratedError(QuantizationError):
    """Quantize-dequantize requested before any range observation."""


class UnsupportedLayerError(QuantizationError):
    """The model contains a parameterized layer the converter cannot handle."""


@dataclass(frozen=True)
class QuantConfig:
    """Bit widths and range-tracking settings for the quantized student."""

    weight_bits: int = 4
    act_bits: int = 4
    range_momentum: float = 0.9
    per_channel: bool = False
    keep_first_last_fp: bool = False

    def __post_init__(self) -> None:
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if not 2 <= bits <= 16:
                raise ValueError(f"{name} must be in [2, 16], got {bits}")
        if not 0.0 <= self.range_momentum < 1.0:
            raise ValueError(
                f"range_momentum must be in [0, 1), got {self.range_momentum}"
            )


def _round_half_away(t: torch.Tensor) -> torch.Tensor:
    # torch.round ties to even; the quantization grid needs a fixed,
    # platform-independent tie-break away from zero.
    return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)


class FakeQuantizer(nn.Module):
    """Tracks a value range and simulates uniform quantization onto it.

    ``min_obs``/``max_obs`` are updated by :meth:`observe` (exponential
    moving min/max); the forward pass maps inputs onto the
    ``2**bits``-level grid spanning the observed range and passes
    gradients straight through inside the range, zero outside.

    ``channel_size``/``channel_axis`` switch on per-channel ranges
    (used for weights only).
    """

    def __init__(self, bits: int, channel_size: int | None = None,
                 channel_axis: int = 0):
        super().__init__()
        if not 2 <= bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {bits}")
        self.bits = bits
        self.channel_axis = channel_axis
        shape = () if channel_size is None else (channel_size,)
        self.register_buffer("min_obs", torch.zeros(shape))
        self.register_buffer("max_obs", torch.zeros(shape))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def per_channel(self) -> bool:
        return self.min_obs.dim() > 0

    @property
    def n_levels(self) -> int:
        return 2 ** self.bits - 1

    @property
    def calibrated(self) -> bool:
        return bool(self.initialized) and bool((self.max_obs > self.min_obs).all())

    @property
    def scale(self) -> torch.Tensor:
        return (self.max_obs - self.min_obs) / self.n_levels

    @property
    def zero_point(self) -> torch.Tensor:
        zp = _round_half_away(-self.min_obs / self.scale)
        return zp.clamp(0, self.n_levels).to(torch.long)

    def _reduce_range(self, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.per_channel:
            return values.min(), values.max()
        dims = [d for d in range(values.dim()) if d != self.channel_axis]
        return values.amin(dim=dims), values.amax(dim=dims)

    def observe(self, values: torch.Tensor, momentum: float) -> None:
        """Fold a batch's min/max into the tracked range.

        First observation sets the range directly; later ones apply
        ``new = momentum * old + (1 - momentum) * batch``.
        """
        if values.numel() == 0:
            raise ValueError("cannot observe an empty tensor")
        if not torch.isfinite(values).all():
            raise ValueError("cannot observe non-finite values")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        with torch.no_grad():
            if not self.initialized and values.dtype != self.min_obs.dtype:
                self.min_obs.data = self.min_obs.data.to(values.dtype)
                self.max_obs.data = self.max_obs.data.to(values.dtype)
            lo, hi = self._reduce_range(values)
            lo = lo.to(self.min_obs.dtype)
            hi = hi.to(self.max_obs.dtype)
            if self.initialized:
                lo = momentum * self.min_obs + (1.0 - momentum) * lo
                hi = momentum * self.max_obs + (1.0 - momentum) * hi
            # degenerate range (constant input) would leave the grid
            # unusable; widen by a hair instead
            eps = torch.clamp(hi.abs(), min=1.0) * 16 * torch.finfo(hi.dtype).eps
            hi = torch.where(hi - lo > 0, hi, hi + eps)
            self.min_obs.copy_(lo)
            self.max_obs.copy_(hi)
            self.initialized.fill_(True)

    def _broadcast(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        if not self.per_channel:
            return t
        shape = [1] * ndim
        shape[self.channel_axis] = t.numel()
        return t.view(shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Quantize-dequantize with a clipped straight-through gradient."""
        if not self.calibrated:
            raise NotCalibratedError(
                "quantizer has no observed range; call observe() first"
            )
        lo = self._broadcast(self.min_obs, x.dim()).to(x.dtype)
        hi = self._broadcast(self.max_obs, x.dim()).to(x.dtype)
        scale = (hi - lo) / self.n_levels
        with torch.no_grad():
            # multiply before dividing so exact half-way points (e.g. 0.5 on
            # a [0, 1] grid) stay exact ties for the away-from-zero round
            t = (x - lo) * self.n_levels / (hi - lo)
            q = _round_half_away(t).clamp(0, self.n_levels)
            qd = q * scale + lo
        if x.requires_grad:
            inside = ((x >= lo) & (x <= hi)).detach()
            return qd + (x - x.detach()) * inside
        return qd

    def extra_repr(self) -> str:
        return f"bits={self.bits}, per_channel={self.per_channel}"


def calibrate_range(values: torch.Tensor, q: FakeQuantizer,
                    momentum: float) -> FakeQuantizer:
    """Update ``q``'s observed range from ``values`` and return it."""
    q.observe(values, momentum)
    return q


def quantize_dequantize(x: torch.Tensor, q: FakeQuantizer) -> torch.Tensor:
    """Map ``x`` onto ``q``'s quantization grid."""
    return q(x)


class QuantConv2d(nn.Module):
    """Conv2d with fake-quantized shadow weights and input activations."""

    def __init__(self, conv: nn.Conv2d, cfg: QuantConfig, quantize_acts: bool = True):
        super().__init__()
        self.stride = conv.stride
        self.padding = conv.padding
        self.dilation = conv.dilation
        self.groups = conv.groups
        self.range_momentum = cfg.range_momentum
        self.weight = nn.Parameter(conv.weight.detach().clone())
        self.bias = (
            nn.Parameter(conv.bias.detach().clone()) if conv.bias is not None else None
        )
        ch = conv.out_channels if cfg.per_channel else None
        self.weight_quant = FakeQuantizer(cfg.weight_bits, channel_size=ch)
        self.weight_quant.observe(self.weight, 0.0)
        self.act_quant = FakeQuantizer(cfg.act_bits) if quantize_acts else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.act_quant is not None:
            if self.training:
                self.act_quant.observe(x, self.range_momentum)
            x = self.act_quant(x)
        if self.training:
            # weight range follows the current shadow weights exactly
            self.weight_quant.observe(self.weight, 0.0)
        w = self.weight_quant(self.weight)
        return F.conv2d(x, w, self.bias, self.stride, self.padding,
                        self.dilation, self.groups)


class QuantLinear(nn.Module):
    """Linear layer with fake-quantized shadow weights and input activations."""

    def __init__(self, linear: nn.Linear, cfg: QuantConfig, quantize_acts: bool = True):
        super().__init__()
        self.range_momentum = cfg.range_momentum
        self.weight = nn.Parameter(linear.weight.detach().clone())
        self.bias = (
            nn.Parameter(linear.bias.detach().clone())
            if linear.bias is not None else None
        )
        ch = linear.out_features if cfg.per_channel else None
        self.weight_quant = FakeQuantizer(cfg.weight_bits, channel_size=ch)
        self.weight_quant.observe(self.weight, 0.0)
        self.act_quant = FakeQuantizer(cfg.act_bits) if quantize_acts else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.act_quant is not None:
            if self.training:
                self.act_quant.observe(x, self.range_momentum)
            x = self.act_quant(x)
        if self.training:
            self.weight_quant.observe(self.weight, 0.0)
        w = self.weight_quant(self.weight)
        return F.linear(x, w, self.bias)


_PASSTHROUGH = (
    nn.BatchNorm1d, nn.BatchNorm2d, nn.ReLU, nn.LeakyReLU, nn.Tanh,
    nn.Sigmoid, nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d,
    nn.Flatten, nn.Identity, nn.Dropout, nn.Upsample, nn.Sequential,
    nn.ModuleList,
)


class QuantizedModel(nn.Module):
    """Trainable low-bit copy of a frozen teacher.

    Shadow weights start from the teacher's weights; every conv/linear
    carries weight and activation quantizers. Activation ranges track an
    EMA while in train mode and freeze in eval mode.
    """

    def __init__(self, model: nn.Module, cfg: QuantConfig):
        super().__init__()
        self.cfg = cfg
        self.model = model

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    def forward_features(self, x: torch.Tensor):
        return self.model.forward_features(x)

    def quantizers(self):
        """Yield (name, FakeQuantizer) pairs, in module order."""
        for name, module in self.model.named_modules():
            if isinstance(module, FakeQuantizer):
                yield name, module


def _quantizable_order(model: nn.Module) -> list[str]:
    return [
        name for name, m in model.named_modules()
        if isinstance(m, (nn.Conv2d, nn.Linear))
    ]


def build_quantized(teacher: nn.Module, cfg: QuantConfig) -> QuantizedModel:
    """Construct the trainable quantized student from a frozen teacher.

    Every ``nn.Conv2d``/``nn.Linear`` is replaced by its quantized wrapper;
    batch-norm and parameter-free layers are copied as-is. Any other layer
    that owns parameters raises :class:`UnsupportedLayerError`.
    """
    for p in teacher.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("teacher weights must be finite")
    student = copy.deepcopy(teacher)
    if isinstance(student, (nn.Conv2d, nn.Linear)):
        if cfg.keep_first_last_fp:
            return QuantizedModel(student, cfg)
        wrapper = QuantConv2d if isinstance(student, nn.Conv2d) else QuantLinear
        return QuantizedModel(wrapper(student, cfg), cfg)
    order = _quantizable_order(student)
    exempt = set()
    if cfg.keep_first_last_fp and order:
        exempt = {order[0], order[-1]}

    def convert(module: nn.Module, prefix: str) -> None:
        for child_name, child in module.named_children():
            full = f"{prefix}.{child_name}" if prefix else child_name
            if isinstance(child, nn.Conv2d):
                if full not in exempt:
                    setattr(module, child_name, QuantConv2d(child, cfg))
            elif isinstance(child, nn.Linear):
                if full not in exempt:
                    setattr(module, child_name, QuantLinear(child, cfg))
            else:
                if (not isinstance(child, _PASSTHROUGH)
                        and any(True for _ in child.parameters(recurse=False))):
                    raise UnsupportedLayerError(
                        f"layer {full!r} of type {type(child).__name__} "
                        "cannot be quantized"
                    )
                convert(child, full)

    convert(student, "")
    for p in student.parameters():
        p.requires_grad_(True)
    return QuantizedModel(student, cfg)
