"""Conditional image synthesis from Gaussian latents.

ACGAN-style decoder: a latent vector plus a class-embedding mix is
projected to a low-resolution feature map and upsampled to an image in
[-1, 1]. Conditions are probability rows over classes; hard labels are
converted to one-hot rows so both enter through the same path and a
one-hot row is bit-identical to its hard label.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ConditionalGenerator(nn.Module):
    def __init__(self, num_classes: int = 10, z_dim: int = 100, base_width: int = 64,
                 image_size: int = 32, out_channels: int = 3):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        self.num_classes = num_classes
        self.z_dim = z_dim
        self.image_size = image_size
        self.init_size = image_size // 4
        self.embed = nn.Embedding(num_classes, z_dim)
        self.fc = nn.Linear(z_dim, 2 * base_width * self.init_size ** 2)
        self.head_bn = nn.BatchNorm2d(2 * base_width)
        self.blocks = nn.Sequential(
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * base_width, 2 * base_width, 3, padding=1),
            nn.BatchNorm2d(2 * base_width, 0.8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(2 * base_width, base_width, 3, padding=1),
            nn.BatchNorm2d(base_width, 0.8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base_width, out_channels, 3, padding=1),
            nn.Tanh(),
        )

    def condition_vector(self, cond: torch.Tensor) -> torch.Tensor:
        """Map hard labels or simplex rows to embedding space."""
        if cond.dtype in (torch.int64, torch.int32, torch.int16):
            if cond.ndim != 1:
                raise ValueError("hard labels must be a 1-D index tensor")
            if cond.min() < 0 or cond.max() >= self.num_classes:
                raise ValueError("label index out of range")
            cond = F.one_hot(cond, self.num_classes).to(self.embed.weight.dtype)
        if cond.ndim != 2 or cond.shape[1] != self.num_classes:
            raise ValueError(
                f"condition rows must be (B, {self.num_classes}), got {tuple(cond.shape)}"
            )
        if (cond < 0).any() or not torch.allclose(
            cond.sum(dim=1), torch.ones(len(cond), dtype=cond.dtype), atol=1e-4
        ):
            raise ValueError("condition rows must lie on the probability simplex")
        return cond @ self.embed.weight

    def forward(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ValueError(f"latents must be (B, {self.z_dim}), got {tuple(z.shape)}")
        h = z + self.condition_vector(cond)
        h = self.fc(h).view(len(z), -1, self.init_size, self.init_size)
        return self.blocks(self.head_bn(h))


def sample_latent(batch: int, z_dim: int = 100,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    if batch < 1 or z_dim < 1:
        raise ValueError("batch and z_dim must be >= 1")
    return torch.randn(batch, z_dim, generator=generator)


def synthesize(model: ConditionalGenerator, z: torch.Tensor, cond) -> torch.Tensor:
    if not torch.is_tensor(cond):
        cond = torch.as_tensor(cond)
    return model(z, cond)
