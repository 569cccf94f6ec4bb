"""Desk-scale teacher provisioning.

Small residual classifiers that can be trained in minutes on CPU, plus the
datasets to train them on, so the whole pipeline runs end-to-end without
external checkpoints. Images live in [-1, 1] everywhere; each teacher
normalizes its own input with fixed per-dataset constants.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset, TensorDataset

from .guard import guard

log = logging.getLogger(__name__)

CHECKPOINT_WEIGHTS = "weights.pt"
CHECKPOINT_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class TeacherSpec:
    """Architecture and input convention of a desk-scale teacher."""

    depth: int = 1          # residual blocks per stage; 1 -> 8 weighted layers
    width: int = 16         # stem channels; stages use width, 2x, 4x
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    norm_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    norm_std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.depth < 1 or self.width < 4:
            raise ValueError("depth >= 1 and width >= 4 required")
        if len(self.norm_mean) != self.in_channels or len(self.norm_std) != self.in_channels:
            raise ValueError("normalization constants must match in_channels")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Residual classifier with its input normalization baked in.

    ``forward_features`` exposes the penultimate embedding next to the
    logits; BN running statistics are exposed through ``bn_layers``.
    """

    def __init__(self, spec: TeacherSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        mean = torch.tensor(spec.norm_mean).view(1, -1, 1, 1)
        std = torch.tensor(spec.norm_std).view(1, -1, 1, 1)
        self.register_buffer("norm_mean", mean)
        self.register_buffer("norm_std", std)
        self.conv1 = nn.Conv2d(spec.in_channels, w, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.stage1 = self._stage(w, w, spec.depth, stride=1)
        self.stage2 = self._stage(w, 2 * w, spec.depth, stride=2)
        self.stage3 = self._stage(2 * w, 4 * w, spec.depth, stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(4 * w, spec.num_classes)

    @staticmethod
    def _stage(in_ch, out_ch, blocks, stride):
        layers = [BasicBlock(in_ch, out_ch, stride)]
        layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = (x - self.norm_mean) / self.norm_std
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.stage3(self.stage2(self.stage1(h)))
        feat = self.pool(h).flatten(1)
        return feat, self.fc(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[1]

    def bn_layers(self) -> list[nn.BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]


def build_teacher(spec: TeacherSpec, seed: int | None = None) -> SmallResNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SmallResNet(spec)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class SyntheticGratings(Dataset):
    """Procedural oriented-grating benchmark, 3x32x32 in [-1, 1].

    Class k is a sinusoidal grating at orientation k*pi/num_classes with
    per-sample random phase, frequency jitter, amplitude, channel gains,
    and pixel noise. Learnable to high accuracy by a small CNN within a
    few epochs; raising num_classes tightens the orientation spacing and
    makes both the classification and the synthesis problem harder.
    Stands in for real training data, so every materialization is
    reported to the data-free guard.
    """

    SOURCE = "synthetic-gratings"

    def __init__(self, n_per_class: int = 500, seed: int = 0, image_size: int = 32,
                 num_classes: int = 10):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        guard.note_read(self.SOURCE)
        self.num_classes = num_classes
        g = torch.Generator().manual_seed(seed)
        n = n_per_class * num_classes
        labels = torch.arange(n) % num_classes
        theta = labels.float() * (math.pi / num_classes)
        theta = theta + (torch.rand(n, generator=g) - 0.5) * 0.08
        freq = 3.0 * (1.0 + (torch.rand(n, generator=g) - 0.5) * 0.3)
        phase = torch.rand(n, generator=g) * (2 * math.pi)
        amp = 0.5 + 0.4 * torch.rand(n, generator=g)
        gains = 0.6 + 0.4 * torch.rand(n, 3, generator=g)

        coords = torch.linspace(-0.5, 0.5, image_size)
        yy, xx = torch.meshgrid(coords, coords, indexing="ij")
        proj = (xx[None] * torch.cos(theta).view(-1, 1, 1)
                + yy[None] * torch.sin(theta).view(-1, 1, 1))
        wave = torch.sin(2 * math.pi * freq.view(-1, 1, 1) * proj + phase.view(-1, 1, 1))
        images = amp.view(-1, 1, 1, 1) * gains.view(-1, 3, 1, 1) * wave[:, None]
        images = images + 0.08 * torch.randn(images.shape, generator=g)
        self.images = images.clamp(-1.0, 1.0)
        self.labels = labels
        perm = torch.randperm(n, generator=g)
        self.images = self.images[perm].contiguous()
        self.labels = self.labels[perm].contiguous()

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx):
        guard.note_read(self.SOURCE)
        return self.images[idx], int(self.labels[idx])

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        guard.note_read(self.SOURCE)
        return self.images, self.labels


def load_dataset(name: str, root: str | None = None, split: str = "train",
                 seed: int = 0, n_per_class: int = 500,
                 num_classes: int = 10) -> Dataset:
    """Built-in loaders plus the standard image-folder layout.

    ``gratings`` needs no files; ``folder`` expects ``root/split/<class>/*``;
    ``cifar10``/``cifar100`` read torchvision's binary layout from ``root``.
    """
    if name == "gratings":
        # disjoint seeds keep the splits disjoint
        split_seed = {"train": 0, "test": 1, "val": 2}.get(split)
        if split_seed is None:
            raise ValueError(f"unknown split {split!r}")
        return SyntheticGratings(n_per_class=n_per_class, seed=seed * 16 + split_seed,
                                 num_classes=num_classes)
    if name in ("cifar10", "cifar100"):
        import torchvision

        guard.note_read(f"{name}:{root}")
        cls = torchvision.datasets.CIFAR10 if name == "cifar10" else torchvision.datasets.CIFAR100
        tfm = _to_pm1_tensor
        return cls(root=root, train=split == "train", transform=tfm, download=False)
    if name == "folder":
        import torchvision

        guard.note_read(f"folder:{root}/{split}")
        return torchvision.datasets.ImageFolder(
            str(Path(root) / split), transform=_to_pm1_tensor
        )
    raise ValueError(f"unknown dataset {name!r}")


def _to_pm1_tensor(img):
    import torchvision.transforms.functional as TF

    return TF.to_tensor(img) * 2.0 - 1.0


def dataset_tensors(dataset: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(dataset, SyntheticGratings):
        return dataset.tensors()
    xs, ys = zip(*(dataset[i] for i in range(len(dataset))))
    return torch.stack(list(xs)), torch.tensor(ys)


def train_teacher(
    spec: TeacherSpec,
    dataset: Dataset,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 128,
    lr: float = 0.05,
    eval_dataset: Dataset | None = None,
    accuracy_floor: float = 0.7,
) -> tuple[SmallResNet, float]:
    """Supervised training of a desk teacher; returns the frozen model and
    its held-out accuracy (train accuracy when no eval set is given)."""
    model = build_teacher(spec, seed=seed)
    model.train()
    images, labels = dataset_tensors(dataset)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    g = torch.Generator().manual_seed(seed)
    n = len(labels)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    freeze(model)
    from .metrics import topk_accuracy

    acc = topk_accuracy(model, eval_dataset if eval_dataset is not None else dataset, k=1)
    if acc < accuracy_floor:
        log.warning(
            "teacher accuracy %.3f below floor %.3f; downstream results will degrade",
            acc, accuracy_floor,
        )
    return model, acc


def save_teacher(model: SmallResNet, accuracy: float, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / CHECKPOINT_WEIGHTS)
    manifest = {
        "format": "dfquant-teacher-v1",
        "spec": asdict(model.spec),
        "accuracy": accuracy,
    }
    tmp = path / (CHECKPOINT_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.rename(path / CHECKPOINT_MANIFEST)


def load_teacher(path: str | Path) -> tuple[SmallResNet, dict]:
    """Load a frozen teacher checkpoint (weights immutable, eval mode)."""
    path = Path(path)
    manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text())
    if manifest.get("format") != "dfquant-teacher-v1":
        raise ValueError(f"not a teacher checkpoint: {path}")
    spec_d = dict(manifest["spec"])
    spec_d["norm_mean"] = tuple(spec_d["norm_mean"])
    spec_d["norm_std"] = tuple(spec_d["norm_std"])
    spec = TeacherSpec(**spec_d)
    model = SmallResNet(spec)
    model.load_state_dict(torch.load(path / CHECKPOINT_WEIGHTS, weights_only=True))
    freeze(model)
    for bn in model.bn_layers():
        if not (torch.isfinite(bn.running_mean).all() and torch.isfinite(bn.running_var).all()):
            raise ValueError("teacher has non-finite BN running statistics")
    return model, manifest
