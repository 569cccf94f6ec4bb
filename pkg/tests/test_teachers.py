import logging

import pytest
import torch
from torch import nn

from dfquant.guard import GuardViolation, guard
from dfquant.teachers import (
    SmallResNet,
    SyntheticGratings,
    TeacherSpec,
    build_teacher,
    dataset_tensors,
    freeze,
    load_dataset,
    load_teacher,
    save_teacher,
    train_teacher,
)


class TestSpec:
    def test_defaults_valid(self):
        TeacherSpec()

    @pytest.mark.parametrize("kw", [{"depth": 0}, {"width": 2}, {"norm_mean": (0.0,)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TeacherSpec(**kw)


class TestSmallResNet:
    def test_shapes(self):
        m = build_teacher(TeacherSpec(depth=1, width=8), seed=0)
        x = torch.randn(4, 3, 32, 32)
        feat, logits = m.forward_features(x)
        assert feat.shape == (4, 32)
        assert logits.shape == (4, 10)
        assert torch.equal(m(x), logits)

    def test_depth_scales_conv_count(self):
        def main_convs(depth):
            m = build_teacher(TeacherSpec(depth=depth, width=8))
            n = sum(
                1
                for name, mod in m.named_modules()
                if isinstance(mod, (nn.Conv2d, nn.Linear)) and "shortcut" not in name
            )
            return n

        # stem + 6*depth stage convs + classifier head
        assert main_convs(1) == 8
        assert main_convs(3) == 20

    def test_seed_reproducible(self):
        a = build_teacher(TeacherSpec(depth=1, width=8), seed=3).state_dict()
        b = build_teacher(TeacherSpec(depth=1, width=8), seed=3).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_normalization_applied(self):
        spec = TeacherSpec(depth=1, width=8, norm_mean=(0.5, 0.5, 0.5), norm_std=(2.0, 2.0, 2.0))
        m = freeze(build_teacher(spec, seed=0))
        plain = freeze(build_teacher(TeacherSpec(depth=1, width=8), seed=0))
        x = torch.randn(2, 3, 32, 32)
        assert torch.allclose(m(x), plain((x - 0.5) / 2.0), atol=1e-6)

    def test_freeze(self, tiny_teacher):
        assert not tiny_teacher.training
        assert all(not p.requires_grad for p in tiny_teacher.parameters())

    def test_bn_layers_nonempty(self, tiny_teacher):
        # stem + 2 per block + 1 per downsampling shortcut
        bns = tiny_teacher.bn_layers()
        assert len(bns) == 9
        assert all(isinstance(b, nn.BatchNorm2d) for b in bns)


class TestGratings:
    def test_shapes_and_range(self):
        ds = SyntheticGratings(n_per_class=5, seed=0)
        assert len(ds) == 50
        x, y = ds[0]
        assert x.shape == (3, 32, 32)
        assert x.min() >= -1.0 and x.max() <= 1.0
        assert 0 <= y < 10

    def test_balanced_labels(self):
        ds = SyntheticGratings(n_per_class=7, seed=1)
        counts = torch.bincount(ds.labels, minlength=10)
        assert torch.equal(counts, torch.full((10,), 7))

    def test_deterministic(self):
        a = SyntheticGratings(n_per_class=4, seed=5)
        b = SyntheticGratings(n_per_class=4, seed=5)
        assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
        c = SyntheticGratings(n_per_class=4, seed=6)
        assert not torch.equal(a.images, c.images)

    def test_finer_class_grid(self):
        ds = SyntheticGratings(n_per_class=3, seed=0, num_classes=20)
        assert len(ds) == 60
        assert torch.equal(torch.bincount(ds.labels, minlength=20),
                           torch.full((20,), 3))
        with pytest.raises(ValueError, match="num_classes"):
            SyntheticGratings(n_per_class=3, num_classes=1)

    def test_load_dataset_forwards_class_count(self):
        ds = load_dataset("gratings", n_per_class=2, num_classes=20)
        assert ds.num_classes == 20 and len(ds) == 40

    def test_classes_separable_at_pixel_level(self):
        # same-class images correlate more than cross-class after sign removal
        ds = SyntheticGratings(n_per_class=20, seed=0)
        flat = ds.images.abs().flatten(1)
        flat = flat / flat.norm(dim=1, keepdim=True)
        sim = flat @ flat.t()
        same = sim[ds.labels[:, None] == ds.labels[None, :]].mean()
        diff = sim[ds.labels[:, None] != ds.labels[None, :]].mean()
        assert same > diff

    def test_guard_reports_reads(self):
        guard.reset()
        ds = SyntheticGratings(n_per_class=2, seed=0)
        assert SyntheticGratings.SOURCE in guard.reads
        with guard.enforce():
            with pytest.raises(GuardViolation):
                _ = ds[0]
            with pytest.raises(GuardViolation):
                SyntheticGratings(n_per_class=2, seed=0)

    def test_load_dataset_splits_disjoint(self):
        tr = load_dataset("gratings", n_per_class=3, seed=0, split="train")
        te = load_dataset("gratings", n_per_class=3, seed=0, split="test")
        assert not torch.equal(tr.images, te.images)
        with pytest.raises(ValueError):
            load_dataset("gratings", split="weird")
        with pytest.raises(ValueError):
            load_dataset("nope")

    def test_dataset_tensors(self):
        ds = SyntheticGratings(n_per_class=2, seed=0)
        xs, ys = dataset_tensors(ds)
        assert xs.shape == (20, 3, 32, 32) and ys.shape == (20,)


class TestTrainedTeacher:
    def test_desk_teacher_learns(self, desk_teacher, desk_eval_data):
        from dfquant.metrics import topk_accuracy

        acc = topk_accuracy(desk_teacher, desk_eval_data, k=1)
        assert acc >= 0.8

    def test_save_load_roundtrip(self, tmp_path, tiny_teacher):
        save_teacher(tiny_teacher, 0.5, tmp_path / "t")
        loaded, manifest = load_teacher(tmp_path / "t")
        assert manifest["accuracy"] == 0.5
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(loaded(x), tiny_teacher(x))
        assert not loaded.training
        assert all(not p.requires_grad for p in loaded.parameters())

    def test_load_rejects_foreign_checkpoint(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_teacher(tmp_path)

    def test_accuracy_floor_warning(self, caplog):
        data = SyntheticGratings(n_per_class=3, seed=0)
        with caplog.at_level(logging.WARNING, logger="dfquant.teachers"):
            train_teacher(TeacherSpec(depth=1, width=4), data, epochs=0, accuracy_floor=2.0)
        assert any("below floor" in r.message for r in caplog.records)
