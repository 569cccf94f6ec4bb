import numpy as np
import pytest
import torch
from torch import nn

from dfquant.quant import (
    FakeQuantizer,
    NotCalibratedError,
    QuantConfig,
    UnsupportedLayerError,
    build_quantized,
    calibrate_range,
    quantize_dequantize,
)


def qd_oracle(x, lo, hi, bits):
    """Enumerate the full grid and pick the nearest level.

    Ties break toward the higher level, which for the in-range grid
    coordinate (always >= 0) is the away-from-zero direction.
    """
    n = 2 ** bits - 1
    levels = np.array([lo + i * (hi - lo) / n for i in range(n + 1)])
    x = min(max(x, lo), hi)
    dist = np.abs(levels - x)
    best = np.flatnonzero(dist == dist.min()).max()
    return levels[best]


def make_quantizer(bits, lo, hi):
    q = FakeQuantizer(bits)
    q.observe(torch.tensor([lo, hi]), 0.0)
    return q


class TestRangeTracking:
    def test_first_observation_sets_range(self):
        q = FakeQuantizer(4)
        calibrate_range(torch.tensor([0.0, 1.0]), q, momentum=0.0)
        assert q.min_obs.item() == 0.0
        assert q.max_obs.item() == 1.0

    def test_scale_and_zero_point(self):
        q = make_quantizer(4, 0.0, 15.0)
        assert q.scale.item() == pytest.approx(1.0)
        assert q.zero_point.item() == 0

    def test_ema_update(self):
        # hand-evaluated EMA: 0.9 * 1 + 0.1 * 2 = 1.1
        q = make_quantizer(4, 0.0, 1.0)
        q.observe(torch.tensor([0.0, 2.0]), momentum=0.9)
        assert q.max_obs.item() == pytest.approx(1.1)
        assert q.min_obs.item() == pytest.approx(0.0)

    def test_scale_invariant_after_updates(self):
        q = make_quantizer(8, -1.0, 1.0)
        rng = torch.Generator().manual_seed(0)
        for _ in range(5):
            q.observe(torch.randn(100, generator=rng), momentum=0.9)
            expected = (q.max_obs - q.min_obs) / (2 ** 8 - 1)
            assert torch.allclose(q.scale, expected)
            assert 0 <= q.zero_point.item() <= 255

    def test_rejects_non_finite(self):
        q = FakeQuantizer(4)
        with pytest.raises(ValueError, match="finite"):
            q.observe(torch.tensor([0.0, float("nan")]), 0.0)
        with pytest.raises(ValueError, match="finite"):
            q.observe(torch.tensor([float("inf")]), 0.0)

    def test_rejects_empty(self):
        q = FakeQuantizer(4)
        with pytest.raises(ValueError, match="empty"):
            q.observe(torch.empty(0), 0.0)

    def test_constant_batch_still_usable(self):
        q = FakeQuantizer(4)
        q.observe(torch.full((10,), 3.0), 0.0)
        assert q.calibrated
        out = q(torch.full((4,), 3.0))
        assert torch.isfinite(out).all()


class TestQuantizeDequantize:
    def test_uncalibrated_errors(self):
        q = FakeQuantizer(4)
        with pytest.raises(NotCalibratedError):
            quantize_dequantize(torch.tensor([0.5]), q)

    def test_grid_endpoint_exact(self):
        q = make_quantizer(4, -0.37, 1.21)
        out = q(q.min_obs.reshape(1))
        assert torch.equal(out, q.min_obs.reshape(1))

    def test_half_point_ties_away_from_zero(self):
        # 0.5 * 15 = 7.5 sits exactly between levels 7 and 8
        q = make_quantizer(4, 0.0, 1.0)
        out = q(torch.tensor([0.5]))
        assert out.item() == pytest.approx(8.0 / 15.0, abs=1e-7)
        assert out.item() == pytest.approx(qd_oracle(0.5, 0.0, 1.0, 4), abs=1e-7)

    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    def test_matches_enumeration_oracle(self, bits):
        lo, hi = -0.8, 1.3
        q = FakeQuantizer(bits)
        q.observe(torch.tensor([lo, hi], dtype=torch.float64), 0.0)
        rng = np.random.default_rng(bits)
        xs = rng.uniform(lo - 0.5, hi + 0.5, size=200)
        got = q(torch.tensor(xs, dtype=torch.float64)).numpy()
        want = np.array([qd_oracle(x, lo, hi, bits) for x in xs])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_error_bound_half_scale(self):
        q = make_quantizer(4, -1.0, 1.0)
        xs = torch.linspace(-1.0, 1.0, 1001)
        err = (xs - q(xs)).abs().max().item()
        assert err <= q.scale.item() / 2 + 1e-6

    def test_idempotent(self):
        q = make_quantizer(4, -1.0, 1.0)
        rng = torch.Generator().manual_seed(1)
        x = torch.rand(1000, generator=rng) * 3 - 1.5
        once = q(x)
        twice = q(once)
        assert torch.equal(once, twice)

    def test_monotone(self):
        q = make_quantizer(3, -0.5, 2.0)
        xs, _ = torch.sort(torch.rand(500, generator=torch.Generator().manual_seed(2)) * 4 - 1)
        out = q(xs)
        assert (out[1:] >= out[:-1]).all()

    def test_output_within_observed_range(self):
        q = make_quantizer(4, -0.3, 0.9)
        x = torch.linspace(-2, 2, 401)
        out = q(x)
        assert out.min() >= -0.3 - 1e-7
        assert out.max() <= 0.9 + 1e-7


class TestStraightThrough:
    def test_gradient_is_identity_inside_range(self):
        q = make_quantizer(4, -1.0, 1.0)
        x = torch.tensor([-0.9, -0.2, 0.0, 0.4, 0.99], requires_grad=True)
        q(x).sum().backward()
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_gradient_zero_outside_range(self):
        q = make_quantizer(4, -1.0, 1.0)
        x = torch.tensor([-2.0, -1.5, 1.2, 3.0], requires_grad=True)
        q(x).sum().backward()
        assert torch.equal(x.grad, torch.zeros_like(x))

    def test_one_layer_net_matches_identity_passthrough_oracle(self):
        # straight-through contract: the student gradient equals the
        # gradient of the same net with quantization replaced by identity,
        # provided all weights sit inside the observed range
        torch.manual_seed(0)
        lin = nn.Linear(6, 3)
        student = build_quantized(lin, QuantConfig(weight_bits=8, act_bits=8))
        student.train()
        x = torch.randn(5, 6)
        student(x).sum().backward()
        got = student.model.weight.grad.clone()

        ref = nn.Linear(6, 3)
        with torch.no_grad():
            ref.weight.copy_(lin.weight)
            ref.bias.copy_(lin.bias)
        # identity-passthrough oracle on the quantized input the student saw
        xq = student.model.act_quant(x)
        ref(xq).sum().backward()
        assert torch.allclose(got, ref.weight.grad, atol=1e-6)


class TestPerChannel:
    def test_per_channel_ranges(self):
        w = torch.stack([torch.linspace(-1, 1, 8), torch.linspace(-4, 2, 8)])
        q = FakeQuantizer(4, channel_size=2)
        q.observe(w, 0.0)
        assert torch.allclose(q.min_obs, torch.tensor([-1.0, -4.0]))
        assert torch.allclose(q.max_obs, torch.tensor([1.0, 2.0]))
        out = q(w)
        assert out.shape == w.shape
        # each row respects its own half-scale error bound
        err = (out - w).abs()
        bound = q.scale.view(-1, 1) / 2 + 1e-7
        assert (err <= bound).all()


class TestBuildQuantized:
    def _teacher(self):
        torch.manual_seed(3)
        return nn.Sequential(
            nn.Conv2d(3, 4, 3, padding=1),
            nn.BatchNorm2d(4),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(4, 2),
        )

    def test_student_initialized_from_teacher(self):
        teacher = self._teacher()
        student = build_quantized(teacher, QuantConfig())
        assert torch.equal(student.model[0].weight, teacher[0].weight)
        assert torch.equal(student.model[5].weight, teacher[5].weight)
        names = [n for n, _ in student.quantizers()]
        assert len(names) == 4  # weight + act quantizer per quantized layer

    def test_teacher_untouched(self):
        teacher = self._teacher()
        before = [p.clone() for p in teacher.parameters()]
        student = build_quantized(teacher, QuantConfig())
        student.train()
        out = student(torch.randn(2, 3, 8, 8))
        out.sum().backward()
        for p, b in zip(teacher.parameters(), before):
            assert torch.equal(p, b)

    def test_act_quantizers_start_uncalibrated(self):
        student = build_quantized(self._teacher(), QuantConfig())
        student.eval()
        with pytest.raises(NotCalibratedError):
            student(torch.randn(1, 3, 8, 8))

    def test_train_forward_calibrates_then_eval_works(self):
        student = build_quantized(self._teacher(), QuantConfig())
        student.train()
        student(torch.randn(2, 3, 8, 8))
        student.eval()
        out = student(torch.randn(2, 3, 8, 8))
        assert out.shape == (2, 2)

    def test_unsupported_layer_rejected(self):
        class Odd(nn.Module):
            def __init__(self):
                super().__init__()
                self.p = nn.Parameter(torch.zeros(3))

        with pytest.raises(UnsupportedLayerError):
            build_quantized(nn.Sequential(nn.Linear(3, 3), Odd()), QuantConfig())

    def test_non_finite_teacher_rejected(self):
        teacher = nn.Linear(2, 2)
        with torch.no_grad():
            teacher.weight[0, 0] = float("nan")
        with pytest.raises(ValueError, match="finite"):
            build_quantized(teacher, QuantConfig())

    def test_keep_first_last_fp(self):
        teacher = self._teacher()
        cfg = QuantConfig(keep_first_last_fp=True)
        student = build_quantized(teacher, cfg)
        assert isinstance(student.model[0], nn.Conv2d)
        assert isinstance(student.model[5], nn.Linear)


class TestQuantConfig:
    @pytest.mark.parametrize("kwargs", [
        {"weight_bits": 1}, {"weight_bits": 17}, {"act_bits": 0},
        {"range_momentum": 1.0}, {"range_momentum": -0.1},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            QuantConfig(**kwargs)
