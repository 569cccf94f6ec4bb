"""Flat dotted-key run configuration.

The on-disk format is `key = value` lines (`#` comments), one key per
leaf of the TrainConfig dataclass tree, e.g. `perturb.weight.kind =
gaussian`. Every key can be overridden on the command line; unknown keys
are rejected by name. parse(render(cfg)) reproduces cfg exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .perturb import InputPerturbation, WeightPerturbation
from .quant import QuantConfig
from .robustness import PerturbSuite


class ConfigError(ValueError):
    """Bad key, bad value, or violated config invariant."""


@dataclass
class RunSection:
    seed: int = 0
    epochs: int = 10
    warmup_epochs: int = 4
    batches_per_epoch: int = 60
    batch_size: int = 32
    data_free_guard: bool = True


@dataclass
class GenSection:
    z_dim: int = 100
    base_width: int = 32
    lr: float = 1e-3


@dataclass
class StudentSection:
    lr: float = 1e-4
    momentum: float = 0.9
    temperature: float = 4.0


@dataclass
class QuantSection:
    weight_bits: int = 4
    act_bits: int = 4
    range_momentum: float = 0.9
    per_channel: bool = False
    keep_first_last_fp: bool = False


@dataclass
class LossSection:
    alpha: float = 0.1
    lambda_r: float = 1.0
    beta: float = 1.0


@dataclass
class LabelSection:
    mode: str = "soft"          # soft | identity
    n: int = 20
    steps: int = 2000
    step_size: float = 0.01


@dataclass
class RobustSection:
    epsilon: float = 0.1
    n_noise: int = 1000


@dataclass
class PerturbInputSection:
    kind: str = "random_select"
    sigma: float = 0.05
    max_shift: int = 2
    scale_lo: float = 0.9
    scale_hi: float = 1.1


@dataclass
class PerturbWeightSection:
    kind: str = "gaussian"
    sigma_rel: float = 0.01
    gamma: float = 0.01
    p: float = 0.1


@dataclass
class PerturbSection:
    strategy: str = "random_pick"
    n_input: int = 3
    m_weight: int = 1
    input: PerturbInputSection = field(default_factory=PerturbInputSection)
    weight: PerturbWeightSection = field(default_factory=PerturbWeightSection)


@dataclass
class TrainConfig:
    run: RunSection = field(default_factory=RunSection)
    gen: GenSection = field(default_factory=GenSection)
    student: StudentSection = field(default_factory=StudentSection)
    quant: QuantSection = field(default_factory=QuantSection)
    loss: LossSection = field(default_factory=LossSection)
    labels: LabelSection = field(default_factory=LabelSection)
    robust: RobustSection = field(default_factory=RobustSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)


def _leaves(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            yield from _leaves(v, key + ".")
        else:
            yield key, f, obj


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    return {key: _render_value(getattr(owner, f.name)) for key, f, owner in _leaves(cfg)}


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, ftype: type, key: str):
    try:
        if ftype is bool:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r} (expected {ftype.__name__})")


def from_flat(items: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig()
    index = {key: (f, owner) for key, f, owner in _leaves(cfg)}
    for key, raw in items.items():
        if key not in index:
            raise ConfigError(f"unknown config key {key!r}")
        f, owner = index[key]
        # defaults populate every leaf, so the runtime type is the field type
        ftype = type(getattr(owner, f.name))
        setattr(owner, f.name, _parse_value(str(raw).strip(), ftype, key))
    validate(cfg)
    return cfg


def validate(cfg: TrainConfig) -> None:
    checks = [
        (cfg.run.epochs >= 1, "run.epochs must be >= 1"),
        (0 <= cfg.run.warmup_epochs < cfg.run.epochs,
         "run.warmup_epochs must satisfy 0 <= warmup < run.epochs"),
        (cfg.run.batches_per_epoch >= 1, "run.batches_per_epoch must be >= 1"),
        (cfg.run.batch_size >= 1, "run.batch_size must be >= 1"),
        (cfg.gen.lr > 0, "gen.lr must be > 0"),
        (cfg.student.lr > 0, "student.lr must be > 0"),
        (cfg.student.temperature > 0, "student.temperature must be > 0"),
        (cfg.labels.mode in ("soft", "identity"), "labels.mode must be soft or identity"),
        (cfg.labels.n >= 2 or cfg.labels.mode == "identity", "labels.n must be >= 2"),
        (0 < cfg.robust.epsilon < 1, "robust.epsilon must be in (0, 1)"),
        (cfg.robust.n_noise >= 10, "robust.n_noise must be >= 10"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    # constructor validation of the nested specs, surfaced as config errors
    try:
        quant_config(cfg)
        suite(cfg)
        loss_weights(cfg)
    except ValueError as e:
        raise ConfigError(str(e))


def render(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(to_flat(cfg).items()))


def parse_file(path: str | Path) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        items[key.strip()] = raw.strip()
    return items


def parse_config(path: str | Path | None = None,
                 overrides: dict[str, str] | None = None) -> TrainConfig:
    items = parse_file(path) if path is not None else {}
    items.update(overrides or {})
    return from_flat(items)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(render(cfg).encode()).hexdigest()[:16]


def quant_config(cfg: TrainConfig) -> QuantConfig:
    q = cfg.quant
    return QuantConfig(weight_bits=q.weight_bits, act_bits=q.act_bits,
                       range_momentum=q.range_momentum, per_channel=q.per_channel,
                       keep_first_last_fp=q.keep_first_last_fp)


def suite(cfg: TrainConfig) -> PerturbSuite:
    p = cfg.perturb
    return PerturbSuite(
        input_spec=InputPerturbation(kind=p.input.kind, sigma=p.input.sigma,
                                     max_shift=p.input.max_shift,
                                     scale_lo=p.input.scale_lo, scale_hi=p.input.scale_hi),
        weight_spec=WeightPerturbation(kind=p.weight.kind, sigma_rel=p.weight.sigma_rel,
                                       gamma=p.weight.gamma, p=p.weight.p),
        n_input=p.n_input,
        m_weight=p.m_weight,
        strategy=p.strategy,
    )


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(alpha=cfg.loss.alpha, lambda_r=cfg.loss.lambda_r, beta=cfg.loss.beta)
