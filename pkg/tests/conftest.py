import hashlib
import json
from pathlib import Path

import pytest
import torch

from dfquant.guard import guard
from dfquant.teachers import (
    SyntheticGratings,
    TeacherSpec,
    build_teacher,
    freeze,
    load_teacher,
    save_teacher,
    train_teacher,
)

CACHE = Path(__file__).resolve().parent.parent / ".cache"

DESK_SPEC = TeacherSpec(depth=1, width=16, num_classes=10)
DESK_TRAIN = {"n_per_class": 200, "epochs": 8, "seed": 0, "batch_size": 128, "lr": 0.05}


@pytest.fixture(autouse=True)
def _clean_guard():
    guard.reset()
    yield
    guard.reset()


@pytest.fixture()
def tiny_teacher():
    # untrained but frozen; enough for mechanical tests
    return freeze(build_teacher(TeacherSpec(depth=1, width=8), seed=7))


def provision_teacher(spec: TeacherSpec, train_params: dict):
    """Train-once-then-cache a teacher; shared by tests and acceptance."""
    key = json.dumps({"spec": spec.__dict__, "train": train_params},
                     sort_keys=True, default=str)
    path = CACHE / f"teacher-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
    if (path / "manifest.json").exists():
        return load_teacher(path)
    data = SyntheticGratings(n_per_class=train_params["n_per_class"],
                             seed=train_params["seed"],
                             num_classes=spec.num_classes)
    model, acc = train_teacher(
        spec,
        data,
        epochs=train_params["epochs"],
        seed=train_params["seed"],
        batch_size=train_params["batch_size"],
        lr=train_params["lr"],
        eval_dataset=SyntheticGratings(n_per_class=50, seed=1,
                                       num_classes=spec.num_classes),
    )
    save_teacher(model, acc, path)
    return load_teacher(path)


def provision_desk_teacher():
    return provision_teacher(DESK_SPEC, DESK_TRAIN)


@pytest.fixture(scope="session")
def desk_teacher():
    model, manifest = provision_desk_teacher()
    return model


# deeper net for the end-to-end comparison: plain synthesis converges too
# easily against the depth-1 teacher to leave any visible headroom
E2E_SPEC = TeacherSpec(depth=2, width=32, num_classes=10)


@pytest.fixture(scope="session")
def e2e_teacher():
    model, manifest = provision_teacher(E2E_SPEC, DESK_TRAIN)
    return model


@pytest.fixture(scope="session")
def desk_eval_data():
    return SyntheticGratings(n_per_class=50, seed=1)


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(1234)
