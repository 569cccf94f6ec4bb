import pytest

from dfquant.guard import DataFreeGuard, GuardViolation


def test_inactive_by_default():
    g = DataFreeGuard()
    g.note_read("somewhere")
    assert g.reads == ["somewhere"]
    assert g.violations == []


def test_enforce_raises():
    g = DataFreeGuard()
    with g.enforce():
        with pytest.raises(GuardViolation):
            g.note_read("train-data")
    assert g.violations == ["train-data"]


def test_exempt_inside_enforce():
    g = DataFreeGuard()
    with g.enforce():
        with g.exempt():
            g.note_read("eval-data")
    assert g.violations == []
    assert "eval-data" in g.reads


def test_nested_enforce_and_reset():
    g = DataFreeGuard()
    with g.enforce(), g.enforce():
        assert g.active
        with g.exempt():
            assert not g.active
    assert not g.active
    g.note_read("x")
    g.reset()
    assert g.reads == [] and g.violations == []
