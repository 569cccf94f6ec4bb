"""Data-free guard.

Instrumentation proving that a training run never touches a real-data
source. Dataset loaders report every materialization/read through
:func:`note_read`; while the guard is enforced, any non-exempt read is
recorded and raised. Evaluation code opts out explicitly via
:meth:`DataFreeGuard.exempt`.
"""

from __future__ import annotations

import contextlib


class GuardViolation(RuntimeError):
    """A real-data read happened inside a data-free training run."""


class DataFreeGuard:
    def __init__(self) -> None:
        self._enforce_depth = 0
        self._exempt_depth = 0
        self.violations: list[str] = []
        self.reads: list[str] = []

    @property
    def active(self) -> bool:
        return self._enforce_depth > 0 and self._exempt_depth == 0

    @contextlib.contextmanager
    def enforce(self):
        """Treat any non-exempt data read inside this block as a violation."""
        self._enforce_depth += 1
        try:
            yield self
        finally:
            self._enforce_depth -= 1

    @contextlib.contextmanager
    def exempt(self):
        """Allow data reads inside this block (evaluation paths)."""
        self._exempt_depth += 1
        try:
            yield self
        finally:
            self._exempt_depth -= 1

    def note_read(self, source: str) -> None:
        """Called by dataset loaders whenever real data is materialized."""
        self.reads.append(source)
        if self.active:
            self.violations.append(source)
            raise GuardViolation(
                f"real-data source {source!r} was read during a data-free run"
            )

    def reset(self) -> None:
        self.violations.clear()
        self.reads.clear()


# process-wide instance shared by loaders, trainer, and tests
guard = DataFreeGuard()
