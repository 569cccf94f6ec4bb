"""Soft-label prototypes spread over the probability simplex.

N label rows are placed to minimize the sum of inverse pairwise
Euclidean distances (so rows repel each other), by projected gradient
descent with monotone acceptance. The optimized matrix is computed once
before training and sampled from thereafter.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pairwise_distances(t: np.ndarray) -> np.ndarray:
    diff = t[:, None, :] - t[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2)), diff


def spread_objective(t: np.ndarray) -> float:
    """Sum over ordered pairs i != j of 1 / ||T_i - T_j||."""
    t = np.asarray(t, dtype=float)
    n = len(t)
    if n < 2:
        return 0.0
    d, _ = _pairwise_distances(t)
    off = ~np.eye(n, dtype=bool)
    if (d[off] == 0).any():
        raise ValueError("coincident label rows: objective is infinite")
    return float((1.0 / d[off]).sum())


def _objective_or_inf(t: np.ndarray) -> float:
    try:
        return spread_objective(t)
    except ValueError:
        return np.inf


def spread_gradient(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    d, diff = _pairwise_distances(t)
    np.fill_diagonal(d, np.inf)
    return -2.0 * (diff / d[:, :, None] ** 3).sum(axis=1)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sorted threshold)."""
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("cannot project non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ranks = np.arange(1, len(v) + 1)
    rho = np.nonzero(u + (1.0 - css) / ranks > 0)[0][-1]
    lam = (1.0 - css[rho]) / (rho + 1)
    return np.maximum(v + lam, 0.0)


def project_rows(t: np.ndarray) -> np.ndarray:
    return np.stack([project_simplex(row) for row in t])


def init_labels(n: int, c: int, rng: np.random.Generator, jitter: float = 0.01) -> np.ndarray:
    """Cycled one-hot rows blended toward the simplex center, plus jitter.

    Rows sharing a class vertex get increasing deterministic pull toward
    the center, so the init stays distinct even for n many times c. All
    rows are convex combinations of simplex points; projecting jittered
    vertices instead would collapse a constant fraction back onto the
    vertex regardless of jitter size, colliding duplicate classes.
    """
    base = np.eye(c)[np.arange(n) % c]
    copies = -(-n // c)
    pull = 0.5 * (np.arange(n) // c / max(1, copies))[:, None]
    base = (1.0 - pull) * base + pull / c
    for _ in range(100):
        mix = np.exp(rng.standard_normal((n, c)))
        mix /= mix.sum(axis=1, keepdims=True)
        t = (1.0 - jitter) * base + jitter * mix
        d, _ = _pairwise_distances(t)
        np.fill_diagonal(d, np.inf)
        if d.min() > 0:
            return t
    raise RuntimeError("could not draw a distinct jittered initialization")


def optimize_labels(n: int, c: int, steps: int = 2000, step_size: float = 0.01,
                    rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Projected gradient descent on spread_objective with monotone acceptance.

    A rejected or non-finite step halves the rate; accepted steps regrow
    it by 1.2x up to the configured step size. Ten consecutive non-finite
    steps abort.
    """
    if n < 2 or c < 2:
        raise ValueError("need n >= 2 and c >= 2")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    t = init_labels(n, c, rng)
    obj = _objective_or_inf(t)
    lr = step_size
    bad = 0
    for _ in range(steps):
        raw = t - lr * spread_gradient(t)
        if not np.isfinite(raw).all():
            # true numerical blow-up, distinct from a merely rejected step
            lr *= 0.5
            bad += 1
            if bad >= 10:
                raise RuntimeError("label optimization diverged (10 non-finite steps)")
            continue
        bad = 0
        cand = project_rows(raw)
        cobj = _objective_or_inf(cand)
        if cobj <= obj:
            t, obj = cand, cobj
            lr = min(lr * 1.2, step_size)
        else:
            lr *= 0.5
    return t


def identity_label_matrix(c: int) -> np.ndarray:
    """Hard one-hot rows; the label matrix of the plain baseline."""
    return np.eye(c)


def sample_rows(t: np.ndarray, batch: int, rng: np.random.Generator):
    """Uniform-with-replacement rows; indices double as condition ids."""
    idx = rng.integers(0, len(t), size=batch)
    return t[idx].copy(), idx


def save_labels(t: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, np.asarray(t, dtype=float), delimiter=",", fmt="%.17g")


def load_labels(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
