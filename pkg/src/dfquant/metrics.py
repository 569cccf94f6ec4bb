"""Evaluation metrics: accuracy, inception score, FID, diversity.

Feature/probability extraction is pluggable so the desk-scale teacher can
stand in for the usual large inception network. Evaluation is always
allowed to touch real data, so dataset iteration here runs under a guard
exemption.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
import scipy.linalg
import torch
from torch import nn
from torch.utils.data import Dataset

from .guard import guard

log = logging.getLogger(__name__)


@torch.no_grad()
def topk_accuracy(model: nn.Module, dataset: Dataset, k: int = 1,
                  batch_size: int = 256) -> float:
    """Fraction of samples whose label lands in the model's top-k logits."""
    was_training = model.training
    model.eval()
    hits = 0
    total = 0
    with guard.exempt():
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            xs = torch.stack([it[0] for it in items])
            ys = torch.tensor([int(it[1]) for it in items])
            logits = model(xs)
            topk = logits.topk(k, dim=1).indices
            hits += (topk == ys[:, None]).any(dim=1).sum().item()
            total += len(ys)
    if was_training:
        model.train()
    return hits / max(total, 1)


@torch.no_grad()
def class_probabilities(model: nn.Module, images: torch.Tensor,
                        batch_size: int = 256) -> torch.Tensor:
    model.eval()
    outs = []
    for start in range(0, len(images), batch_size):
        outs.append(torch.softmax(model(images[start:start + batch_size]), dim=1))
    return torch.cat(outs)


def inception_score(probs: torch.Tensor, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) averaged over equal splits.

    Returns (mean, std) over splits. A score pinned at 1.0 means the
    extractor saw every image the same way; that is flagged because it
    says nothing about the generator.
    """
    if probs.ndim != 2 or len(probs) < splits:
        raise ValueError("need a (N, C) probability matrix with N >= splits")
    p = probs.double().clamp_min(1e-12)
    scores = []
    n = len(p)
    for i in range(splits):
        part = p[i * n // splits:(i + 1) * n // splits]
        marginal = part.mean(dim=0, keepdim=True)
        kl = (part * (part.log() - marginal.log())).sum(dim=1).mean()
        scores.append(kl.exp().item())
    mean = float(np.mean(scores))
    if abs(mean - 1.0) < 1e-6:
        log.warning("inception score is degenerate (1.0): extractor ignores the images")
    return mean, float(np.std(scores))


def _mean_cov(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}) on feature sets."""
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError("need two (N, D) feature matrices with matching D")
    mu_a, cov_a = _mean_cov(feats_a.astype(np.float64))
    mu_b, cov_b = _mean_cov(feats_b.astype(np.float64))
    diff = mu_a - mu_b
    with warnings.catch_warnings():
        # sqrtm's error estimate divides by ||A||, which is 0 for degenerate
        # covariances; the non-finite retry below is the real handling
        warnings.simplefilter("ignore", RuntimeWarning)
        covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
        if not np.isfinite(covmean).all():
            # near-singular product: retry on jittered covariances
            eye = np.eye(cov_a.shape[0]) * 1e-6
            covmean, _ = scipy.linalg.sqrtm((cov_a + eye) @ (cov_b + eye), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    fid = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean)
    return float(max(fid, 0.0))


@torch.no_grad()
def extract_features(model: nn.Module, images: torch.Tensor,
                     batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features from any model exposing forward_features."""
    model.eval()
    outs = []
    for start in range(0, len(images), batch_size):
        feat, _ = model.forward_features(images[start:start + batch_size])
        outs.append(feat.cpu().double().numpy())
    return np.concatenate(outs)


def fid_against_dataset(model: nn.Module, images: torch.Tensor,
                        dataset: Dataset, max_real: int = 2000) -> float:
    with guard.exempt():
        real = torch.stack([dataset[i][0] for i in range(min(len(dataset), max_real))])
    return frechet_distance(extract_features(model, images), extract_features(model, real))


def diversity_report(probs: torch.Tensor) -> dict:
    """Label coverage of a synthesized batch as seen by the scoring model."""
    if probs.ndim != 2:
        raise ValueError("need a (N, C) probability matrix")
    conf, pred = probs.max(dim=1)
    counts = torch.bincount(pred, minlength=probs.shape[1])
    return {
        "num_images": int(probs.shape[0]),
        "num_classes": int(probs.shape[1]),
        "distinct_classes": int((counts > 0).sum()),
        "class_counts": counts.tolist(),
        "mean_confidence": float(conf.mean()),
        "min_class_share": float(counts.min().item() / max(len(pred), 1)),
    }
