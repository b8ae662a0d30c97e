"""Mutual information gap: how exclusively single latent dimensions track the
generative factors."""

from __future__ import annotations

import numpy as np


def _equal_frequency_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def _discrete_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two integer label arrays."""
    n = len(a)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((len(ua), len(ub)))
    np.add.at(joint, (ia, ib), 1.0)
    p = joint / n
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (pa @ pb)[mask])))


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mig_from_latents(latents: np.ndarray, factors: dict, n_bins: int = 20) -> float:
    """MIG over precomputed latent means.

    latents: (N, n_latent) array; factors: name -> (N,) array of factor values
    (treated as discrete labels). Latent dims are discretized into n_bins
    equal-frequency bins.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ValueError("latents must be (N, n_latent)")
    n, d = latents.shape
    if not factors:
        raise ValueError("at least one factor is required")
    z_bins = [_equal_frequency_bins(latents[:, j], n_bins) for j in range(d)]

    gaps = []
    for name, values in factors.items():
        values = np.asarray(values)
        if len(values) != n:
            raise ValueError(f"factor {name!r} has {len(values)} values for {n} samples")
        _, labels = np.unique(values, return_inverse=True)
        h = _entropy(labels)
        if h == 0.0:
            raise ValueError(f"factor {name!r} is degenerate (single value)")
        mis = sorted((_discrete_mi(zb, labels) for zb in z_bins), reverse=True)
        top2 = mis[1] if d > 1 else 0.0
        gaps.append((mis[0] - top2) / h)
    return float(np.mean(gaps))


def mig_score(model, probe_images, probe_factors: dict, n_bins: int = 20) -> float:
    """MIG of a detector model over a labeled probe set of images."""
    xs = np.stack([np.asarray(im, dtype=np.float32) for im in probe_images])
    mu, _ = model.encode_batch(xs)
    return mig_from_latents(mu, probe_factors, n_bins)
