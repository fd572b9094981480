"""Posterior membership, clustering accuracy, and latent-kappa agreement."""

from __future__ import annotations

import itertools
import math

import numpy as np


def posterior(dataset, theta, spec) -> np.ndarray:
    """Posterior class probabilities for every individual, shape (N, K).

    Row i is proportional to the gating probability times the class
    density of individual i's observed vector, normalized on the log
    scale.
    """
    from .estimation import LoglikEngine

    engine = LoglikEngine(dataset, spec)
    return engine.posterior_matrix(engine.layout.pack(theta))


def accuracy(predicted, truth) -> float:
    """Proportion correctly classified, maximized over label permutations.

    Mixture labels are arbitrary, so the raw agreement is computed for
    every relabeling of the predictions and the best one is reported.
    """
    predicted = np.asarray(predicted, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth must have the same length")
    labels = np.unique(np.concatenate([predicted, truth]))
    if labels.size > 8:
        raise ValueError("too many classes for exhaustive label alignment")
    best = 0.0
    for perm in itertools.permutations(labels):
        mapping = dict(zip(labels, perm))
        remapped = np.array([mapping[v] for v in predicted])
        best = max(best, float(np.mean(remapped == truth)))
    return best


def _joint_table(post_a: np.ndarray, post_b: np.ndarray) -> np.ndarray:
    return post_a.T @ post_b / post_a.shape[0]


def _align_columns(post_a: np.ndarray, post_b: np.ndarray) -> np.ndarray:
    """Permute b's columns to maximize the trace of the joint table."""
    K = post_a.shape[1]
    if K > 6:
        raise ValueError("column alignment is exhaustive and limited to K <= 6")
    T = _joint_table(post_a, post_b)
    best_perm, best_trace = tuple(range(K)), -np.inf
    for perm in itertools.permutations(range(K)):
        tr = sum(T[k, perm[k]] for k in range(K))
        if tr > best_trace:
            best_perm, best_trace = perm, tr
    return post_b[:, list(best_perm)]


def _kappa_value(post_a: np.ndarray, post_b: np.ndarray) -> float:
    T = _joint_table(post_a, _align_columns(post_a, post_b))
    po = float(np.trace(T))
    pe = float(T.sum(axis=1) @ T.sum(axis=0))
    if pe >= 1.0:
        return 1.0 if po >= 1.0 - 1e-12 else 0.0
    return (po - pe) / (1.0 - pe)


def _pad_columns(post: np.ndarray, k: int) -> np.ndarray:
    if post.shape[1] == k:
        return post
    out = np.zeros((post.shape[0], k))
    out[:, :post.shape[1]] = post
    return out


def latent_kappa(posterior_a, posterior_b, n_bootstrap: int = 1000, seed: int = 0):
    """Chance-corrected agreement between two probabilistic class solutions.

    The expected joint classification table is built from the soft
    posteriors (so it reduces to Cohen's kappa for one-hot rows) after
    permutation-aligning the second solution's columns; the 95% CI is a
    nonparametric percentile bootstrap over individuals, with the column
    alignment re-derived in each resample.
    """
    a = np.asarray(posterior_a, dtype=float)
    b = np.asarray(posterior_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("posteriors must be 2-D (individuals x classes)")
    if a.shape[0] != b.shape[0]:
        raise ValueError("posterior matrices must cover the same individuals")
    k = max(a.shape[1], b.shape[1])
    a = _pad_columns(a, k)
    b = _pad_columns(b, k)
    kappa = _kappa_value(a, b)
    if n_bootstrap <= 0:
        return kappa, (math.nan, math.nan)
    rng = np.random.default_rng(seed)
    n = a.shape[0]
    draws = np.empty(n_bootstrap)
    for s in range(n_bootstrap):
        idx = rng.integers(0, n, size=n)
        draws[s] = _kappa_value(a[idx], b[idx])
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return kappa, (float(lo), float(hi))
