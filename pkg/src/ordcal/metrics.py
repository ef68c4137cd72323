"""Discrimination and prediction-error summaries for ordinal risks."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata

from .models import ProbMatrix


def expected_outcome_score(probs: ProbMatrix) -> np.ndarray:
    """Per-case expected outcome value: score_i = sum_k k * p_hat_{i,k}."""
    K = probs.K
    return probs.values @ np.arange(1, K + 1, dtype=float)


def _binary_c(scores, events):
    """C statistic of scores against a 0/1 event vector, ties credited 0.5.

    Mid-rank computation: C = (R1 - n1(n1+1)/2) / (n1 * n0) where R1 is
    the rank sum of event scores within the pooled sample.
    """
    n1 = int(events.sum())
    n0 = len(events) - n1
    r = rankdata(scores)
    return (r[events].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def orc(probs: ProbMatrix, y) -> float:
    """Ordinal C statistic: unweighted mean of pairwise binary C values.

    Uses the expected-outcome score; each of the K(K-1)/2 category pairs
    contributes a binary C with the higher category as the event.  Pairs
    involving an absent category are excluded with a warning.
    """
    y = np.asarray(y, dtype=int)
    scores = expected_outcome_score(probs)
    K = probs.K
    present = [k for k in range(1, K + 1) if np.any(y == k)]
    if len(present) < 2:
        raise ValueError("need at least two outcome categories present")
    cs = []
    skipped = 0
    for a in range(1, K + 1):
        for b in range(a + 1, K + 1):
            if a not in present or b not in present:
                skipped += 1
                continue
            mask = (y == a) | (y == b)
            cs.append(_binary_c(scores[mask], y[mask] == b))
    if skipped:
        warnings.warn(
            f"{skipped} category pair(s) excluded: category absent"
        )
    return float(np.mean(cs))


def rmspe(estimated: ProbMatrix, truth: ProbMatrix) -> float:
    """Root mean squared gap between estimated and true risks.

    The mean runs over all n*K cells.  (The index is conventionally named
    with a root even though some write-ups print the un-rooted mean; the
    rooted form is used throughout here.)
    """
    A, B = estimated.values, truth.values
    if A.shape != B.shape:
        raise ValueError(
            f"dimension mismatch: {A.shape} vs {B.shape}"
        )
    return float(np.sqrt(np.mean((A - B) ** 2)))
