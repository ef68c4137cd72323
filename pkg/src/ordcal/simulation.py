"""Scenario registry and data generation for the simulation studies.

Two generative truth forms are supported:

* MLR form: the outcome category is drawn from class priors, then each
  predictor is drawn independently given the category (Normal(mu, 1) for
  continuous predictors, Bernoulli(prevalence) for binary ones).  The
  Bayes posterior of the category given the predictors has an exact
  multinomial-logistic functional form, which supplies analytic true
  risks.
* CL-PO form: predictors are drawn from their marginal law, category
  probabilities follow a proportional-odds cumulative-logit model
  logit P(Y >= k) = alpha_k + beta . x, and the outcome is drawn from
  those probabilities.  The marginal law is either iid standard Normal /
  Bernoulli(0.5) (the default) or a finite mixture: a latent component is
  drawn from ``priors`` and each predictor from Normal(mean, 1) /
  Bernoulli(prevalence) given the component, mirroring the class-
  conditional structure of a matched MLR-form scenario.  The built-in
  CL-PO scenarios use such mixtures; the latent component only shapes the
  predictor distribution and does not enter the outcome model.

Randomness uses the counter-based Philox generator with normal deviates
obtained by inverse-CDF, so replicate streams derived as
``base_seed XOR replicate_index`` are independent and reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from .data import Dataset, write_dataset
from .models import ProbMatrix

GENERATOR_ID = "philox-inverse-cdf-v1"


@dataclass(frozen=True)
class Scenario:
    """Generative truth for one simulation scenario."""

    id: str
    truth_form: str  # "mlr" | "clpo"
    Q: int
    K: int
    kinds: tuple[str, ...]  # "continuous" | "binary" per predictor
    # MLR form: class priors (length K) and class-conditional means /
    # prevalences (Q x K).  CLPO form: optional predictor-marginal mixture
    # with component weights in priors and component parameters in means
    # (Q x n_components); omitted means iid standard Normal / Bernoulli(.5).
    priors: tuple[float, ...] | None = None
    means: tuple[tuple[float, ...], ...] | None = None
    alpha: tuple[float, ...] | None = None  # CLPO form, length K-1
    beta: tuple[float, ...] | None = None  # CLPO form, length Q
    nominal_orc: float | None = None

    def __post_init__(self):
        if self.truth_form not in ("mlr", "clpo"):
            raise ValueError(f"unknown truth form {self.truth_form!r}")
        if len(self.kinds) != self.Q:
            raise ValueError("one predictor kind per predictor required")
        if self.truth_form == "mlr":
            if self.priors is None or self.means is None:
                raise ValueError("MLR-form scenario needs priors and means")
            if abs(sum(self.priors) - 1.0) > 1e-9:
                raise ValueError("priors must sum to 1")
            if len(self.priors) != self.K:
                raise ValueError("priors must have length K")
            if len(self.means) != self.Q or any(
                len(m) != self.K for m in self.means
            ):
                raise ValueError("means must be Q rows of length K")
        else:
            if self.alpha is None or self.beta is None:
                raise ValueError("CL-PO-form scenario needs alpha and beta")
            if len(self.alpha) != self.K - 1 or len(self.beta) != self.Q:
                raise ValueError("alpha length K-1 and beta length Q required")
            if (self.means is None) != (self.priors is None):
                raise ValueError(
                    "a CL-PO-form predictor mixture needs both component "
                    "weights (priors) and component parameters (means)"
                )
            if self.means is not None:
                if abs(sum(self.priors) - 1.0) > 1e-9:
                    raise ValueError("mixture weights must sum to 1")
                G = len(self.priors)
                if len(self.means) != self.Q or any(
                    len(m) != G for m in self.means
                ):
                    raise ValueError(
                        "mixture parameters must be Q rows, one entry per "
                        "component"
                    )


@dataclass(frozen=True)
class SimulatedData:
    dataset: Dataset
    true_risks: ProbMatrix
    scenario_id: str
    seed: int


def _mlr(i, K, Q, priors, means, kinds="continuous", orc=0.74):
    kinds = (kinds,) * Q if isinstance(kinds, str) else tuple(kinds)
    return Scenario(
        id=f"mlr-{i}", truth_form="mlr", Q=Q, K=K, kinds=kinds,
        priors=tuple(priors), means=tuple(tuple(m) for m in means),
        nominal_orc=orc,
    )


def _clpo(i, K, Q, alpha, beta, kinds="continuous", orc=0.74, mix=None):
    kinds = (kinds,) * Q if isinstance(kinds, str) else tuple(kinds)
    priors = means = None
    if mix is not None:
        means = tuple(tuple(m) for m in mix)
        G = len(means[0])
        priors = (1.0 / G,) * G
    return Scenario(
        id=f"clpo-{i}", truth_form="clpo", Q=Q, K=K, kinds=kinds,
        alpha=tuple(alpha), beta=tuple(beta), nominal_orc=orc,
        priors=priors, means=means,
    )


def builtin_scenarios() -> dict[str, Scenario]:
    """The 20 built-in scenarios (11 MLR-form + 9 CL-PO-form).

    CL-PO-form parameters are stated in the generating convention
    logit P(Y >= k) = alpha_k + beta . x.
    """
    third = 1.0 / 3.0
    eq = [(0.0, 0.4, 0.8), (0.0, 0.3, 0.6), (0.0, 0.4, 0.8), (0.0, 0.3, 0.6)]
    noneq = [(0.0, 0.7, 0.8), (0.0, 0.6, 0.6), (0.0, 0.5, 0.8),
             (0.0, 0.1, 0.6)]
    s = [
        _mlr(1, 3, 4, (third, third, third), eq),
        _mlr(2, 3, 4, (0.55, 0.30, 0.15), eq),
        _mlr(3, 3, 4, (third, third, third), noneq),
        _mlr(4, 3, 4, (0.55, 0.30, 0.15), noneq),
        _mlr(5, 3, 4, (0.55, 0.30, 0.15),
             [(0.0, 0.7, 0.8), (0.0, 0.7, 0.6), (0.0, 0.0, 1.0),
              (0.3, 0.0, 0.3)]),
        _mlr(6, 4, 3, (0.40, 0.25, 0.20, 0.15),
             [(0.0, 0.0, 1.0, 1.0), (0.0, 0.8, 0.8, 0.9),
              (0.2, 0.0, 0.9, 1.0)]),
        _mlr(7, 4, 3, (0.40, 0.25, 0.20, 0.15),
             [(0.0, 0.0, 0.6, 0.6), (0.0, 0.4, 0.4, 0.5),
              (0.1, 0.0, 0.6, 0.7)], orc=0.66),
        _mlr(8, 4, 3, (0.45, 0.30, 0.20, 0.05),
             [(0.0, 0.0, 0.6, 0.6), (0.0, 0.4, 0.4, 0.5),
              (0.1, 0.0, 0.6, 0.7)], orc=0.66),
        _mlr(9, 3, 4, (0.55, 0.30, 0.15),
             [(0.20, 0.55, 0.58), (0.20, 0.50, 0.50), (0.20, 0.45, 0.58),
              (0.20, 0.25, 0.50)], kinds="binary"),
        _mlr(10, 4, 3, (0.40, 0.25, 0.20, 0.15),
             [(0.20, 0.20, 0.65, 0.65), (0.20, 0.40, 0.40, 0.60),
              (0.25, 0.20, 0.60, 0.70)], kinds="binary"),
        _mlr(11, 3, 8, (0.55, 0.30, 0.15),
             noneq + [(0.0, 0.0, 0.0)] * 4),
        _clpo(1, 3, 4, (0.18, -1.55), (0.55, 0.41, 0.55, 0.41), mix=eq),
        _clpo(2, 3, 4, (-0.92, -2.80), (0.53, 0.39, 0.53, 0.39), mix=eq),
        _clpo(3, 3, 4, (-1.73, -4.15), (0.53, 0.39, 0.53, 0.39), mix=eq),
        _clpo(4, 4, 3, (0.12, -1.22, -2.62), (0.54, 0.47, 0.51),
              mix=[(0.0, 0.0, 1.0, 1.0), (0.0, 0.8, 0.8, 0.9),
                   (0.2, 0.0, 0.9, 1.0)]),
        _clpo(5, 4, 3, (0.05, -1.10, -2.35), (0.54, 0.47, 0.51),
              orc=0.66,
              mix=[(0.0, 0.0, 0.6, 0.6), (0.0, 0.4, 0.4, 0.5),
                   (0.1, 0.0, 0.6, 0.7)]),
        _clpo(6, 4, 3, (-0.18, -1.63, -3.58), (0.54, 0.47, 0.50),
              orc=0.66,
              mix=[(0.0, 0.0, 0.6, 0.6), (0.0, 0.4, 0.4, 0.5),
                   (0.1, 0.0, 0.6, 0.7)]),
        _clpo(7, 3, 4, (-2.03, -3.94), (1.39, 1.09, 1.22, 0.82),
              kinds="binary",
              mix=[(0.20, 0.55, 0.58), (0.20, 0.50, 0.50),
                   (0.20, 0.45, 0.58), (0.20, 0.25, 0.50)]),
        _clpo(8, 4, 3, (-1.52, -2.88, -4.30), (1.75, 1.20, 1.46),
              kinds="binary",
              mix=[(0.20, 0.20, 0.65, 0.65), (0.20, 0.40, 0.40, 0.60),
                   (0.25, 0.20, 0.60, 0.70)]),
        _clpo(9, 3, 8, (0.18, -1.55),
              (0.55, 0.41, 0.55, 0.41, 0.0, 0.0, 0.0, 0.0),
              mix=eq + [(0.0, 0.0, 0.0)] * 4),
    ]
    return {sc.id: sc for sc in s}


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def replicate_seed(base_seed: int, replicate: int) -> int:
    """Independent per-replicate seed stream: base XOR replicate index."""
    return int(base_seed) ^ int(replicate)


def _uniforms(rng, size):
    # open-interval uniforms: never exactly 0 or 1, safe for inverse CDFs
    return (rng.integers(0, 1 << 53, size=size) + 0.5) * 2.0 ** -53


def _normals(rng, size):
    return ndtri(_uniforms(rng, size))


# ---------------------------------------------------------------------------
# true risks
# ---------------------------------------------------------------------------


def _mlr_truth_params(scenario: Scenario):
    """MLR-form parameters of the Bayes posterior over categories.

    Continuous predictors contribute beta_{k,q} = mu_{q,k} - mu_{q,1} and
    an intercept term -(mu_{q,k}^2 - mu_{q,1}^2)/2; binary predictors
    contribute logit-prevalence differences plus the complementary
    log-prevalence terms.
    """
    K, Q = scenario.K, scenario.Q
    mu = np.asarray(scenario.means, dtype=float)  # Q x K
    pri = np.asarray(scenario.priors, dtype=float)
    alpha = np.log(pri[1:] / pri[0])
    B = np.zeros((Q, K - 1))
    for q in range(Q):
        if scenario.kinds[q] == "continuous":
            B[q] = mu[q, 1:] - mu[q, 0]
            alpha -= 0.5 * (mu[q, 1:] ** 2 - mu[q, 0] ** 2)
        else:
            p = mu[q]
            B[q] = np.log(p[1:] / (1 - p[1:])) - np.log(p[0] / (1 - p[0]))
            alpha += np.log(1 - p[1:]) - np.log(1 - p[0])
    return alpha, B


def true_risks(scenario: Scenario, X) -> ProbMatrix:
    """Analytic per-case category probabilities under the scenario truth."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != scenario.Q:
        raise ValueError(f"predictor matrix must have {scenario.Q} columns")
    n = X.shape[0]
    if scenario.truth_form == "mlr":
        alpha, B = _mlr_truth_params(scenario)
        L = alpha[None, :] + X @ B
        c = np.concatenate([np.zeros((n, 1)), L], axis=1)
        c -= c.max(axis=1, keepdims=True)
        e = np.exp(c)
        P = e / e.sum(axis=1, keepdims=True)
    else:
        a = np.asarray(scenario.alpha, dtype=float)
        b = np.asarray(scenario.beta, dtype=float)
        V = np.concatenate(
            [np.ones((n, 1)), expit(a[None, :] + (X @ b)[:, None]),
             np.zeros((n, 1))], axis=1,
        )
        P = V[:, :-1] - V[:, 1:]
    return ProbMatrix(P, np.ones(n, dtype=bool))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate(scenario: Scenario, n: int, seed: int) -> SimulatedData:
    """Draw a dataset of size n with attached analytic true risks."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _stream(seed)
    Q, K = scenario.Q, scenario.K
    X = np.empty((n, Q))
    if scenario.truth_form == "mlr":
        pri = np.asarray(scenario.priors, dtype=float)
        y = 1 + np.searchsorted(np.cumsum(pri), _uniforms(rng, n))
        y = np.minimum(y, K)
        mu = np.asarray(scenario.means, dtype=float)
        for q in range(Q):
            par = mu[q, y - 1]
            if scenario.kinds[q] == "continuous":
                X[:, q] = par + _normals(rng, n)
            else:
                X[:, q] = (_uniforms(rng, n) < par).astype(float)
    else:
        if scenario.means is not None:
            # mixture marginal: latent component, then per-predictor draws
            w = np.asarray(scenario.priors, dtype=float)
            comp = np.searchsorted(np.cumsum(w), _uniforms(rng, n))
            comp = np.minimum(comp, len(w) - 1)
            mu = np.asarray(scenario.means, dtype=float)
            for q in range(Q):
                par = mu[q, comp]
                if scenario.kinds[q] == "continuous":
                    X[:, q] = par + _normals(rng, n)
                else:
                    X[:, q] = (_uniforms(rng, n) < par).astype(float)
        else:
            for q in range(Q):
                if scenario.kinds[q] == "continuous":
                    X[:, q] = _normals(rng, n)
                else:
                    X[:, q] = (_uniforms(rng, n) < 0.5).astype(float)
        P = true_risks(scenario, X).values
        cum = np.cumsum(P, axis=1)
        y = 1 + (cum < _uniforms(rng, n)[:, None]).sum(axis=1)
        y = np.minimum(y, K)
    ds = Dataset(X, y.astype(int), K)
    return SimulatedData(ds, true_risks(scenario, X), scenario.id, int(seed))


def write_simulated(path, sim: SimulatedData):
    """Export as CSV with truth_1..truth_K columns plus a JSON manifest."""
    write_dataset(path, sim.dataset, truth=sim.true_risks.values)
    manifest = {
        "scenario": sim.scenario_id,
        "seed": sim.seed,
        "generator": GENERATOR_ID,
        "n": sim.dataset.n,
        "K": sim.dataset.K,
        "Q": sim.dataset.Q,
    }
    side = os.fspath(path) + ".json"
    tmp = side + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, side)
