"""Ordinal regression families, maximum-likelihood fitting, and prediction.

Five families are supported: multinomial (reference-category logits),
cumulative, adjacent-category, continuation-ratio, and stereotype.  The
cumulative/adjacent/continuation families come in proportional and
non-proportional variants; proportional variants may additionally relax
proportionality for a subset of predictors (used by the likelihood-ratio
test of proportionality).

Sign conventions
----------------
* multinomial / stereotype: equation k (k = 2..K) models log P(Y=k)/P(Y=1).
* cumulative: equation k models logit P(Y >= k), k = 2..K.
* adjacent: equation k models log P(Y=k+1)/P(Y=k), k = 1..K-1.
* continuation: equation k models logit P(Y > k | Y >= k), k = 1..K-1.

Flat parameter layout (used by :func:`nll_and_gradient` and serialization):
intercepts for the K-1 equations first, then coefficients column-major
(one block of Q per equation for non-proportional structures; shared
coefficients, then per-equation blocks for relaxed predictors, for
proportional ones; a single block of Q for stereotype), then the K-2 free
stereotype scaling factors (equations k = 3..K; the k = 2 factor is fixed
at 1).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

from .data import Dataset

FAMILIES = ("multinomial", "cumulative", "adjacent", "continuation", "stereotype")

PROB_CLIP = 1e-12
SEPARATION_LP = 30.0


class SpecificationError(ValueError):
    """Invalid model-family / proportionality combination."""


@dataclass(frozen=True)
class ModelSpec:
    family: str
    proportional: bool | None = None
    relaxed: tuple[int, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecificationError(f"unknown family {self.family!r}")
        if self.family == "multinomial":
            if self.proportional:
                raise SpecificationError("multinomial cannot be proportional")
            object.__setattr__(self, "proportional", False)
        elif self.family == "stereotype":
            if self.proportional is not None:
                raise SpecificationError(
                    "stereotype carries no proportionality flag"
                )
        else:
            if self.proportional is None:
                raise SpecificationError(
                    f"{self.family} requires an explicit proportional flag"
                )
        if self.relaxed:
            if self.family in ("multinomial", "stereotype") or not self.proportional:
                raise SpecificationError(
                    "relaxed predictors only apply to proportional families"
                )
            object.__setattr__(self, "relaxed", tuple(sorted(set(self.relaxed))))

    @property
    def label(self) -> str:
        if self.family == "multinomial":
            return "mlr"
        if self.family == "stereotype":
            return "slm"
        stem = {"cumulative": "cl", "adjacent": "ac", "continuation": "cr"}
        return f"{stem[self.family]}-{'po' if self.proportional else 'np'}"


_LABELS = {
    "mlr": ModelSpec("multinomial"),
    "cl-po": ModelSpec("cumulative", proportional=True),
    "cl-np": ModelSpec("cumulative", proportional=False),
    "ac-po": ModelSpec("adjacent", proportional=True),
    "ac-np": ModelSpec("adjacent", proportional=False),
    "cr-po": ModelSpec("continuation", proportional=True),
    "cr-np": ModelSpec("continuation", proportional=False),
    "slm": ModelSpec("stereotype"),
}


def spec_from_label(label: str) -> ModelSpec:
    try:
        return _LABELS[label.lower()]
    except KeyError:
        raise SpecificationError(
            f"unknown model label {label!r}; expected one of {sorted(_LABELS)}"
        ) from None


def param_count(spec: ModelSpec, Q: int, K: int) -> int:
    """Number of free parameters for a family at given dimensions."""
    if Q < 1 or K < 2:
        raise ValueError("need Q >= 1 and K >= 2")
    if spec.family == "stereotype":
        return Q + 2 * K - 3
    if spec.family == "multinomial" or not spec.proportional:
        return (Q + 1) * (K - 1)
    # proportional; each relaxed predictor trades 1 shared slope for K-1
    return Q + K - 1 + len(spec.relaxed) * (K - 2)


@dataclass(frozen=True)
class ProbMatrix:
    """Per-case category probabilities with per-row validity flags.

    Rows always sum to 1 by construction; ``valid`` is False only where a
    non-proportional cumulative fit produced a negative cell.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def tail_sums(self) -> np.ndarray:
        """Cumulative risks P(Y >= k) for k = 1..K (column k-1)."""
        return np.cumsum(self.values[:, ::-1], axis=1)[:, ::-1]


# ---------------------------------------------------------------------------
# probability maps and likelihood derivatives in linear-predictor space
# ---------------------------------------------------------------------------


def _logsumexp_rows(c: np.ndarray) -> np.ndarray:
    m = c.max(axis=1)
    return m + np.log(np.exp(c - m[:, None]).sum(axis=1))


def _softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow (notably faster than logaddexp)."""
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _probs_from_L(L: np.ndarray, family: str) -> np.ndarray:
    """Map the n x (K-1) linear predictors to n x K category probabilities."""
    n, Km1 = L.shape
    if family in ("multinomial", "stereotype"):
        c = np.concatenate([np.zeros((n, 1)), L], axis=1)
        c -= c.max(axis=1, keepdims=True)
        e = np.exp(c)
        return e / e.sum(axis=1, keepdims=True)
    if family == "adjacent":
        c = np.concatenate([np.zeros((n, 1)), np.cumsum(L, axis=1)], axis=1)
        c -= c.max(axis=1, keepdims=True)
        e = np.exp(c)
        return e / e.sum(axis=1, keepdims=True)
    if family == "cumulative":
        V = np.concatenate(
            [np.ones((n, 1)), expit(L), np.zeros((n, 1))], axis=1
        )
        return V[:, :-1] - V[:, 1:]
    if family == "continuation":
        h = expit(L)  # P(Y > k | Y >= k)
        surv = np.concatenate([np.ones((n, 1)), np.cumprod(h, axis=1)], axis=1)
        P = np.empty((n, Km1 + 1))
        P[:, :-1] = surv[:, :-1] * (1.0 - h)
        P[:, -1] = surv[:, -1]
        return P
    raise SpecificationError(f"unknown family {family!r}")


def _nll_terms(L: np.ndarray, y0: np.ndarray, family: str) -> np.ndarray:
    """Per-case negative log-likelihood, computed stably; inf on invalid
    cumulative cells."""
    n, Km1 = L.shape
    rows = np.arange(n)
    if family in ("multinomial", "stereotype", "adjacent"):
        if family == "adjacent":
            c = np.concatenate([np.zeros((n, 1)), np.cumsum(L, axis=1)], axis=1)
        else:
            c = np.concatenate([np.zeros((n, 1)), L], axis=1)
        return _logsumexp_rows(c) - c[rows, y0]
    if family == "continuation":
        # sequential binary terms: continue for k < y, stop at k = y (y < K)
        terms = np.zeros(n)
        k_idx = np.arange(Km1)[None, :]
        cont = k_idx < y0[:, None]
        stop = k_idx == y0[:, None]
        # -log sigma(L) = softplus(-L); -log sigma(-L) = softplus(L)
        sp = _softplus(L)
        terms += np.where(cont, sp - L, 0.0).sum(axis=1)
        terms += np.where(stop, sp, 0.0).sum(axis=1)
        return terms
    if family == "cumulative":
        V = np.concatenate(
            [np.ones((n, 1)), expit(L), np.zeros((n, 1))], axis=1
        )
        p = V[rows, y0] - V[rows, y0 + 1]
        out = np.full(n, np.inf)
        ok = p > 0
        out[ok] = -np.log(p[ok])
        return out
    raise SpecificationError(f"unknown family {family!r}")


def _nll_probs(L, y0, family):
    """Per-case NLL together with the probability matrix and, for the
    sigmoid-link families, expit(L) — computed in one pass so the
    exponentials are shared between the likelihood and its derivatives."""
    n, Km1 = L.shape
    rows = np.arange(n)
    if family in ("multinomial", "stereotype", "adjacent"):
        if family == "adjacent":
            c = np.concatenate([np.zeros((n, 1)), np.cumsum(L, axis=1)], axis=1)
        else:
            c = np.concatenate([np.zeros((n, 1)), L], axis=1)
        c -= c.max(axis=1, keepdims=True)
        e = np.exp(c)
        s = e.sum(axis=1)
        terms = np.log(s) - c[rows, y0]
        return terms, e / s[:, None], None
    if family == "cumulative":
        link = expit(L)
        V = np.concatenate([np.ones((n, 1)), link, np.zeros((n, 1))], axis=1)
        P = V[:, :-1] - V[:, 1:]
        p = P[rows, y0]
        terms = np.full(n, np.inf)
        ok = p > 0
        terms[ok] = -np.log(p[ok])
        return terms, P, link
    if family == "continuation":
        h = expit(L)
        k_idx = np.arange(Km1)[None, :]
        cont = k_idx < y0[:, None]
        stop = k_idx == y0[:, None]
        sp = _softplus(L)
        terms = np.where(cont, sp - L, 0.0).sum(axis=1)
        terms += np.where(stop, sp, 0.0).sum(axis=1)
        surv = np.concatenate([np.ones((n, 1)), np.cumprod(h, axis=1)], axis=1)
        P = np.empty((n, Km1 + 1))
        P[:, :-1] = surv[:, :-1] * (1.0 - h)
        P[:, -1] = surv[:, -1]
        return terms, P, h
    raise SpecificationError(f"unknown family {family!r}")


def _grad_L(L, P, y0, family, link=None):
    """d(-log p_y)/dL as an n x (K-1) matrix."""
    n, Km1 = L.shape
    rows = np.arange(n)
    if family in ("multinomial", "stereotype"):
        G = P[:, 1:].copy()
        G[rows, :] -= np.eye(Km1 + 1)[y0][:, 1:]
        return G
    if family == "adjacent":
        tail = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]  # tail[:, c] = P(Y0 >= c)
        G = tail[:, 1:] - (y0[:, None] >= np.arange(1, Km1 + 1)[None, :])
        return G
    if family == "continuation":
        h = expit(L) if link is None else link
        k_idx = np.arange(Km1)[None, :]
        at_risk = y0[:, None] >= k_idx
        return np.where(at_risk, h - (y0[:, None] > k_idx), 0.0)
    if family == "cumulative":
        V = expit(L) if link is None else link
        v = V * (1.0 - V)  # sigma'
        p = P[rows, y0]
        # cell y depends on columns y0-1 (through V_{y0}, sign -) and y0
        # (through V_{y0+1}, sign +); out-of-range columns fall outside
        # 0..K-2 so the masks handle both boundaries
        k_idx = np.arange(Km1)[None, :]
        yc = y0[:, None]
        sgn = (k_idx == yc).astype(float)
        sgn -= k_idx == yc - 1
        return sgn * v / p[:, None]
    raise SpecificationError(f"unknown family {family!r}")


def _hess_L(L, P, y0, family, link=None):
    """d2(-log p_y)/dL dL as an n x (K-1) x (K-1) array."""
    n, Km1 = L.shape
    rows = np.arange(n)
    if family in ("multinomial", "stereotype"):
        pi = P[:, 1:]
        H = -pi[:, :, None] * pi[:, None, :]
        H[:, np.arange(Km1), np.arange(Km1)] += pi
        return H
    if family == "adjacent":
        tail = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
        U = tail[:, 1:]  # U[:, j] = P(Y0 >= j+1), j = 0..K-2
        jj = np.arange(Km1)
        mx = np.maximum.outer(jj, jj)
        return U[:, mx] - U[:, :, None] * U[:, None, :]
    if family == "continuation":
        h = expit(L) if link is None else link
        k_idx = np.arange(Km1)[None, :]
        at_risk = y0[:, None] >= k_idx
        d = np.where(at_risk, h * (1.0 - h), 0.0)
        H = np.zeros((n, Km1, Km1))
        H[:, np.arange(Km1), np.arange(Km1)] = d
        return H
    if family == "cumulative":
        V = expit(L) if link is None else link
        v = V * (1.0 - V)
        vp = v * (1.0 - 2.0 * V)  # sigma''
        p = P[rows, y0]
        # with G = d(-log p)/dL (signed, two nonzero columns), the Hessian
        # is outer(G, G) - d2p/p where d2p is diagonal with the same signs
        k_idx = np.arange(Km1)[None, :]
        yc = y0[:, None]
        sgn = (k_idx == yc).astype(float)
        sgn -= k_idx == yc - 1
        G = sgn * v / p[:, None]
        H = G[:, :, None] * G[:, None, :]
        d = sgn * vp / p[:, None]
        H[:, np.arange(Km1), np.arange(Km1)] += d
        return H
    raise SpecificationError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# coefficient structures: linear maps from free coefficients to the full
# Q x (K-1) coefficient matrix (vec index = equation * Q + predictor)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Structure:
    M: np.ndarray  # (Q*(K-1), n_free)
    B0: np.ndarray  # (Q, K-1) fixed part

    @property
    def n_free(self) -> int:
        return self.M.shape[1]

    def coef_matrix(self, free: np.ndarray) -> np.ndarray:
        Q, Km1 = self.B0.shape
        return self.B0 + (self.M @ free).reshape(Km1, Q).T


def _struct_full(Q, K):
    return _Structure(np.eye(Q * (K - 1)), np.zeros((Q, K - 1)))


def _struct_proportional(Q, K, relaxed=()):
    relaxed = tuple(relaxed)
    shared = [q for q in range(Q) if q not in relaxed]
    n_free = len(shared) + len(relaxed) * (K - 1)
    M = np.zeros((Q * (K - 1), n_free))
    for j, q in enumerate(shared):
        for k in range(K - 1):
            M[k * Q + q, j] = 1.0
    col = len(shared)
    for q in relaxed:
        for k in range(K - 1):
            M[k * Q + q, col + k] = 1.0
        col += K - 1
    return _Structure(M, np.zeros((Q, K - 1)))


def _struct_stereotype_beta(Q, K, phi):
    M = np.zeros((Q * (K - 1), Q))
    for k in range(K - 1):
        for q in range(Q):
            M[k * Q + q, q] = phi[k]
    return _Structure(M, np.zeros((Q, K - 1)))


def _struct_stereotype_phi(K):
    # design column is the score X @ beta (Q = 1); first factor fixed at 1
    M = np.zeros((K - 1, K - 2))
    for k in range(1, K - 1):
        M[k, k - 1] = 1.0
    B0 = np.zeros((1, K - 1))
    B0[0, 0] = 1.0
    return _Structure(M, B0)


def _struct_diagonal(K):
    # one slope per equation, on that equation's own column (Q = K-1)
    Km1 = K - 1
    M = np.zeros((Km1 * Km1, Km1))
    for k in range(Km1):
        M[k * Km1 + k, k] = 1.0
    return _Structure(M, np.zeros((Km1, Km1)))


def _struct_none(Q, K):
    return _Structure(np.zeros((Q * (K - 1), 0)), np.zeros((Q, K - 1)))


# ---------------------------------------------------------------------------
# Newton fitter over (intercepts, free coefficients)
# ---------------------------------------------------------------------------


def _eval_theta(theta, y0, K, family, X, struct, offset, order):
    Km1 = K - 1
    alpha = theta[:Km1]
    free = theta[Km1:]
    B = struct.coef_matrix(free)
    L = alpha[None, :] + X @ B
    if offset is not None:
        L = L + offset
    if order == 0:
        return float(_nll_terms(L, y0, family).sum()), None, None, L
    terms, P, link = _nll_probs(L, y0, family)
    nll = float(terms.sum())
    if not np.isfinite(nll):
        return nll, None, None, L
    G = _grad_L(L, P, y0, family, link)
    gA = G.sum(axis=0)
    gB = (X.T @ G).T.ravel()  # vec index k*Q+q
    grad = np.concatenate([gA, struct.M.T @ gB])
    if order == 1:
        return nll, grad, None, L
    H = _hess_L(L, P, y0, family, link)
    HAA = H.sum(axis=0)
    HAB = np.einsum("ijk,iq->jkq", H, X, optimize=True)
    Q = X.shape[1]
    HAB = HAB.reshape(Km1, Km1 * Q) @ struct.M
    HBB = np.einsum("ijk,iq,ir->jqkr", H, X, X, optimize=True)
    HBB = struct.M.T @ HBB.reshape(Km1 * Q, Km1 * Q) @ struct.M
    p = Km1 + struct.n_free
    Hm = np.empty((p, p))
    Hm[:Km1, :Km1] = HAA
    Hm[:Km1, Km1:] = HAB
    Hm[Km1:, :Km1] = HAB.T
    Hm[Km1:, Km1:] = HBB
    return nll, grad, Hm, L


def _newton(theta0, y0, K, family, X, struct, offset=None, tol=1e-8,
            max_iter=100):
    """Damped Newton minimization of the negative log-likelihood.

    Returns (theta, nll, n_iter, converged, trace, grad_norm).  The NLL is
    non-increasing across accepted iterations; a gradient step is taken if
    the Hessian solve fails or does not give a descent direction.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    nll, grad, Hm, _ = _eval_theta(theta, y0, K, family, X, struct, offset, 2)
    if not np.isfinite(nll):
        raise FloatingPointError("non-finite likelihood at starting values")
    trace = [nll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(Hm, -grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or grad @ step >= 0 or not np.all(np.isfinite(step)):
            gn = np.linalg.norm(grad)
            step = -grad / max(gn, 1.0)
        lam = 1.0
        accepted = False
        for _ in range(31):
            cand = theta + lam * step
            # the full step usually succeeds, so evaluate it with
            # derivatives and reuse them; halved retries skip derivatives
            order = 2 if lam == 1.0 else 0
            nll_new, g_new, H_new, _ = _eval_theta(
                cand, y0, K, family, X, struct, offset, order
            )
            if np.isfinite(nll_new) and nll_new <= nll:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break  # no improving step found
        theta = cand
        delta = nll - nll_new
        if g_new is None:
            nll, grad, Hm, _ = _eval_theta(
                theta, y0, K, family, X, struct, offset, 2
            )
        else:
            nll, grad, Hm = nll_new, g_new, H_new
        trace.append(nll)
        if delta <= tol * (abs(nll) + 1.0):
            converged = True
            break
    grad_norm = float(np.max(np.abs(grad)))
    return theta, nll, it, converged, trace, grad_norm


# ---------------------------------------------------------------------------
# public fitting API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 100
    max_outer: int = 200  # stereotype alternation


@dataclass(frozen=True)
class FittedModel:
    spec: ModelSpec
    K: int
    Q: int
    column_names: tuple[str, ...]
    alpha: np.ndarray
    coef: np.ndarray  # (Q, K-1) general; (Q,) for proportional / stereotype
    phi: np.ndarray | None
    loglik: float
    n_iter: int
    converged: bool
    tol: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return param_count(self.spec, self.Q, self.K)

    def coef_matrix(self) -> np.ndarray:
        """Effective Q x (K-1) coefficient matrix, scaling factors included."""
        if self.coef.ndim == 2:
            return self.coef
        if self.spec.family == "stereotype":
            return np.outer(self.coef, self.phi)
        return np.tile(self.coef[:, None], (1, self.K - 1))

    def flat_params(self) -> np.ndarray:
        parts = [self.alpha]
        if self.coef.ndim == 2 and self.spec.relaxed:
            struct = _struct_proportional(self.Q, self.K, self.spec.relaxed)
            # recover free vector from the structure (columns are orthonormal
            # up to scaling by replication count)
            vec = self.coef.T.ravel()
            scale = (struct.M * struct.M).sum(axis=0)
            parts.append((struct.M.T @ vec) / scale)
        elif self.coef.ndim == 2:
            parts.append(self.coef.T.ravel())
        else:
            parts.append(self.coef)
        if self.spec.family == "stereotype" and self.K > 2:
            parts.append(self.phi[1:])
        return np.concatenate(parts)


def _init_alpha(y, K, family):
    counts = np.bincount(y, minlength=K + 1)[1:].astype(float)
    counts = np.maximum(counts, 0.5)
    freq = counts / counts.sum()
    tail = np.cumsum(freq[::-1])[::-1]
    if family in ("multinomial", "stereotype"):
        return np.log(freq[1:] / freq[0])
    if family == "cumulative":
        return np.log(tail[1:] / (1.0 - tail[1:]))
    if family == "adjacent":
        return np.log(freq[1:] / freq[:-1])
    if family == "continuation":
        return np.log(tail[1:] / freq[:-1])
    raise SpecificationError(family)


def _structure_for(spec, Q, K):
    if spec.family == "multinomial" or (
        spec.family in ("cumulative", "adjacent", "continuation")
        and not spec.proportional
    ):
        return _struct_full(Q, K)
    if spec.family in ("cumulative", "adjacent", "continuation"):
        return _struct_proportional(Q, K, spec.relaxed)
    raise SpecificationError("stereotype uses the alternating fitter")


def fit(data: Dataset, spec: ModelSpec, options: FitOptions = FitOptions()):
    """Maximum-likelihood fit of the given family to the dataset."""
    counts = data.category_counts()
    if np.any(counts == 0):
        missing = int(np.argmin(counts)) + 1
        raise ValueError(f"cannot fit: outcome category {missing} is empty")
    n, Q, K = data.n, data.Q, data.K
    npar = param_count(spec, Q, K)
    if n <= npar:
        raise ValueError(f"need n > {npar} cases for {spec.label}, got {n}")
    X = data.predictors
    y0 = data.outcomes - 1

    if spec.family == "stereotype":
        return _fit_stereotype(data, spec, options)

    struct = _structure_for(spec, Q, K)
    theta0 = np.concatenate([_init_alpha(data.outcomes, K, spec.family),
                             np.zeros(struct.n_free)])
    theta, nll, it, conv, trace, gnorm = _newton(
        theta0, y0, K, spec.family, X, struct,
        tol=options.tol, max_iter=options.max_iter,
    )
    alpha = theta[: K - 1]
    B = struct.coef_matrix(theta[K - 1:])
    if spec.proportional and not spec.relaxed:
        coef = B[:, 0].copy()
    else:
        coef = B
    diagnostics = {"grad_norm": gnorm, "nll_trace": trace}
    L = alpha[None, :] + X @ B
    if not conv and np.max(np.abs(L)) > SEPARATION_LP:
        diagnostics["warning"] = (
            "possible complete or quasi-separation: |linear predictor| "
            f"exceeds {SEPARATION_LP:g} at a non-converged optimum"
        )
    return FittedModel(
        spec=spec, K=K, Q=Q, column_names=data.column_names,
        alpha=alpha, coef=coef, phi=None, loglik=-nll, n_iter=it,
        converged=conv, tol=options.tol, diagnostics=diagnostics,
    )


def _fit_stereotype(data: Dataset, spec: ModelSpec, options: FitOptions):
    n, Q, K = data.n, data.Q, data.K
    X = data.predictors
    y0 = data.outcomes - 1
    if K == 2:
        base = fit(data, ModelSpec("multinomial"), options)
        return replace(
            base, spec=spec, coef=base.coef[:, 0].copy(), phi=np.ones(1)
        )

    warm = fit(data, ModelSpec("adjacent", proportional=True), options)
    beta = warm.coef.copy()
    alpha = np.cumsum(warm.alpha)
    phi = np.arange(1, K, dtype=float)

    total_nll = np.inf
    trace = []
    conv = False
    iters = 0
    for outer in range(1, options.max_outer + 1):
        struct_b = _struct_stereotype_beta(Q, K, phi)
        theta = np.concatenate([alpha, beta])
        theta, nll, it_b, _, _, gnorm = _newton(
            theta, y0, K, "stereotype", X, struct_b,
            tol=options.tol, max_iter=options.max_iter,
        )
        alpha, beta = theta[: K - 1], theta[K - 1:]
        score = (X @ beta)[:, None]
        struct_p = _struct_stereotype_phi(K)
        theta = np.concatenate([alpha, phi[1:]])
        theta, nll, it_p, _, _, gnorm = _newton(
            theta, y0, K, "stereotype", score, struct_p,
            tol=options.tol, max_iter=options.max_iter,
        )
        alpha = theta[: K - 1]
        phi = np.concatenate([[1.0], theta[K - 1:]])
        iters = outer
        trace.append(nll)
        if total_nll - nll <= options.tol * (abs(nll) + 1.0):
            conv = True
            total_nll = nll
            break
        total_nll = nll

    if not conv:
        # alternation can zigzag; polish jointly over (alpha, beta, phi)
        from scipy.optimize import minimize

        x0 = np.concatenate([alpha, beta, phi[1:]])
        spec_slm = ModelSpec("stereotype")

        def obj(p):
            try:
                return nll_and_gradient(p, data, spec_slm)
            except FloatingPointError:
                return np.inf, np.zeros_like(p)

        res = minimize(obj, x0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-7})
        if np.isfinite(res.fun) and res.fun <= total_nll:
            alpha = res.x[: K - 1]
            beta = res.x[K - 1: K - 1 + Q]
            phi = np.concatenate([[1.0], res.x[K - 1 + Q:]])
            gnorm = float(np.max(np.abs(res.jac)))
            conv = bool(res.success) and (
                total_nll - res.fun <= options.tol * (abs(res.fun) + 1.0)
                or gnorm <= 1e-5 * n
            )
            total_nll = float(res.fun)
            trace.append(total_nll)

    diagnostics = {"grad_norm": gnorm, "nll_trace": trace}
    L = alpha[None, :] + np.outer(X @ beta, phi)
    if not conv and np.max(np.abs(L)) > SEPARATION_LP:
        diagnostics["warning"] = (
            "possible complete or quasi-separation: |linear predictor| "
            f"exceeds {SEPARATION_LP:g} at a non-converged optimum"
        )
    return FittedModel(
        spec=spec, K=K, Q=Q, column_names=data.column_names,
        alpha=alpha, coef=beta, phi=phi, loglik=-total_nll, n_iter=iters,
        converged=conv, tol=options.tol, diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def linear_predictors(model: FittedModel, X) -> np.ndarray:
    """The n x (K-1) fitted linear predictors for new predictor rows."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.Q:
        raise ValueError(f"predictor matrix must have {model.Q} columns")
    return model.alpha[None, :] + X @ model.coef_matrix()


def predict_probs(model: FittedModel, X) -> ProbMatrix:
    """Estimated category risks for new predictor rows.

    Negative cells (possible only for non-proportional cumulative models)
    are returned unmodified with the row flagged invalid.
    """
    L = linear_predictors(model, X)
    if not np.all(np.isfinite(L)):
        raise FloatingPointError("non-finite linear predictor")
    P = _probs_from_L(L, model.spec.family)
    valid = np.all(P >= 0.0, axis=1)
    return ProbMatrix(P, valid)


@dataclass(frozen=True)
class ValidityReport:
    n_violations: int
    rows: np.ndarray


def cumulative_validity(model: FittedModel, X) -> ValidityReport:
    """Rows where a cumulative fit produces decreasing tail risks."""
    if model.spec.family != "cumulative" or model.spec.proportional:
        return ValidityReport(0, np.empty(0, dtype=int))
    P = predict_probs(model, X)
    rows = np.flatnonzero(~P.valid)
    return ValidityReport(len(rows), rows)


# ---------------------------------------------------------------------------
# flat-parameter objective (supports the fitter tests and external checks)
# ---------------------------------------------------------------------------


def _split_flat(params, spec, Q, K):
    params = np.asarray(params, dtype=float)
    if params.size != param_count(spec, Q, K):
        raise ValueError(
            f"expected {param_count(spec, Q, K)} parameters, got {params.size}"
        )
    alpha = params[: K - 1]
    rest = params[K - 1:]
    if spec.family == "stereotype":
        beta = rest[:Q]
        phi = np.concatenate([[1.0], rest[Q:]])
        return alpha, beta, phi
    return alpha, rest, None


def nll_and_gradient(params, data: Dataset, spec: ModelSpec):
    """Negative log-likelihood and its analytic gradient in the flat layout."""
    Q, K = data.Q, data.K
    alpha, rest, phi = _split_flat(params, spec, Q, K)
    X = data.predictors
    y0 = data.outcomes - 1
    if spec.family == "stereotype":
        L = alpha[None, :] + np.outer(X @ rest, phi)
    else:
        struct = _structure_for(spec, Q, K)
        L = alpha[None, :] + X @ struct.coef_matrix(rest)
    if not np.all(np.isfinite(L)):
        i, k = np.argwhere(~np.isfinite(L))[0]
        raise FloatingPointError(
            f"non-finite linear predictor at row {i}, equation {k + 2}"
        )
    terms, P, link = _nll_probs(L, y0, spec.family)
    nll = float(terms.sum())
    if not np.isfinite(nll):
        bad = int(np.argmax(~np.isfinite(terms)))
        raise FloatingPointError(f"invalid probability for case {bad}")
    G = _grad_L(L, P, y0, spec.family, link)
    gA = G.sum(axis=0)
    if spec.family == "stereotype":
        gB = X.T @ G  # (Q, K-1) at the effective-coefficient level
        g_beta = gB @ phi
        score = X @ rest
        g_phi = (score[:, None] * G).sum(axis=0)[1:]
        grad = np.concatenate([gA, g_beta, g_phi])
    else:
        gB = (X.T @ G).T.ravel()
        grad = np.concatenate([gA, struct.M.T @ gB])
    return nll, grad


# ---------------------------------------------------------------------------
# likelihood-ratio test of proportionality
# ---------------------------------------------------------------------------


def lr_test_proportionality(data: Dataset, q: int,
                            options: FitOptions = FitOptions()):
    """Per-predictor likelihood-ratio test of cumulative proportional odds.

    Compares the proportional cumulative fit against a fit where only
    predictor ``q`` has per-equation effects.  Returns (statistic, df,
    p-value) with df = K - 2.
    """
    if data.K < 3:
        raise ValueError("proportionality test needs K >= 3")
    if not 0 <= q < data.Q:
        raise ValueError(f"predictor index {q} out of range")
    name = data.column_names[q]
    base = fit(data, ModelSpec("cumulative", proportional=True), options)
    if not base.converged:
        raise RuntimeError(
            f"proportional cumulative fit did not converge (predictor {name})"
        )
    relaxed = fit(
        data, ModelSpec("cumulative", proportional=True, relaxed=(q,)), options
    )
    if not relaxed.converged:
        raise RuntimeError(
            f"relaxed cumulative fit did not converge for predictor {name}"
        )
    stat = 2.0 * (relaxed.loglik - base.loglik)
    stat = max(stat, 0.0)
    df = data.K - 2
    return stat, df, float(chi2.sf(stat, df))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_SERIAL_VERSION = 1


def model_to_json(model: FittedModel) -> str:
    doc = {
        "format": "ordcal-model",
        "version": _SERIAL_VERSION,
        "spec": {
            "family": model.spec.family,
            "proportional": model.spec.proportional,
            "relaxed": list(model.spec.relaxed),
        },
        "Q": model.Q,
        "K": model.K,
        "column_names": list(model.column_names),
        "alpha": model.alpha.tolist(),
        "coef": model.coef.tolist(),
        "phi": None if model.phi is None else model.phi.tolist(),
        "loglik": model.loglik,
        "converged": model.converged,
        "n_iter": model.n_iter,
        "tol": model.tol,
    }
    return json.dumps(doc, indent=2)


def model_from_json(text: str) -> FittedModel:
    doc = json.loads(text)
    if doc.get("format") != "ordcal-model":
        raise ValueError("not an ordcal model document")
    if doc.get("version") != _SERIAL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    sp = doc["spec"]
    spec = ModelSpec(
        sp["family"],
        proportional=(None if sp["family"] == "stereotype"
                      else sp["proportional"]),
        relaxed=tuple(sp.get("relaxed", ())),
    )
    return FittedModel(
        spec=spec, K=doc["K"], Q=doc["Q"],
        column_names=tuple(doc["column_names"]),
        alpha=np.asarray(doc["alpha"], dtype=float),
        coef=np.asarray(doc["coef"], dtype=float),
        phi=None if doc["phi"] is None else np.asarray(doc["phi"], dtype=float),
        loglik=doc["loglik"], n_iter=doc["n_iter"],
        converged=doc["converged"], tol=doc["tol"],
    )
