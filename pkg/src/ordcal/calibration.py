"""Calibration assessment for ordinal risk predictions.

Three layers:

1. Weak calibration per category or dichotomy: a univariate binary
   logistic recalibration of the event indicator on the logit of the
   estimated risk; perfect weak calibration is intercept 0, slope 1.
2. Model-specific calibration: the recalibration is performed inside the
   fitted model's own family, one slope per linear predictor, which makes
   (0, 1) an identity on the development data.
3. Flexible recalibration: spline-based multi-equation recalibration
   producing per-case observed proportions used for calibration plots and
   the estimated calibration index (ECI).
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, logit

from .data import Dataset
from .models import (
    FitOptions,
    FittedModel,
    ModelSpec,
    ProbMatrix,
    _newton,
    _softplus,
    _struct_diagonal,
    _struct_full,
    _struct_none,
    _struct_proportional,
    linear_predictors,
)

CLIP = 1e-12

SETUPS = (
    "mlr-reference",
    "cr-reference",
    "mlr-dichotomy",
    "cr-dichotomy",
    "mlr-category",
    "cr-category",
)


def _clip(p):
    return np.clip(p, CLIP, 1.0 - CLIP)


@dataclass(frozen=True)
class WeakCalibration:
    """Recalibration intercept/slope for one target.

    ``target`` is ("category", k), ("dichotomy", k) or ("lp", j); the
    intercept is estimated with the slope fixed at 1.
    """

    target: tuple[str, int]
    intercept: float
    slope: float
    converged: bool = True


# ---------------------------------------------------------------------------
# weak calibration per category / dichotomy
# ---------------------------------------------------------------------------


def _binary_logistic(x, z, with_slope=True, tol=1e-10, max_iter=100):
    """Damped Newton for a binary logistic fit of z on a single predictor.

    With ``with_slope`` fits (a, b) in logit(p) = a + b*x; otherwise fits
    the intercept alone with x as a fixed unit-slope offset.  Returns
    (intercept, slope, converged).
    """
    z = z.astype(float)
    p1 = np.clip(z.mean(), 1e-6, 1 - 1e-6)
    a = np.log(p1 / (1 - p1)) if with_slope else 0.0
    b = 0.0

    def nll(a, b):
        eta = a + (b * x if with_slope else x)
        # -sum z*eta - log(1+exp(eta)), computed stably
        return float(_softplus(eta).sum() - (z * eta).sum())

    f = nll(a, b)
    converged = False
    for _ in range(max_iter):
        eta = a + (b * x if with_slope else x)
        p = expit(eta)
        r = p - z
        w = p * (1.0 - p)
        if with_slope:
            g = np.array([r.sum(), (r * x).sum()])
            swx = (w * x).sum()
            H = np.array([[w.sum(), swx], [swx, (w * x * x).sum()]])
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                step = -g / max(np.linalg.norm(g), 1.0)
        else:
            g = np.array([r.sum()])
            step = np.array([-g[0] / max(w.sum(), 1e-12)])
        lam = 1.0
        for _ in range(31):
            na = a + lam * step[0]
            nb = b + lam * step[1] if with_slope else 0.0
            fn = nll(na, nb)
            if np.isfinite(fn) and fn <= f:
                break
            lam *= 0.5
        else:
            break
        delta = f - fn
        a, b, f = na, nb, fn
        if delta <= tol * (abs(f) + 1.0):
            converged = True
            break
    return a, b, converged


def _binary_recalibration(x, z, tol=1e-10):
    """Slope from logit(z) ~ a + b x; intercept refit with slope offset 1."""
    _, slope, conv_s = _binary_logistic(x, z, with_slope=True, tol=tol)
    intercept, _, conv_a = _binary_logistic(x, z, with_slope=False, tol=tol)
    return float(intercept), float(slope), bool(conv_s and conv_a)


def weak_calibration(probs: ProbMatrix, y, target) -> WeakCalibration:
    """Calibration intercept and slope for one category or dichotomy.

    ``target`` is a pair ("category", k) or ("dichotomy", k) with k in
    1..K (dichotomy k means the event Y >= k, k >= 2).
    """
    kind, k = target
    y = np.asarray(y, dtype=int)
    K = probs.K
    if kind == "category":
        if not 1 <= k <= K:
            raise ValueError(f"category {k} outside 1..{K}")
        p = probs.values[:, k - 1]
        z = y == k
    elif kind == "dichotomy":
        if not 2 <= k <= K:
            raise ValueError(f"dichotomy >= {k} outside 2..{K}")
        p = probs.tail_sums()[:, k - 1]
        z = y >= k
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    if z.all() or not z.any():
        raise ValueError(
            f"degenerate target {kind} {k}: all outcomes on one side"
        )
    x = logit(_clip(p))
    a, b, conv = _binary_recalibration(x, z)
    return WeakCalibration((kind, k), a, b, conv)


# ---------------------------------------------------------------------------
# model-specific calibration
# ---------------------------------------------------------------------------

_MLR_TYPE = {"multinomial": "multinomial", "stereotype": "multinomial",
             "adjacent": "adjacent", "continuation": "continuation",
             "cumulative": "cumulative"}


def model_specific_calibration(model: FittedModel, data: Dataset,
                               options: FitOptions = FitOptions()):
    """Per-linear-predictor calibration in the model's own family.

    For non-proportional and multinomial-like families this is a single
    joint fit where equation k gets its own intercept and a slope on its
    own fitted linear predictor.  For proportional families each linear
    predictor is recalibrated through a separate proportional fit with
    that predictor as the only covariate.  Intercepts are refit with the
    slopes fixed at 1.  Returns a list of WeakCalibration, one per linear
    predictor (equation).
    """
    L = linear_predictors(model, data.predictors)
    y0 = data.outcomes - 1
    K = data.K
    Km1 = K - 1
    family = _MLR_TYPE[model.spec.family]
    proportional = bool(model.spec.proportional) and not model.spec.relaxed

    if not proportional:
        # joint fit: equation k: a_k + b_k * Lhat_k
        struct = _struct_diagonal(K)
        theta0 = np.concatenate([np.zeros(Km1), np.ones(Km1)])
        theta, _, _, conv_s, _, _ = _newton(
            theta0, y0, K, family, L, struct,
            tol=options.tol, max_iter=options.max_iter,
        )
        slopes = theta[Km1:]
        struct0 = _struct_none(Km1, K)
        theta, _, _, conv_a, _, _ = _newton(
            np.zeros(Km1), y0, K, family, L, struct0, offset=L,
            tol=options.tol, max_iter=options.max_iter,
        )
        intercepts = theta[:Km1]
        return [
            WeakCalibration(("lp", j + 1), float(intercepts[j]),
                            float(slopes[j]), bool(conv_s and conv_a))
            for j in range(Km1)
        ]

    out = []
    for j in range(Km1):
        Xj = L[:, j][:, None]
        struct = _struct_proportional(1, K)
        theta0 = np.concatenate([np.zeros(Km1), [1.0]])
        # proportional links need ordered starting intercepts; offsetting
        # by the LP handles that, so start intercepts at the fitted alphas
        theta0[:Km1] = model.alpha - model.alpha[j]
        theta, _, _, conv_s, _, _ = _newton(
            theta0, y0, K, family, Xj, struct,
            tol=options.tol, max_iter=options.max_iter,
        )
        slope = theta[Km1]
        offs = np.tile(Xj, (1, Km1))
        struct0 = _struct_none(1, K)
        theta0 = model.alpha - model.alpha[j]
        theta, _, _, conv_a, _, _ = _newton(
            theta0, y0, K, family, Xj, struct0, offset=offs,
            tol=options.tol, max_iter=options.max_iter,
        )
        out.append(WeakCalibration(("lp", j + 1), float(theta[j]),
                                   float(slope), bool(conv_s and conv_a)))
    return out


# ---------------------------------------------------------------------------
# flexible recalibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlexibleRecalibration:
    setup: str
    df: int
    coefficients: np.ndarray  # flat engine parameters of the spline fit
    observed: ProbMatrix  # per-case observed proportions O-hat
    converged: bool = True
    warnings: tuple[str, ...] = ()


def _transformed_lps(P, setup):
    """The K-1 transformed linear predictors feeding the spline basis."""
    P = _clip(P)
    K = P.shape[1]
    kind = setup.split("-", 1)[1]
    if kind == "reference":
        return np.log(P[:, 1:] / P[:, [0]])
    if kind == "dichotomy":
        V = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
        return logit(_clip(V[:, 1:]))
    if kind == "category":
        return logit(P[:, : K - 1])
    raise ValueError(f"unknown setup {setup!r}")


def _spline_basis(x, df):
    """Cubic B-spline basis with df columns (intercept column dropped).

    Interior knots at quantiles; coincident or out-of-range knots are
    dropped with a warning (returned), reducing df for that smoother.
    """
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-10:
        raise ValueError("degenerate recalibration input: no variation")
    deg = 3
    notes = []
    n_interior = df - deg
    qs = np.linspace(0, 1, n_interior + 2)[1:-1]
    interior = np.quantile(x, qs)
    keep = [t for t in interior if lo + 1e-10 < t < hi - 1e-10]
    keep = sorted(set(np.round(keep, 12)))
    if len(keep) < n_interior:
        notes.append(
            f"reduced interior knots from {n_interior} to {len(keep)}"
        )
    t = np.r_[[lo] * (deg + 1), keep, [hi] * (deg + 1)]
    D = BSpline.design_matrix(np.clip(x, lo, hi), t, deg).toarray()
    return D[:, 1:], notes


def flexible_recalibration(probs: ProbMatrix, y, setup="mlr-reference",
                           df: int = 4,
                           options: FitOptions = FitOptions()):
    """Spline recalibration of estimated risks against observed outcomes.

    The setup chooses the recalibration family (multinomial or
    non-proportional continuation-ratio) and the transform of the risks
    used as inputs (reference-category log-ratios, dichotomy logits, or
    category logits).  Returns observed proportions O-hat with rows
    summing to 1.
    """
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    y = np.asarray(y, dtype=int)
    K = probs.K
    n = probs.n
    if n < 10 * K * df:
        warnings.warn(
            f"flexible recalibration with n={n} < 10*K*df={10 * K * df} "
            "may be unstable"
        )
    Z = _transformed_lps(probs.values, setup)
    cols = []
    notes = []
    for j in range(K - 1):
        Dj, nj = _spline_basis(Z[:, j], df)
        cols.append(Dj)
        notes.extend(f"lp {j + 1}: {m}" for m in nj)
    X = np.hstack(cols)
    for m in notes:
        warnings.warn(m)
    family = "multinomial" if setup.startswith("mlr") else "continuation"
    Q = X.shape[1]
    struct = _struct_full(Q, K)
    counts = np.bincount(y, minlength=K + 1)[1:].astype(float)
    counts = np.maximum(counts, 0.5)
    freq = counts / counts.sum()
    if family == "multinomial":
        alpha0 = np.log(freq[1:] / freq[0])
    else:
        tail = np.cumsum(freq[::-1])[::-1]
        alpha0 = np.log(tail[1:] / freq[:-1])
    theta0 = np.concatenate([alpha0, np.zeros(struct.n_free)])
    theta, nll, _, conv, _, _ = _newton(
        theta0, y - 1, K, family, X, struct,
        tol=options.tol, max_iter=2 * options.max_iter,
    )
    if not conv:
        raise RuntimeError(
            f"flexible recalibration ({setup}) did not converge"
        )
    alpha = theta[: K - 1]
    B = struct.coef_matrix(theta[K - 1:])
    from .models import _probs_from_L

    L = alpha[None, :] + X @ B
    O = _probs_from_L(L, family)
    return FlexibleRecalibration(
        setup=setup, df=df, coefficients=theta,
        observed=ProbMatrix(O, np.ones(n, dtype=bool)),
        converged=conv, warnings=tuple(notes),
    )


# ---------------------------------------------------------------------------
# ECI
# ---------------------------------------------------------------------------


def eci(probs: ProbMatrix, recal: FlexibleRecalibration, y,
        variant: str = "rescaled") -> float:
    """Estimated calibration index between risks and observed proportions.

    ``original`` scales the mean squared gap to 0..100; ``rescaled``
    divides by the squared gap to a no-information model that predicts
    each category's event rate everywhere.
    """
    P = probs.values
    O = recal.observed.values
    if P.shape != O.shape:
        raise ValueError("probability and recalibration dimensions differ")
    sq = np.mean((P - O) ** 2)
    if variant == "original":
        return float(sq * 100.0 * P.shape[1] / 2.0)
    if variant == "rescaled":
        y = np.asarray(y, dtype=int)
        rates = np.array(
            [(y == k).mean() for k in range(1, P.shape[1] + 1)]
        )
        denom = np.mean((P - rates[None, :]) ** 2)
        if denom < 1e-12:
            raise ValueError("no predictive variation")
        return float(sq / denom)
    raise ValueError(f"unknown ECI variant {variant!r}")


# ---------------------------------------------------------------------------
# calibration plot data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationCurve:
    target: tuple[str, int]
    estimated: np.ndarray  # scatter x, length n
    observed: np.ndarray  # scatter y, length n
    grid: np.ndarray  # 101 points
    smoothed: np.ndarray  # smoother through the scatter at grid


def _loess(x, y, grid, span=0.75):
    """Local linear regression with a tricube kernel."""
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    n = len(xs)
    m = max(int(np.ceil(span * n)), 2)
    out = np.empty(len(grid))
    for i, g in enumerate(grid):
        d = np.abs(xs - g)
        h = np.partition(d, m - 1)[m - 1]
        h = max(h, 1e-12)
        w = np.clip(1.0 - (d / h) ** 3, 0.0, None) ** 3
        sw = w.sum()
        xm = (w * xs).sum() / sw
        ym = (w * ys).sum() / sw
        sxx = (w * (xs - xm) ** 2).sum()
        b = (w * (xs - xm) * (ys - ym)).sum() / sxx if sxx > 1e-14 else 0.0
        out[i] = ym + b * (g - xm)
    return out


def calibration_curve_data(probs: ProbMatrix, recal: FlexibleRecalibration,
                           mode: str = "category"):
    """Scatter and smoothed-curve data for calibration plots.

    Category mode plots each category's (estimated, observed) pairs;
    dichotomy mode plots tail-sum risks P(Y >= k) for k = 2..K.  The
    smoothed curve is display-only.
    """
    P = probs.values
    O = recal.observed.values
    if P.shape != O.shape:
        raise ValueError("probability and recalibration dimensions differ")
    K = P.shape[1]
    if mode == "category":
        targets = [(("category", k), P[:, k - 1], O[:, k - 1])
                   for k in range(1, K + 1)]
    elif mode == "dichotomy":
        Pt = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
        Ot = np.cumsum(O[:, ::-1], axis=1)[:, ::-1]
        targets = [(("dichotomy", k), Pt[:, k - 1], Ot[:, k - 1])
                   for k in range(2, K + 1)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    curves = []
    for target, p, o in targets:
        grid = np.linspace(p.min(), p.max(), 101)
        sm = _loess(p, o, grid)
        curves.append(CalibrationCurve(target, p, o, grid, sm))
    return curves


def write_calibration_plots(directory, curves, mode: str):
    """Write scatter/curve TSV files plus a manifest JSON."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for c in curves:
        kind, k = c.target
        stem = f"{kind}_{k}"
        scatter = os.path.join(directory, f"{stem}_scatter.tsv")
        curve = os.path.join(directory, f"{stem}_curve.tsv")
        _write_tsv(scatter, c.estimated, c.observed)
        _write_tsv(curve, c.grid, c.smoothed)
        entries.append({"target": list(c.target),
                        "scatter": os.path.basename(scatter),
                        "curve": os.path.basename(curve)})
    manifest = os.path.join(directory, "plots.json")
    tmp = manifest + ".tmp"
    with open(tmp, "w") as fh:
        json.dump({"mode": mode, "targets": entries}, fh, indent=2)
    os.replace(tmp, manifest)


def _write_tsv(path, xs, ys):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("estimated\tobserved\n")
        for a, b in zip(xs, ys):
            fh.write(f"{float(a)!r}\t{float(b)!r}\n")
    os.replace(tmp, path)
