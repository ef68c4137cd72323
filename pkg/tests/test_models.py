"""Model-core tests: probability maps, fitting, gradients, invariants."""

import numpy as np
import pytest
from scipy.special import expit

from ordcal import (
    Dataset,
    FitOptions,
    ModelSpec,
    SpecificationError,
    cumulative_validity,
    fit,
    linear_predictors,
    lr_test_proportionality,
    model_from_json,
    model_to_json,
    nll_and_gradient,
    param_count,
    predict_probs,
    spec_from_label,
)
from conftest import FAMILY_LABELS, make_mlr_dataset, softmax_rows


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------


def test_param_count_formulas():
    assert param_count(ModelSpec("cumulative", proportional=True), 3, 3) == 5
    assert param_count(ModelSpec("stereotype"), 5, 5) == 12
    assert param_count(ModelSpec("multinomial"), 10, 10) == 99


def test_param_count_binary_collapse():
    # at K=2 every family needs Q+1 parameters
    for label in FAMILY_LABELS:
        assert param_count(spec_from_label(label), 4, 2) == 5


def test_param_count_relaxed_predictor():
    base = param_count(ModelSpec("cumulative", proportional=True), 4, 4)
    rel = param_count(
        ModelSpec("cumulative", proportional=True, relaxed=(1,)), 4, 4
    )
    assert rel == base + 4 - 2  # one shared slope becomes K-1 slopes


def test_invalid_spec_combinations():
    with pytest.raises(SpecificationError):
        ModelSpec("multinomial", proportional=True)
    with pytest.raises(SpecificationError):
        ModelSpec("stereotype", proportional=True)
    with pytest.raises(SpecificationError):
        ModelSpec("stereotype", proportional=False)
    with pytest.raises(SpecificationError):
        ModelSpec("cumulative")  # flag is required
    with pytest.raises(SpecificationError):
        spec_from_label("nope")


# ---------------------------------------------------------------------------
# probability maps (appendix-formula oracles)
# ---------------------------------------------------------------------------


def _manual_model(family, proportional, alpha, coef, K, phi=None):
    spec = ModelSpec(family, proportional=proportional) \
        if family not in ("multinomial", "stereotype") \
        else (ModelSpec(family) if family == "multinomial"
              else ModelSpec("stereotype"))
    from ordcal.models import FittedModel
    return FittedModel(
        spec=spec, K=K, Q=np.atleast_2d(coef).shape[0] if coef.ndim == 2
        else coef.shape[0],
        column_names=tuple(f"x{i}" for i in range(coef.shape[0])),
        alpha=np.asarray(alpha, float), coef=np.asarray(coef, float),
        phi=phi, loglik=0.0, n_iter=0, converged=True, tol=1e-8,
    )


def test_mlr_zero_params_uniform():
    m = _manual_model("multinomial", None, np.zeros(2), np.zeros((2, 2)), 3)
    P = predict_probs(m, np.random.default_rng(0).normal(size=(5, 2)))
    assert np.allclose(P.values, 1.0 / 3.0)


def test_clpo_extreme_intercept():
    # alpha=(0, -50), beta=0 -> every row (0.5, 0.5, ~0)
    m = _manual_model("cumulative", True, np.array([0.0, -50.0]),
                      np.zeros(1), 3)
    P = predict_probs(m, np.zeros((4, 1)))
    assert np.allclose(P.values[:, 0], 0.5)
    assert np.allclose(P.values[:, 1], 0.5, atol=1e-12)
    assert np.all(P.values[:, 2] < 1e-20)


def test_adjacent_brute_force_normalization():
    # AC probabilities equal direct enumeration of exp(cumulative sums)
    rng = np.random.default_rng(3)
    K, Q, n = 4, 2, 30
    alpha = rng.normal(size=K - 1)
    beta = rng.normal(size=Q)
    m = _manual_model("adjacent", True, alpha, beta, K)
    X = rng.normal(size=(n, Q))
    P = predict_probs(m, X).values
    L = alpha[None, :] + (X @ beta)[:, None]
    for i in range(n):
        terms = [1.0] + [np.exp(np.sum(L[i, :k])) for k in range(1, K)]
        expected = np.array(terms) / np.sum(terms)
        assert np.allclose(P[i], expected)


def test_continuation_sequential_construction():
    rng = np.random.default_rng(4)
    K, Q = 4, 2
    alpha = rng.normal(size=K - 1)
    B = rng.normal(size=(Q, K - 1))
    m = _manual_model("continuation", False, alpha, B, K)
    X = rng.normal(size=(10, Q))
    P = predict_probs(m, X).values
    L = alpha[None, :] + X @ B
    h = expit(L)  # P(Y > k | Y >= k)
    manual = np.empty_like(P)
    surv = np.ones(10)
    for k in range(K - 1):
        manual[:, k] = surv * (1 - h[:, k])
        surv = surv * h[:, k]
    manual[:, -1] = surv
    assert np.allclose(P, manual)


def test_row_sums_all_families():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 2))
    for label in FAMILY_LABELS:
        spec = spec_from_label(label)
        K = 3
        if spec.family == "stereotype":
            m = _manual_model("stereotype", None, rng.normal(size=2),
                              rng.normal(size=2), K,
                              phi=np.array([1.0, 1.7]))
        elif label.endswith("po"):
            m = _manual_model(spec.family, True, np.array([0.5, -0.5]),
                              rng.normal(scale=0.5, size=2), K)
        else:
            m = _manual_model(spec.family, spec.proportional,
                              np.array([0.5, -0.5]),
                              rng.normal(scale=0.2, size=(2, 2)), K)
        P = predict_probs(m, X)
        assert np.abs(P.values.sum(axis=1) - 1.0).max() < 1e-12


def test_linear_predictors_proportional_columns_differ_by_intercept():
    ds = make_mlr_dataset(K=4)
    m = fit(ds, ModelSpec("cumulative", proportional=True))
    L = linear_predictors(m, ds.predictors)
    diff = L[:, 0] - L[:, 1]
    assert np.allclose(diff, diff[0])
    assert np.allclose(diff[0], m.alpha[0] - m.alpha[1])


def test_linear_predictors_hand_value():
    m = _manual_model("multinomial", None, np.array([0.5, -1.0]),
                      np.array([[1.0, 2.0], [-0.5, 0.25]]), 3)
    L = linear_predictors(m, np.array([[2.0, 4.0]]))
    # by hand: 0.5 + 2*1 + 4*(-0.5) = 0.5; -1 + 2*2 + 4*0.25 = 4.0
    assert np.allclose(L, [[0.5, 4.0]])


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def test_fit_null_data_recovers_marginals():
    rng = np.random.default_rng(6)
    n = 4000
    X = rng.normal(size=(n, 2))
    y = rng.choice([1, 2, 3], size=n, p=[0.5, 0.3, 0.2])
    ds = Dataset(X, y, 3)
    m = fit(ds, ModelSpec("multinomial"))
    assert np.abs(m.coef).max() < 0.1
    freq = ds.category_counts() / n
    # intercepts match the empirical log-odds up to the (tiny) slope noise
    assert np.allclose(m.alpha, np.log(freq[1:] / freq[0]), atol=0.02)


def test_fit_rejects_empty_category():
    ds = Dataset(np.random.default_rng(0).normal(size=(50, 2)),
                 np.repeat([1, 3], 25), 3)
    with pytest.raises(ValueError, match="category 2"):
        fit(ds, ModelSpec("multinomial"))


def test_fit_rejects_too_few_cases():
    X = np.random.default_rng(1).normal(size=(8, 3))
    ds = Dataset(X, np.array([1, 2, 3, 1, 2, 3, 1, 2]), 3)  # npar = 8 = n
    with pytest.raises(ValueError, match="need n >"):
        fit(ds, ModelSpec("multinomial"))


def test_monotone_nll_trace():
    ds = make_mlr_dataset(seed=7)
    for label in FAMILY_LABELS:
        m = fit(ds, spec_from_label(label))
        trace = np.asarray(m.diagnostics["nll_trace"])
        assert np.all(np.diff(trace) <= 1e-9), label


def test_converged_flag_and_gradient_at_optimum():
    ds = make_mlr_dataset(seed=8)
    for label in FAMILY_LABELS:
        m = fit(ds, spec_from_label(label))
        assert m.converged, label
        _, g = nll_and_gradient(m.flat_params(), ds, m.spec)
        assert np.abs(g).max() <= 1e-5 * ds.n, label


def test_separation_diagnostics():
    # outcome perfectly determined by the predictor: quasi-separation
    x = np.concatenate([np.linspace(-3, -1, 30), np.linspace(1, 3, 30)])
    y = np.concatenate([np.ones(30, int), np.full(30, 2)])
    ds = Dataset(x[:, None], y, 2)
    m = fit(ds, ModelSpec("multinomial"), FitOptions(max_iter=60))
    assert (not m.converged) or np.abs(m.coef).max() > 10
    if not m.converged:
        assert "warning" in m.diagnostics


# ---------------------------------------------------------------------------
# nll_and_gradient
# ---------------------------------------------------------------------------


def _valid_random_params(spec, Q, K, rng):
    npar = param_count(spec, Q, K)
    th = rng.normal(scale=0.3, size=npar)
    if spec.family == "cumulative":
        # keep cumulative probabilities monotone: ordered intercepts,
        # gentle slopes
        th[: K - 1] = np.sort(rng.normal(scale=0.5, size=K - 1))[::-1]
        th[: K - 1] += np.linspace(0.5, -0.5, K - 1)
        th[K - 1:] *= 0.1
    return th


def test_gradient_matches_finite_differences():
    ds = make_mlr_dataset(n=300, seed=9)
    rng = np.random.default_rng(10)
    h = 1e-5
    for label in FAMILY_LABELS:
        spec = spec_from_label(label)
        for _ in range(10):
            th = _valid_random_params(spec, ds.Q, ds.K, rng)
            try:
                _, g = nll_and_gradient(th, ds, spec)
            except FloatingPointError:
                continue
            num = np.empty_like(th)
            for j in range(len(th)):
                e = np.zeros_like(th)
                e[j] = h
                fp, _ = nll_and_gradient(th + e, ds, spec)
                fm, _ = nll_and_gradient(th - e, ds, spec)
                num[j] = (fp - fm) / (2 * h)
            rel = np.abs(g - num) / np.maximum(np.abs(num), 1.0)
            assert rel.max() <= 1e-5, label


def test_k2_nll_is_binary_logloss():
    # K=2 multinomial equals an independently coded binary log-loss
    rng = np.random.default_rng(11)
    n = 200
    X = rng.normal(size=(n, 2))
    y = rng.integers(1, 3, size=n)
    ds = Dataset(X, y, 2)
    th = rng.normal(size=3)
    nll, _ = nll_and_gradient(th, ds, ModelSpec("multinomial"))
    eta = th[0] + X @ th[1:]
    p = expit(eta)
    manual = -np.sum(np.where(y == 2, np.log(p), np.log(1 - p)))
    assert np.isclose(nll, manual, rtol=1e-12)


def test_nll_reports_bad_parameter_length():
    ds = make_mlr_dataset(n=100)
    with pytest.raises(ValueError, match="expected"):
        nll_and_gradient(np.zeros(3), ds, ModelSpec("multinomial"))


def test_nll_reports_nonfinite():
    ds = make_mlr_dataset(n=100)
    bad = np.zeros(param_count(ModelSpec("multinomial"), ds.Q, ds.K))
    bad[0] = np.inf
    with pytest.raises(FloatingPointError):
        nll_and_gradient(bad, ds, ModelSpec("multinomial"))


# ---------------------------------------------------------------------------
# family equivalences and invariances
# ---------------------------------------------------------------------------


def test_acnp_equals_mlr():
    ds = make_mlr_dataset(seed=12, K=4)
    m1 = fit(ds, ModelSpec("multinomial"))
    m2 = fit(ds, ModelSpec("adjacent", proportional=False))
    P1 = predict_probs(m1, ds.predictors).values
    P2 = predict_probs(m2, ds.predictors).values
    assert np.abs(P1 - P2).max() < 1e-6


def test_mlr_reference_category_invariance():
    # relabeling categories permutes predicted columns but changes no risk
    ds = make_mlr_dataset(seed=13)
    perm = {1: 2, 2: 1, 3: 3}  # category 2 becomes the reference
    ds2 = Dataset(ds.predictors,
                  np.vectorize(perm.get)(ds.outcomes), ds.K)
    P1 = predict_probs(fit(ds, ModelSpec("multinomial")),
                       ds.predictors).values
    P2 = predict_probs(fit(ds2, ModelSpec("multinomial")),
                       ds.predictors).values
    assert np.abs(P1[:, 0] - P2[:, 1]).max() < 1e-6
    assert np.abs(P1[:, 1] - P2[:, 0]).max() < 1e-6
    assert np.abs(P1[:, 2] - P2[:, 2]).max() < 1e-6


def test_predictor_rescaling_invariance():
    ds = make_mlr_dataset(seed=14)
    X2 = ds.predictors.copy()
    X2[:, 0] = 3.0 * X2[:, 0] - 2.0
    ds2 = Dataset(X2, ds.outcomes, ds.K)
    for label in FAMILY_LABELS:
        spec = spec_from_label(label)
        P1 = predict_probs(fit(ds, spec), ds.predictors).values
        P2 = predict_probs(fit(ds2, spec), X2).values
        assert np.abs(P1 - P2).max() < 1e-6, label


def test_cumulative_label_reversal():
    ds = make_mlr_dataset(seed=15, K=4)
    rev = Dataset(ds.predictors, ds.K + 1 - ds.outcomes, ds.K)
    for proportional in (True, False):
        spec = ModelSpec("cumulative", proportional=proportional)
        P1 = predict_probs(fit(ds, spec), ds.predictors).values
        P2 = predict_probs(fit(rev, spec), ds.predictors).values
        assert np.abs(P1 - P2[:, ::-1]).max() < 1e-6


def test_stereotype_phi2_fixed_and_recovery():
    rng = np.random.default_rng(16)
    n, Q, K = 4000, 3, 4
    X = rng.normal(size=(n, Q))
    beta = np.array([0.5, 0.4, 0.3])
    phi = np.array([1.0, 1.8, 2.9])
    L = np.array([0.1, -0.4, -0.9]) + np.outer(X @ beta, phi)
    P = softmax_rows(L)
    y = 1 + (np.cumsum(P, axis=1) < rng.random(n)[:, None]).sum(axis=1)
    ds = Dataset(X, np.minimum(y, K), K)
    m = fit(ds, ModelSpec("stereotype"))
    assert m.phi[0] == 1.0
    assert np.abs(m.phi[1:] - phi[1:]).max() < 0.3
    assert np.abs(m.coef - beta).max() < 0.1


# ---------------------------------------------------------------------------
# cumulative validity
# ---------------------------------------------------------------------------


def test_cumulative_validity_hand_built_crossing():
    # L1 = 0, L2 = x - 1: cumulative risks cross exactly at x = 1
    m = _manual_model("cumulative", False, np.array([0.0, -1.0]),
                      np.array([[0.0, 1.0]]), 3)
    x = np.array([[-1.0], [0.5], [1.5], [3.0]])
    report = cumulative_validity(m, x)
    assert report.n_violations == 2
    assert list(report.rows) == [2, 3]
    P = predict_probs(m, x)
    assert list(P.valid) == [True, True, False, False]


def test_cumulative_validity_not_applicable():
    ds = make_mlr_dataset()
    m = fit(ds, ModelSpec("multinomial"))
    assert cumulative_validity(m, ds.predictors).n_violations == 0
    m = fit(ds, ModelSpec("cumulative", proportional=True))
    assert cumulative_validity(m, ds.predictors).n_violations == 0


# ---------------------------------------------------------------------------
# proportionality LR test
# ---------------------------------------------------------------------------


def test_lr_test_basic_properties():
    ds = make_mlr_dataset(n=800, seed=17)
    stat, df, p = lr_test_proportionality(ds, 0)
    assert stat >= 0
    assert df == ds.K - 2
    assert 0 <= p <= 1
    # duplicating the data doubles the statistic
    ds2 = Dataset(np.vstack([ds.predictors] * 2),
                  np.concatenate([ds.outcomes] * 2), ds.K)
    stat2, _, _ = lr_test_proportionality(ds2, 0)
    assert np.isclose(stat2, 2 * stat, rtol=1e-4, atol=1e-6)


def test_lr_test_detects_nonproportional_effect():
    # predictor 0 with per-equation cumulative effects of opposite sign
    rng = np.random.default_rng(18)
    n = 5000
    X = rng.normal(size=(n, 2))
    V2 = expit(0.5 + 0.9 * X[:, 0] + 0.4 * X[:, 1])
    V3 = expit(-0.8 - 0.6 * X[:, 0] + 0.4 * X[:, 1])
    V3 = np.minimum(V3, V2 - 1e-9)
    u = rng.random(n)
    y = np.where(u > V2, 1, np.where(u > V3, 2, 3))
    ds = Dataset(X, y, 3)
    _, _, p = lr_test_proportionality(ds, 0)
    assert p < 1e-3
    _, _, p1 = lr_test_proportionality(ds, 1)
    assert p1 > 1e-4  # proportional predictor is not flagged as strongly


def test_lr_test_requires_three_categories():
    ds = make_mlr_dataset(K=2)
    with pytest.raises(ValueError):
        lr_test_proportionality(ds, 0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_model_json_round_trip_exact():
    ds = make_mlr_dataset(seed=19)
    for label in FAMILY_LABELS:
        m = fit(ds, spec_from_label(label))
        m2 = model_from_json(model_to_json(m))
        assert m2.spec == m.spec
        assert np.array_equal(m2.alpha, m.alpha)
        assert np.array_equal(m2.coef, m.coef)
        if m.phi is not None:
            assert np.array_equal(m2.phi, m.phi)
        assert m2.loglik == m.loglik
        P1 = predict_probs(m, ds.predictors).values
        P2 = predict_probs(m2, ds.predictors).values
        assert np.array_equal(P1, P2)


def test_model_json_rejects_garbage():
    with pytest.raises(ValueError):
        model_from_json('{"format": "something-else"}')
