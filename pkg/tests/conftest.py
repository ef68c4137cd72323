import numpy as np
import pytest

from ordcal import Dataset


FAMILY_LABELS = ("mlr", "cl-po", "cl-np", "ac-po", "ac-np", "cr-po",
                 "cr-np", "slm")


def softmax_rows(L):
    c = np.concatenate([np.zeros((L.shape[0], 1)), L], axis=1)
    c = c - c.max(axis=1, keepdims=True)
    e = np.exp(c)
    return e / e.sum(axis=1, keepdims=True)


def make_mlr_dataset(n=600, Q=3, K=3, seed=0, scale=0.6):
    """Data drawn from a multinomial-logit truth; usable by all families."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, Q))
    alpha = np.linspace(0.3, -0.6, K - 1)
    B = rng.normal(scale=scale, size=(Q, K - 1))
    P = softmax_rows(alpha + X @ B)
    u = rng.random(n)
    y = 1 + (np.cumsum(P, axis=1) < u[:, None]).sum(axis=1)
    return Dataset(X, np.minimum(y, K), K)


@pytest.fixture
def small_dataset():
    return make_mlr_dataset()


# ---------------------------------------------------------------------------
# acceptance-criteria reporting: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

ACCEPTANCE_CRITERIA = {
    "test_criterion_01_parameter_counts":
        "1  parameter counts: all 27 (K,Q,structure) cells exact",
    "test_criterion_02_large_sample_mlr_truth":
        "2  large-sample multinomial-truth scenario 3: slopes/ECI/rMSPE/ORC"
        " within tolerance, under 5 minutes",
    "test_criterion_03_large_sample_clpo_truth":
        "3  large-sample cumulative-truth scenario 1: slopes/ECI/rMSPE/ORC"
        " within tolerance",
    "test_criterion_04_coefficient_recovery":
        "4  coefficient recovery at N=200,000 matches the analytic"
        " Bayes-rule targets within 0.02",
    "test_criterion_05_weak_calibration_identity":
        "5  development-data calibration identity (8 families x 5 seeds)",
    "test_criterion_06_equivalence_oracles":
        "6  AC-NP == MLR and reference-category invariance within 1e-6",
    "test_criterion_07_gradient_correctness":
        "7  analytic gradients match central finite differences (1e-5)",
    "test_criterion_08_small_sample_overfitting":
        "8  small-sample study (n_dev=100, 200 reps): mean rMSPE/ORC and"
        " shrinkage ordering, under 15 minutes",
    "test_criterion_09_trivial_metric_anchors":
        "9  metric anchors: ORC 1/0.5, rMSPE 0, ECI 0",
    "test_criterion_10_bootstrap_direction":
        "10 bootstrap: corrected model-specific slopes <= apparent (B=200)",
    "test_case_study_pipeline":
        "case study: command-line pipeline on 5-category data asserting"
        " criteria 5-7 and 9-10",
}

_acceptance_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if name not in ACCEPTANCE_CRITERIA:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _acceptance_outcomes[name] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, desc in ACCEPTANCE_CRITERIA.items():
        outcome = _acceptance_outcomes.get(name)
        if outcome is None:
            continue
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {desc}")
