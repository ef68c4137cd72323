"""Study orchestration: apparent, out-of-sample, and bootstrap validation.

Three designs:

* large_sample_study — fit and evaluate each family on one large dataset
  per scenario (apparent performance).
* small_sample_study — repeatedly fit on small development draws and
  evaluate on a single shared large dataset (overfitting assessment).
* bootstrap_correct — optimism-corrected performance for one model on one
  dataset via the optimism bootstrap.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    flexible_recalibration,
    eci,
    model_specific_calibration,
    weak_calibration,
)
from .data import Dataset
from .metrics import orc, rmspe
from .models import FitOptions, ModelSpec, fit, predict_probs, spec_from_label
from .simulation import Scenario, generate, replicate_seed

DEFAULT_FAMILIES = ("mlr", "cl-po", "ac-po", "slm")
SLOPE_LIMIT = 20.0


@dataclass(frozen=True)
class PerformanceRow:
    """One (scenario, family) line of a study report.

    Calibration entries are (intercept, slope) pairs keyed by target;
    averaged rows carry the replicate and failure counts that produced
    the means.
    """

    scenario_id: str
    family: str
    n_dev: int
    n_eval: int
    category_calibration: tuple[tuple[float, float], ...]
    dichotomy_calibration: tuple[tuple[float, float], ...]
    lp_calibration: tuple[tuple[float, float], ...]
    eci_rescaled: float | None
    rmspe: float
    orc: float
    replicates: int = 1
    fit_failures: int = 0
    redraws: int = 0
    excluded_slopes: int = 0


def evaluate_model(model, eval_data: Dataset, truth=None, with_eci=True,
                   options: FitOptions = FitOptions()):
    """All report measures for one fitted model on one evaluation set.

    Returns a dict with per-category, per-dichotomy, and per-LP
    calibration pairs, ORC, rMSPE (when true risks are given), and
    rescaled ECI (when requested).
    """
    K = eval_data.K
    probs = predict_probs(model, eval_data.predictors)
    y = eval_data.outcomes
    cat = [weak_calibration(probs, y, ("category", k))
           for k in range(1, K + 1)]
    dic = [weak_calibration(probs, y, ("dichotomy", k))
           for k in range(2, K + 1)]
    lps = model_specific_calibration(model, eval_data, options)
    out = {
        "category": tuple((c.intercept, c.slope) for c in cat),
        "dichotomy": tuple((c.intercept, c.slope) for c in dic),
        "lp": tuple((c.intercept, c.slope) for c in lps),
        "orc": orc(probs, y),
    }
    if truth is not None:
        out["rmspe"] = rmspe(probs, truth)
    if with_eci:
        recal = flexible_recalibration(probs, y, options=options)
        out["eci"] = eci(probs, recal, y, "rescaled")
    return out


def large_sample_study(scenarios, families=DEFAULT_FAMILIES, n: int = 200_000,
                       seed: int = 1, options: FitOptions = FitOptions()):
    """Apparent performance of each family on one large dataset per
    scenario."""
    rows = []
    for idx, scenario in enumerate(scenarios):
        sim = generate(scenario, n, replicate_seed(seed, idx))
        for family in families:
            spec = spec_from_label(family)
            try:
                model = fit(sim.dataset, spec, options)
                res = evaluate_model(model, sim.dataset, sim.true_risks,
                                     with_eci=True, options=options)
            except Exception:
                rows.append(PerformanceRow(
                    scenario.id, family, n, n, (), (), (), None,
                    float("nan"), float("nan"), fit_failures=1,
                ))
                continue
            rows.append(PerformanceRow(
                scenario.id, family, n, n,
                res["category"], res["dichotomy"], res["lp"],
                res["eci"], res["rmspe"], res["orc"],
            ))
    return rows


def _one_replicate(args):
    scenario, families, n_dev, eval_blob, rep_seed, opt = args
    eval_data, truth = eval_blob
    out = {}
    sim = generate(scenario, n_dev, rep_seed)
    if np.any(sim.dataset.category_counts() == 0):
        return None  # caller redraws
    for family in families:
        spec = spec_from_label(family)
        try:
            model = fit(sim.dataset, spec, opt)
            if not model.converged:
                raise RuntimeError("fit did not converge")
            res = evaluate_model(model, eval_data, truth, with_eci=False,
                                 options=opt)
        except Exception:
            out[family] = None
            continue
        out[family] = res
    return out


def small_sample_study(scenario: Scenario, families=DEFAULT_FAMILIES,
                       n_dev: int = 100, reps: int = 200,
                       n_eval: int = 200_000, seed: int = 1,
                       options: FitOptions = FitOptions(), workers: int = 1):
    """Mean out-of-sample performance over repeated small development sets.

    Fits every family on each of ``reps`` development draws of size
    ``n_dev`` and evaluates on one shared evaluation set of size
    ``n_eval``; reports per-family means.  Draws with an empty outcome
    category are redrawn (counted); failed fits and recalibration slopes
    with |b| > 20 are excluded from means (counted).  ECI is not computed
    here.
    """
    from .models import param_count
    import warnings as _warnings

    for family in families:
        need = param_count(spec_from_label(family), scenario.Q, scenario.K)
        if n_dev < need + 10:
            _warnings.warn(
                f"n_dev={n_dev} is below {need + 10} "
                f"(parameters + 10) for {family}; expect instability"
            )
            break

    eval_sim = generate(scenario, n_eval, replicate_seed(seed, 0))
    eval_blob = (eval_sim.dataset, eval_sim.true_risks)

    # pre-draw replicate seeds, skipping draws with empty categories
    counter = 1
    jobs = []
    redraws = 0
    while len(jobs) < reps:
        rep_seed = replicate_seed(seed, counter)
        counter += 1
        sim = generate(scenario, n_dev, rep_seed)
        if np.any(sim.dataset.category_counts() == 0):
            redraws += 1
            if redraws > 10 * reps:
                raise RuntimeError(
                    "too many redraws: outcome category repeatedly empty"
                )
            continue
        jobs.append((scenario, families, n_dev, eval_blob, rep_seed, options))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replicate, jobs, chunksize=1))
    else:
        results = [_one_replicate(j) for j in jobs]

    rows = []
    for family in families:
        per_rep = [r[family] for r in results if r is not None]
        ok = [r for r in per_rep if r is not None]
        failures = len(per_rep) - len(ok)
        if not ok:
            rows.append(PerformanceRow(
                scenario.id, family, n_dev, n_eval, (), (), (), None,
                float("nan"), float("nan"), replicates=0,
                fit_failures=failures, redraws=redraws,
            ))
            continue
        excluded = 0

        def mean_pairs(key, count):
            nonlocal excluded
            out = []
            for j in range(count):
                a_vals, b_vals = [], []
                for r in ok:
                    a, b = r[key][j]
                    if abs(b) > SLOPE_LIMIT:
                        excluded += 1
                        continue
                    a_vals.append(a)
                    b_vals.append(b)
                out.append((float(np.mean(a_vals)) if a_vals else float("nan"),
                            float(np.mean(b_vals)) if b_vals else float("nan")))
            return tuple(out)

        K = scenario.K
        rows.append(PerformanceRow(
            scenario.id, family, n_dev, n_eval,
            mean_pairs("category", K),
            mean_pairs("dichotomy", K - 1),
            mean_pairs("lp", K - 1),
            None,
            float(np.mean([r["rmspe"] for r in ok])),
            float(np.mean([r["orc"] for r in ok])),
            replicates=len(ok), fit_failures=failures, redraws=redraws,
            excluded_slopes=excluded,
        ))
    return rows


# ---------------------------------------------------------------------------
# bootstrap optimism correction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    spec_label: str
    B: int
    apparent: dict
    optimism: dict
    corrected: dict
    failures: int = 0
    redraws: int = 0


def _flatten_metrics(res):
    flat = {}
    for key in ("category", "dichotomy", "lp"):
        for j, (a, b) in enumerate(res[key], start=1):
            flat[f"{key}_{j}_intercept"] = a
            flat[f"{key}_{j}_slope"] = b
    flat["orc"] = res["orc"]
    return flat


def bootstrap_correct(data: Dataset, spec: ModelSpec, B: int = 200,
                      seed: int = 1,
                      options: FitOptions = FitOptions()) -> BootstrapResult:
    """Optimism bootstrap for calibration (all three layers) and ORC.

    For each resample: refit, evaluate on the resample (boot-apparent)
    and on the original data (boot-test); optimism is the mean of
    boot-apparent minus boot-test; corrected = apparent - optimism.
    """
    model = fit(data, spec, options)
    apparent = _flatten_metrics(
        evaluate_model(model, data, with_eci=False, options=options)
    )
    rng = np.random.Generator(np.random.Philox(seed))
    diffs = {k: [] for k in apparent}
    failures = 0
    redraws = 0
    done = 0
    attempts = 0
    while done < B:
        if attempts >= 10 * max(B, 1):
            raise RuntimeError("too many degenerate bootstrap resamples")
        attempts += 1
        idx = rng.integers(0, data.n, size=data.n)
        boot = data.subset(idx)
        if np.any(boot.category_counts() == 0):
            redraws += 1
            continue
        done += 1
        try:
            bm = fit(boot, spec, options)
            boot_app = _flatten_metrics(
                evaluate_model(bm, boot, with_eci=False, options=options)
            )
            boot_test = _flatten_metrics(
                evaluate_model(bm, data, with_eci=False, options=options)
            )
        except Exception:
            failures += 1
            continue
        for k in diffs:
            diffs[k].append(boot_app[k] - boot_test[k])
    optimism = {k: (float(np.mean(v)) if v else 0.0)
                for k, v in diffs.items()}
    corrected = {k: apparent[k] - optimism[k] for k in apparent}
    return BootstrapResult(model.spec.label, B, apparent, optimism,
                           corrected, failures, redraws)


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def _row_record(row: PerformanceRow) -> dict:
    rec = {
        "scenario": row.scenario_id,
        "family": row.family,
        "n_dev": row.n_dev,
        "n_eval": row.n_eval,
        "replicates": row.replicates,
        "fit_failures": row.fit_failures,
        "redraws": row.redraws,
        "excluded_slopes": row.excluded_slopes,
    }
    for key, pairs in (("category", row.category_calibration),
                       ("dichotomy", row.dichotomy_calibration),
                       ("lp", row.lp_calibration)):
        for j, (a, b) in enumerate(pairs, start=1):
            rec[f"{key}_{j}_intercept"] = a
            rec[f"{key}_{j}_slope"] = b
    rec["eci_rescaled"] = row.eci_rescaled
    rec["rmspe"] = row.rmspe
    rec["orc"] = row.orc
    return rec


def write_study_csv(path, rows):
    """Tabular report: one line per (scenario, family)."""
    records = [_row_record(r) for r in rows]
    fields = []
    for r in records:
        for k in r:
            if k not in fields:
                fields.append(k)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in records:
            w.writerow(r)
    os.replace(tmp, path)


def write_study_json(path, rows, extra=None):
    doc = {"rows": [_row_record(r) for r in rows]}
    if extra:
        doc.update(extra)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, path)
