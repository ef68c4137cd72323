"""Command-line interface.

Subcommands: simulate, fit, predict, calibrate, bootstrap, lrtest-po,
study large-sample, study small-sample, scenarios list.  Every command
that writes outputs also writes a run manifest (command, arguments, seed,
generator, version, input digests) so the run can be reproduced.

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .calibration import (
    SETUPS,
    calibration_curve_data,
    eci,
    flexible_recalibration,
    model_specific_calibration,
    weak_calibration,
    write_calibration_plots,
)
from .data import load_dataset, Dataset
from .models import (
    FitOptions,
    fit,
    lr_test_proportionality,
    model_from_json,
    model_to_json,
    predict_probs,
    spec_from_label,
    cumulative_validity,
)
from .simulation import (
    GENERATOR_ID,
    builtin_scenarios,
    generate,
    write_simulated,
)
from .validation import (
    DEFAULT_FAMILIES,
    bootstrap_correct,
    large_sample_study,
    small_sample_study,
    write_study_csv,
    write_study_json,
)

FAMILY_CHOICES = ("mlr", "cl-po", "cl-np", "ac-po", "ac-np", "cr-po",
                  "cr-np", "slm")


class UserError(Exception):
    pass


def _default_seed():
    env = os.environ.get("ORDCAL_SEED")
    return int(env) if env else 1


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(outdir, args, inputs=()):
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in vars(args).items()
                      if k not in ("func",) and not k.startswith("_")},
        "seed": getattr(args, "seed", None),
        "generator": GENERATOR_ID,
        "tool_version": __version__,
        "inputs": {os.path.basename(p): _digest(p) for p in inputs},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = os.path.join(outdir, "runmanifest.json")
    _atomic_json(path, manifest)


def _atomic_json(path, doc):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, default=_jsonable)
    os.replace(tmp, path)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _scenario(args):
    key = f"{args.truth}-{args.scenario}"
    reg = builtin_scenarios()
    if key not in reg:
        raise UserError(f"unknown scenario {key}; see `ordcal scenarios list`")
    return reg[key]


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    scenario = _scenario(args)
    sim = generate(scenario, args.n, args.seed)
    outdir = _outdir(args)
    path = os.path.join(outdir, "data.csv")
    tmp = path + ".tmp"
    write_simulated(tmp, sim)
    os.replace(tmp + ".json", path + ".json")
    os.replace(tmp, path)
    _write_manifest(outdir, args)
    print(f"wrote {path} (n={args.n}, scenario {scenario.id})")
    return 0


def cmd_fit(args):
    data, _ = load_dataset(args.data, outcome=args.outcome,
                           truth_prefix="truth_")
    spec = spec_from_label(args.family)
    model = fit(data, spec, FitOptions(tol=args.tol, max_iter=args.max_iter))
    outdir = _outdir(args)
    path = os.path.join(outdir, "model.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(model_to_json(model))
    os.replace(tmp, path)
    _write_manifest(outdir, args, [args.data])
    status = "converged" if model.converged else "NOT converged"
    print(f"wrote {path} ({spec.label}, logLik={model.loglik:.4f}, {status})")
    if "warning" in model.diagnostics:
        print(f"warning: {model.diagnostics['warning']}", file=sys.stderr)
    return 0 if model.converged else 2


def cmd_predict(args):
    with open(args.model) as fh:
        model = model_from_json(fh.read())
    data, _ = load_dataset(args.data, outcome=args.outcome,
                           truth_prefix="truth_")
    if data.Q != model.Q:
        raise UserError(
            f"dataset has {data.Q} predictors but model expects {model.Q}"
        )
    probs = predict_probs(model, data.predictors)
    outdir = _outdir(args)
    path = os.path.join(outdir, "probs.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"p_{k}" for k in range(1, probs.K + 1)] + ["valid"])
        for i in range(probs.n):
            w.writerow([repr(float(v)) for v in probs.values[i]]
                       + [int(probs.valid[i])])
    os.replace(tmp, path)
    report = cumulative_validity(model, data.predictors)
    if report.n_violations:
        print(f"warning: {report.n_violations} rows with decreasing "
              "cumulative risks", file=sys.stderr)
    _write_manifest(outdir, args, [args.model, args.data])
    print(f"wrote {path}")
    return 0


def cmd_calibrate(args):
    with open(args.model) as fh:
        model = model_from_json(fh.read())
    data, _ = load_dataset(args.data, outcome=args.outcome,
                           truth_prefix="truth_")
    if data.Q != model.Q:
        raise UserError(
            f"dataset has {data.Q} predictors but model expects {model.Q}"
        )
    probs = predict_probs(model, data.predictors)
    y = data.outcomes
    K = data.K
    report = {
        "family": model.spec.label,
        "n": data.n,
        "K": K,
        "category": [asdict(weak_calibration(probs, y, ("category", k)))
                     for k in range(1, K + 1)],
        "dichotomy": [asdict(weak_calibration(probs, y, ("dichotomy", k)))
                      for k in range(2, K + 1)],
        "model_specific": [asdict(c)
                           for c in model_specific_calibration(model, data)],
    }
    recal = flexible_recalibration(probs, y, setup=args.setup, df=args.df)
    report["flexible"] = {
        "setup": recal.setup,
        "df": recal.df,
        "eci_original": eci(probs, recal, y, "original"),
        "eci_rescaled": eci(probs, recal, y, "rescaled"),
        "warnings": list(recal.warnings),
    }
    outdir = _outdir(args)
    path = os.path.join(outdir, "calibration.json")
    _atomic_json(path, report)
    curves = calibration_curve_data(probs, recal, mode=args.mode)
    write_calibration_plots(os.path.join(outdir, "plots"), curves, args.mode)
    _write_manifest(outdir, args, [args.model, args.data])
    print(f"wrote {path} and plot data")
    return 0


def cmd_bootstrap(args):
    data, _ = load_dataset(args.data, outcome=args.outcome,
                           truth_prefix="truth_")
    spec = spec_from_label(args.family)
    result = bootstrap_correct(data, spec, B=args.B, seed=args.seed)
    outdir = _outdir(args)
    path = os.path.join(outdir, "bootstrap.json")
    _atomic_json(path, asdict(result))
    _write_manifest(outdir, args, [args.data])
    print(f"wrote {path} (B={args.B}, failures={result.failures})")
    return 0


def cmd_lrtest(args):
    data, _ = load_dataset(args.data, outcome=args.outcome,
                           truth_prefix="truth_")
    rows = []
    for q in range(data.Q):
        stat, df, p = lr_test_proportionality(data, q)
        rows.append({"predictor": data.column_names[q],
                     "statistic": stat, "df": df, "p_value": p})
    outdir = _outdir(args)
    path = os.path.join(outdir, "lrtest.json")
    _atomic_json(path, {"tests": rows})
    _write_manifest(outdir, args, [args.data])
    for r in rows:
        print(f"{r['predictor']}\tstat={r['statistic']:.4f}\t"
              f"df={r['df']}\tp={r['p_value']:.4g}")
    return 0


def cmd_study_large(args):
    reg = builtin_scenarios()
    if args.scenario is None:
        scenarios = [s for s in reg.values()
                     if s.truth_form == ("mlr" if args.truth == "mlr"
                                         else "clpo")]
    else:
        scenarios = [_scenario(args)]
    rows = large_sample_study(scenarios, families=args.families,
                              n=args.n, seed=args.seed)
    outdir = _outdir(args)
    write_study_json(os.path.join(outdir, "study.json"), rows)
    if args.format == "csv":
        write_study_csv(os.path.join(outdir, "study.csv"), rows)
    _write_manifest(outdir, args)
    print(f"wrote study results for {len(scenarios)} scenario(s) to {outdir}")
    return 0


def cmd_study_small(args):
    scenario = _scenario(args)
    rows = small_sample_study(
        scenario, families=args.families, n_dev=args.n_dev, reps=args.reps,
        n_eval=args.n_eval, seed=args.seed, workers=args.threads,
    )
    outdir = _outdir(args)
    write_study_json(os.path.join(outdir, "study.json"), rows)
    if args.format == "csv":
        write_study_csv(os.path.join(outdir, "study.csv"), rows)
    _write_manifest(outdir, args)
    print(f"wrote small-sample study ({args.reps} reps) to {outdir}")
    return 0


def cmd_scenarios_list(args):
    reg = builtin_scenarios()
    print("id\ttruth\tQ\tK\tkinds\tnominal_orc")
    for sid, s in reg.items():
        kinds = ("binary" if all(k == "binary" for k in s.kinds)
                 else "continuous")
        print(f"{sid}\t{s.truth_form}\t{s.Q}\t{s.K}\t{kinds}\t{s.nominal_orc}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="ordcal",
        description="Ordinal risk-prediction models: fitting, calibration "
                    "assessment, and simulation studies.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, seed=True, out=True):
        if seed:
            sp.add_argument("--seed", type=int, default=_default_seed())
        if out:
            sp.add_argument("--out", required=True,
                            help="output directory")

    sp = sub.add_parser("simulate", help="generate data from a scenario")
    sp.add_argument("--truth", choices=("mlr", "clpo"), required=True)
    sp.add_argument("--scenario", type=int, required=True)
    sp.add_argument("--n", type=int, required=True)
    add_common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a model to a CSV dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--family", choices=FAMILY_CHOICES, required=True)
    sp.add_argument("--outcome", default="y")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-iter", type=int, default=100)
    add_common(sp, seed=False)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="estimated risks for a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--outcome", default="y")
    add_common(sp, seed=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("calibrate", help="calibration report + plot data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--outcome", default="y")
    sp.add_argument("--setup", choices=SETUPS, default="mlr-reference")
    sp.add_argument("--df", type=int, default=4)
    sp.add_argument("--mode", choices=("category", "dichotomy"),
                    default="category")
    add_common(sp, seed=False)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("bootstrap", help="optimism-corrected performance")
    sp.add_argument("--data", required=True)
    sp.add_argument("--family", choices=FAMILY_CHOICES, required=True)
    sp.add_argument("--outcome", default="y")
    sp.add_argument("--B", type=int, default=200)
    add_common(sp)
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("lrtest-po",
                        help="per-variable proportional-odds LR test")
    sp.add_argument("--data", required=True)
    sp.add_argument("--outcome", default="y")
    add_common(sp, seed=False)
    sp.set_defaults(func=cmd_lrtest)

    sp = sub.add_parser("study", help="simulation studies")
    ssub = sp.add_subparsers(dest="study_kind", required=True)

    sp2 = ssub.add_parser("large-sample")
    sp2.add_argument("--truth", choices=("mlr", "clpo"), required=True)
    sp2.add_argument("--scenario", type=int, default=None)
    sp2.add_argument("--families", nargs="+", choices=FAMILY_CHOICES,
                     default=list(DEFAULT_FAMILIES))
    sp2.add_argument("--n", type=int, default=200_000)
    sp2.add_argument("--format", choices=("json", "csv"), default="json")
    add_common(sp2)
    sp2.set_defaults(func=cmd_study_large)

    sp2 = ssub.add_parser("small-sample")
    sp2.add_argument("--truth", choices=("mlr", "clpo"), required=True)
    sp2.add_argument("--scenario", type=int, required=True)
    sp2.add_argument("--families", nargs="+", choices=FAMILY_CHOICES,
                     default=list(DEFAULT_FAMILIES))
    sp2.add_argument("--n-dev", type=int, default=100)
    sp2.add_argument("--reps", type=int, default=200)
    sp2.add_argument("--n-eval", type=int, default=200_000)
    sp2.add_argument("--threads", type=int,
                     default=os.cpu_count() or 1)
    sp2.add_argument("--format", choices=("json", "csv"), default="json")
    add_common(sp2)
    sp2.set_defaults(func=cmd_study_small)

    sp = sub.add_parser("scenarios", help="scenario registry")
    ssub = sp.add_subparsers(dest="scenarios_kind", required=True)
    sp2 = ssub.add_parser("list")
    sp2.set_defaults(func=cmd_scenarios_list)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
