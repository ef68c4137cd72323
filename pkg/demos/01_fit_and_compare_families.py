"""Fit all eight ordinal model families to one simulated dataset.

Walks through the core workflow: pick a built-in scenario, simulate
development data, fit every family, and compare parameter counts,
log-likelihoods, and discrimination (ORC).  Also demonstrates two exact
relationships worth knowing: the non-proportional adjacent-category
model is a reparameterization of the multinomial logit, and the
stereotype model sits between the proportional and multinomial extremes.

Run:  python demos/01_fit_and_compare_families.py
"""

import numpy as np

from ordcal import (
    builtin_scenarios,
    fit,
    generate,
    orc,
    param_count,
    predict_probs,
    spec_from_label,
)

FAMILIES = ("mlr", "cl-po", "cl-np", "ac-po", "ac-np", "cr-po", "cr-np",
            "slm")


def main():
    scenario = builtin_scenarios()["mlr-2"]
    sim = generate(scenario, n=4000, seed=1)
    data = sim.dataset
    print(f"scenario {scenario.id}: n={data.n}, K={data.K} categories, "
          f"Q={data.Q} predictors")
    counts = data.category_counts()
    print("outcome counts:", dict(enumerate(counts, start=1)))
    print()

    print(f"{'family':8s} {'params':>6s} {'loglik':>10s} {'ORC':>7s} "
          f"{'converged':>9s}")
    probs = {}
    for label in FAMILIES:
        spec = spec_from_label(label)
        npar = param_count(spec, data.Q, data.K)
        try:
            model = fit(data, spec)
        except Exception as exc:
            print(f"{label:8s} {npar:6d} {'--':>10s} {'--':>7s}  "
                  f"failed: {exc}")
            continue
        P = predict_probs(model, data.predictors)
        probs[label] = P.values
        print(f"{label:8s} {npar:6d} {model.loglik:10.1f} "
              f"{orc(P, data.outcomes):7.4f} {str(model.converged):>9s}")

    print()
    gap = np.abs(probs["mlr"] - probs["ac-np"]).max()
    print("max |risk difference| between MLR and AC-NP "
          f"(same model, different parameterization): {gap:.2e}")
    print("note how the proportional families use far fewer parameters "
          "at a small log-likelihood cost on this truth.")


if __name__ == "__main__":
    main()
