"""The three calibration layers on a deliberately misspecified model.

Simulates multinomial-logit truth, fits a proportional-odds cumulative
model to it (a structural misspecification), and inspects calibration
on independent validation data at all three layers:

  1. weak calibration      - intercept/slope per category and per
                             cumulative dichotomy;
  2. model-specific        - recalibration inside the model's own
                             family (identity on development data);
  3. flexible (spline)     - per-case observed proportions, the ECI
                             summary, and exported plot data.

Run:  python demos/02_calibration_layers.py
"""

import numpy as np

from ordcal import (
    builtin_scenarios,
    calibration_curve_data,
    eci,
    fit,
    flexible_recalibration,
    generate,
    model_specific_calibration,
    predict_probs,
    rmspe,
    spec_from_label,
    true_risks,
    weak_calibration,
)


def main():
    scenario = builtin_scenarios()["mlr-3"]
    dev = generate(scenario, n=3000, seed=7).dataset
    val = generate(scenario, n=20000, seed=8).dataset

    model = fit(dev, spec_from_label("cl-po"))
    P_dev = predict_probs(model, dev.predictors)
    P_val = predict_probs(model, val.predictors)

    print("proportional-odds cumulative model on multinomial truth\n")

    print("layer 1: weak calibration on validation data")
    for k in range(1, val.K + 1):
        c = weak_calibration(P_val, val.outcomes, ("category", k))
        print(f"  category {k}:  intercept {c.intercept:+.3f}   "
              f"slope {c.slope:.3f}")
    for k in range(2, val.K + 1):
        c = weak_calibration(P_val, val.outcomes, ("dichotomy", k))
        print(f"  P(Y>={k}):     intercept {c.intercept:+.3f}   "
              f"slope {c.slope:.3f}")

    print("\nlayer 2: model-specific calibration")
    print("  on development data (identity by construction):")
    for c in model_specific_calibration(model, dev):
        print(f"    lp {c.target[1]}:  intercept {c.intercept:+.4f}   "
              f"slope {c.slope:.4f}")
    print("  on validation data (reveals the overfitting/misfit):")
    for c in model_specific_calibration(model, val):
        print(f"    lp {c.target[1]}:  intercept {c.intercept:+.4f}   "
              f"slope {c.slope:.4f}")

    print("\nlayer 3: flexible spline recalibration and ECI")
    recal = flexible_recalibration(P_val, val.outcomes)
    print(f"  rescaled ECI: {eci(P_val, recal, val.outcomes):.4f}   "
          f"(0 = perfectly calibrated)")
    truth = true_risks(scenario, val.predictors)
    print(f"  rMSPE vs generative truth: {rmspe(P_val, truth):.4f}")

    curves = calibration_curve_data(P_val, recal, mode="category")
    print(f"  calibration-plot data: {len(curves)} curves; category 1 "
          f"smoother at 5 grid points:")
    c0 = curves[0]
    for i in np.linspace(0, len(c0.grid) - 1, 5).astype(int):
        print(f"    predicted {c0.grid[i]:.3f} -> observed "
              f"{c0.smoothed[i]:.3f}")


if __name__ == "__main__":
    main()
