"""Error rates, their arithmetic, and threshold calibration.

Walks through APCER/BPCER/ACER/CCR on a handful of scores, checks that
published-style rows are internally consistent, and calibrates a
threshold for a 0.2% bona fide false-detection budget.

    python3 demos/02_metrics_and_thresholds.py
"""

from decimal import Decimal

import numpy as np

from padbench.metrics import (acer_from_rates, aggregate_folds, ccr_from_rates, evaluate, round_half_up,
                              threshold_at_fdr)


def main():
    scores = [0.95, 0.80, 0.40, 0.10, 0.05, 0.45]
    labels = ["printout", "synthetic", "diseased", "bona_fide", "bona_fide", "bona_fide"]
    r = evaluate(scores, labels, 0.4)  # a score equal to the threshold counts as an attack
    print("threshold 0.4:", r.confusion)
    print(f"  APCER {r.percent('apcer')}%  BPCER {r.percent('bpcer')}%  ACER {r.percent('acer')}%"
          f"  CCR {r.percent('ccr')}%")

    # a results row with 7,101 attacks and 5,331 bona fide samples
    apcer, bpcer = Decimal("12.08"), Decimal("0.90")
    print(f"\nACER from ({apcer}, {bpcer}) = {round_half_up(acer_from_rates(apcer, bpcer))}")
    ccr = 100 * ccr_from_rates(0.3271, 0.0094, 7101, 5331)
    print(f"CCR implied by APCER 32.71%, BPCER 0.94% = {round_half_up(ccr)}%")

    rng = np.random.default_rng(0)
    y = rng.random(4000) < 0.5
    s = np.clip(rng.normal(0.25 + 0.5 * y, 0.12), 0, 1)
    tau = threshold_at_fdr(s, y, 0.002)
    print(f"\ncalibrated threshold {tau:.4f}: bona fide false detections "
          f"{np.mean(s[~y] >= tau):.4%}, attacks caught {np.mean(s[y] >= tau):.2%}")
    print("no admissible observed score ->", threshold_at_fdr([0.2, 0.3], [0, 0], 0.0))

    folds = [evaluate(s[i::5], y[i::5], tau) for i in range(5)]
    agg = aggregate_folds(folds)
    print("\nfive-fold cells:", {k: agg.cell(k) for k in ("ccr", "apcer", "bpcer")})


if __name__ == "__main__":
    main()
