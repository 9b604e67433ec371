"""Per-coordinate gradient variance of the three estimators along a training run.

Trains the Gamma-Normal-TS model on a small synthetic dataset and, every ten
iterations, draws one batch shared by all estimators and prints the median
term variance of each. Run with ``python demos/variance_reduction.py``.
"""
import dataclasses

import numpy as np

from bbvi import estimators as est
from bbvi import zoo
from bbvi.optimize import RunConfig


def main(seed=0):
    cfg = zoo.model_config("gamma-normal-ts")
    ds, _ = zoo.generate_synthetic(dataclasses.replace(cfg, sigma_x=zoo.DATA_SIGMA_X), 0.7, seed=seed)
    rc = RunConfig(n_samples=1000, max_iterations=50, threshold=1e-12, seed=seed)
    model, family, _, trace = zoo.train_model(cfg, ds, rc)
    rng = np.random.default_rng(seed + 1)
    print(f"{'iter':>5} {'naive':>11} {'rb':>11} {'rb_cv':>11}")
    for it in sorted(trace.snapshots):
        lam = trace.snapshots[it]
        g = est.paired_estimates(model, family, lam, est.draw_batch(model, family, lam, 1000, rng))
        med = [np.median(g[k].term_variance) for k in ("naive", "rb", "rb_cv")]
        print(f"{it:5d} " + " ".join(f"{v:11.3e}" for v in med))


if __name__ == "__main__":
    main()
