"""Fit the Normal-Normal model with each estimator and compare to the exact posterior.

Run with ``python demos/conjugate_walkthrough.py``.
"""
import numpy as np

from bbvi import zoo
from bbvi.baseline import ChainConfig, ProposalConfig, run_chain
from bbvi.optimize import RunConfig, run_bbvi


def main():
    model, post = zoo.build_conjugate_oracle(0.0, 1.0, 1.0, [1.0])
    family = model.default_family()
    print(f"exact posterior: mean {post.mean:.4f} var {post.var:.4f}")
    for kind in ("naive", "rb", "rb_cv"):
        cfg = RunConfig(estimator=kind, n_samples=200, eta=0.5, max_iterations=2000, seed=0)
        lam, trace = run_bbvi(model, family, family.init_params(np.random.default_rng(0)), cfg)
        mean, var = family.moments(lam)
        print(f"bbvi {kind:6s} mean {mean[0]:.4f} var {var[0]:.4f} "
              f"after {len(trace)} iterations (converged={trace.converged})")
    res = run_chain(model, ChainConfig(sweeps=51_000, burn_in=1000, seed=0,
                                       proposal=ProposalConfig(1.0), max_stored=1))
    print(f"mh-gibbs     mean {res.mean[0]:.4f} var {res.var[0]:.4f} "
          f"acceptance {res.acceptance[0]:.2f}")


if __name__ == "__main__":
    main()
