"""Held-out predictive likelihood of BBVI and MH-within-Gibbs under one time budget.

Run with ``python demos/predictive_comparison.py [seconds]`` (default 30).
"""
import dataclasses
import sys

from bbvi import zoo
from bbvi.baseline import ChainConfig, ProposalConfig, run_chain
from bbvi.optimize import RunConfig


def main(budget=30.0, seed=1):
    cfg = zoo.model_config("gamma-normal-ts")
    ds, _ = zoo.generate_synthetic(dataclasses.replace(cfg, sigma_x=zoo.DATA_SIGMA_X), 0.7, seed=seed)
    proto = zoo.PredictiveProtocol(n_draws=1000, seed=seed)

    local_budget = 0.15 * budget
    rc = RunConfig(n_samples=1000, eta=cfg.adagrad_eta, max_iterations=10**9, threshold=1e-12,
                   seed=seed, time_budget=budget - local_budget)
    _, family, lam, trace = zoo.train_model(cfg, ds, rc)
    local = dataclasses.replace(rc, max_iterations=1000, time_budget=local_budget)
    test = ds.select(patients=ds.patients_in("test"))
    bbvi = zoo.predictive_likelihood(cfg, family, lam, test, proto, local).aggregate
    print(f"bbvi:     {bbvi:9.3f} per held-out lab ({len(trace)} iterations)")

    model, held = zoo.gibbs_model(cfg, ds, proto)
    res = run_chain(model, ChainConfig(sweeps=10**9, burn_in=1000, thin=10, seed=seed,
                                       time_budget=budget, proposal=ProposalConfig(0.1),
                                       max_stored=1000))
    Z = zoo.restrict_draws(model, res.samples, held, cfg)
    gibbs = zoo.predictive_from_draws(cfg, held, Z).aggregate
    print(f"mh-gibbs: {gibbs:9.3f} per held-out lab ({res.sweeps_done} sweeps)")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 30.0)
