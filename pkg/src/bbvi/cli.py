"""Command-line front end: ``bbvi generate | fit | variance | eval``.

Every command is a pure function of its input files, flags and seed. Flags
can also come from a flat ``key=value`` config file (``--config``); flags on
the command line win over the file, which wins over built-in defaults.
Output goes to ``--out``, falling back to ``$BBVI_OUTPUT_DIR`` and then the
current directory. Existing files are only replaced with ``--force``.

Exit codes: 0 ok, 1 usage error, 2 diverged run, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
from scipy.special import logsumexp

from . import estimators as est
from . import io, zoo
from .baseline import ChainConfig, ProposalConfig, run_chain
from .families import normal_log_pdf
from .optimize import DivergedRunError, RunConfig, run_bbvi

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "BBVI_OUTPUT_DIR"
MODELS = zoo.MODEL_NAMES + ("conjugate-oracle",)
ENGINES = {"bbvi-naive": "naive", "bbvi-rb": "rb", "bbvi-rbcv": "rb_cv",
           "bbvi-subsampled": "subsampled", "mh-gibbs": None}
# weight prior and time-series flag follow from the model name
_HYPER = [f for f in dataclasses.fields(zoo.FactorModelConfig)
          if f.name not in ("weight_prior", "time_series", "max_labs")]
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    """An input file is missing fields or does not match the model."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text):
    if isinstance(text, bool):
        return text
    try:
        return _BOOL[str(text).lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"not a boolean: {text!r}") from None


def _floats(text):
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--config", help="key=value file with default flag values")
    p.add_argument("--seed", type=int, help="random seed (required)")
    p.add_argument("--model", choices=MODELS, default="gamma-normal-ts")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--force", type=_bool, nargs="?", const=True, default=False,
                   help="overwrite existing outputs")
    g = p.add_argument_group("model hyperparameters")
    for f in _HYPER:
        kind = int if f.type in ("int", int) else float
        g.add_argument("--" + f.name.replace("_", "-"), type=kind, default=None)
    g.add_argument("--prior-mean", type=float, default=0.0, help="conjugate-oracle prior mean")
    g.add_argument("--prior-var", type=float, default=1.0, help="conjugate-oracle prior variance")
    g.add_argument("--lik-var", type=float, default=1.0, help="conjugate-oracle likelihood variance")
    g.add_argument("--observations", type=_floats, default="1.0",
                   help="conjugate-oracle observations, comma separated")


def _add_data(p):
    p.add_argument("--data", help="directory holding data.csv and split.csv")


def _add_run(p):
    g = p.add_argument_group("inference")
    g.add_argument("--engine", choices=sorted(ENGINES), default="bbvi-rbcv")
    g.add_argument("--n-samples", type=int, default=1000)
    g.add_argument("--max-iterations", type=int, default=1000)
    g.add_argument("--threshold", type=float, default=0.01)
    g.add_argument("--schedule", choices=("adagrad", "robbins-monro"), default="adagrad")
    g.add_argument("--eta", type=float, default=None,
                   help="step scale (default 1 for Normal-weight models, 0.5 for gamma ones)")
    g.add_argument("--rm-tau", type=float, default=1.0)
    g.add_argument("--rm-kappa", type=float, default=0.9)
    g.add_argument("--batch-size", type=int, default=25)
    g.add_argument("--cv-holdout", type=_bool, nargs="?", const=True, default=False)
    g.add_argument("--time-budget", type=float, default=None, help="seconds")
    g.add_argument("--sweeps", type=int, default=1000)
    g.add_argument("--burn-in", type=int, default=100)
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--proposal-scale", type=float, default=0.1)
    g.add_argument("--positive-proposal", choices=("gamma", "normal"), default="gamma")
    g.add_argument("--fit-fraction", type=float, default=0.75)
    g.add_argument("--n-draws", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bbvi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="synthetic longitudinal dataset")
    _add_common(p)
    p.add_argument("--sparsity", type=float, default=0.7)
    p.add_argument("--offset-mean", type=float, default=0.0)
    p.add_argument("--weights", type=_floats, default=None, help="L*K weight values, row major")

    p = sub.add_parser("fit", help="fit a model with BBVI or MH-within-Gibbs")
    _add_common(p)
    _add_data(p)
    _add_run(p)

    p = sub.add_parser("variance", help="paired estimator variance along a training run")
    _add_common(p)
    _add_data(p)
    _add_run(p)
    p.add_argument("--checkpoints", type=int, default=10)
    p.add_argument("--every", type=int, default=10, help="iterations between checkpoints")

    p = sub.add_parser("eval", help="held-out predictive likelihood of a fit")
    _add_common(p)
    _add_data(p)
    _add_run(p)
    p.add_argument("--fit", help="directory written by 'bbvi fit'")
    p.add_argument("--local-iterations", type=int, default=None,
                   help="local fitting iterations (default --max-iterations)")
    p.add_argument("--heldout", type=_floats, default=None,
                   help="conjugate-oracle held-out observations")
    return parser


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k: v for k, v in values.items() if k != "command"})
        args = parser.parse_args(argv)
        for a in sub._actions:
            # defaults bypass the choices check
            if a.choices is not None and getattr(args, a.dest) not in a.choices:
                raise UsageError(f"invalid {a.dest} {getattr(args, a.dest)!r} in {args.config}")
    if args.seed is None:
        raise UsageError("--seed is required")
    return args


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolved(args) -> dict:
    """Every setting that influences the output, with defaults filled in."""
    d = {k: v for k, v in vars(args).items() if k not in ("config", "force", "out")}
    hyper = {f.name for f in _HYPER}
    if args.model == "conjugate-oracle":
        d = {k: v for k, v in d.items() if k not in hyper}
    else:
        cfg = factor_config(args, generating=args.command == "generate")
        d.update({k: getattr(cfg, k) for k in hyper})
        for k in ("prior_mean", "prior_var", "lik_var", "observations"):
            d.pop(k, None)
        if d.get("eta", 0) is None:
            d["eta"] = cfg.adagrad_eta
    if d.get("eta", 0) is None:
        d["eta"] = 0.5
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = ",".join(repr(float(x)) for x in v)
    return d


def out_dir(args):
    path = args.out or os.environ.get(OUTPUT_ENV) or "."
    os.makedirs(path, exist_ok=True)
    return path


def _targets(args, names):
    base = out_dir(args)
    paths = [os.path.join(base, n) for n in names]
    if not args.force:
        existing = [p for p in paths if os.path.exists(p)]
        if existing:
            raise FileExistsError(f"{existing[0]} exists (use --force to overwrite)")
    return paths


def factor_config(args, generating=False) -> zoo.FactorModelConfig:
    overrides = {f.name: getattr(args, f.name) for f in _HYPER if getattr(args, f.name) is not None}
    if generating and "sigma_x" not in overrides:
        overrides["sigma_x"] = zoo.DATA_SIGMA_X
    try:
        return zoo.model_config(args.model, **overrides)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


def load_dataset(args):
    if not args.data:
        raise UsageError(f"--data is required for model {args.model}")
    return _read(zoo.LongitudinalDataset.read_csv, os.path.join(args.data, "data.csv"),
                 os.path.join(args.data, "split.csv"))


def _read(reader, path, *extra):
    try:
        return reader(path, *extra)
    except (KeyError, ValueError, TypeError) as err:
        raise ArtifactError(f"{path}: {err}") from None


def run_config(args, config=None) -> RunConfig:
    eta = args.eta
    if eta is None:
        eta = config.adagrad_eta if config is not None else 0.5
    try:
        return RunConfig(estimator=ENGINES[args.engine] or "rb_cv", n_samples=args.n_samples,
                         max_iterations=args.max_iterations, threshold=args.threshold,
                         schedule=args.schedule, eta=eta, rm_tau=args.rm_tau,
                         rm_kappa=args.rm_kappa, seed=args.seed, batch_size=args.batch_size,
                         cv_holdout=args.cv_holdout, time_budget=args.time_budget)
    except ValueError as err:
        raise UsageError(str(err)) from None


def chain_config(args) -> ChainConfig:
    try:
        return ChainConfig(sweeps=args.sweeps, burn_in=args.burn_in, thin=args.thin, seed=args.seed,
                           proposal=ProposalConfig(args.proposal_scale, positive=args.positive_proposal),
                           time_budget=args.time_budget)
    except ValueError as err:
        raise UsageError(str(err)) from None


def protocol(args) -> zoo.PredictiveProtocol:
    try:
        return zoo.PredictiveProtocol(args.fit_fraction, args.n_draws, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from None


def oracle(args, hierarchical=None):
    hier = ENGINES[args.engine] == "subsampled" if hierarchical is None else hierarchical
    try:
        return zoo.build_conjugate_oracle(args.prior_mean, args.prior_var, args.lik_var,
                                          args.observations, hierarchical=hier)
    except ValueError as err:
        raise UsageError(str(err)) from None


def oracle_family(model):
    return model.default_family()


def problem(args):
    """(model, family, lam0, factor config or None) for the fitting commands."""
    if args.model == "conjugate-oracle":
        model, _ = oracle(args)
        family = oracle_family(model)
        cfg = None
    else:
        cfg = factor_config(args)
        data = load_dataset(args)
        train = data.select(patients=data.patients_in("train") or data.patients)
        model = zoo.build_model(cfg, train)
        family = zoo.default_family(model)
    lam0 = family.init_params(np.random.default_rng(args.seed))
    return model, family, lam0, cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    if args.model == "conjugate-oracle":
        raise UsageError("generate needs one of the factor models")
    cfg = factor_config(args, generating=True)
    try:
        ds, truth = zoo.generate_synthetic(cfg, args.sparsity, args.seed, args.offset_mean,
                                           args.weights)
    except ValueError as err:
        raise UsageError(str(err)) from None
    data_path, split_path, truth_path = _targets(args, ["data.csv", "split.csv", "truth.csv"])
    comment = io.format_config(resolved(args))
    ds.write_csv(data_path, comment)
    ds.write_split(split_path, comment)
    rows = [(lid, f"value[{k}]", float(v)) for lid, val in truth.items()
            for k, v in enumerate(np.atleast_1d(val))]
    io.write_rows(truth_path, ["latent_id", "coordinate", "value"], rows, comment)
    return EXIT_OK


def cmd_fit(args):
    comment = io.format_config(resolved(args))
    if ENGINES[args.engine] is None:
        return _fit_chain(args, comment)
    model, family, lam0, cfg = problem(args)
    rc = run_config(args, cfg)
    params_path, trace_path = _targets(args, ["params.csv", "trace.csv"])
    try:
        lam, trace = run_bbvi(model, family, lam0, rc)
    except DivergedRunError as err:
        io.write_trace(trace_path, err.trace, comment=comment)
        io.write_params(params_path, family, err.lam, comment)
        print(f"bbvi: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    io.write_trace(trace_path, trace, comment=comment)
    io.write_params(params_path, family, lam, comment)
    return EXIT_OK


def _fit_chain(args, comment):
    if args.model == "conjugate-oracle":
        model, _ = oracle(args, hierarchical=False)
    else:
        data = load_dataset(args)
        model, _ = zoo.gibbs_model(factor_config(args), data, protocol(args))
    cc = chain_config(args)
    samples_path, acc_path = _targets(args, ["samples.csv", "acceptance.csv"])
    res = run_chain(model, cc)
    io.write_samples(samples_path, model, res.samples, comment)
    io.write_rows(acc_path, ["latent_id", "acceptance"],
                  zip(model.latent_ids, res.acceptance.tolist()), comment)
    return EXIT_OK


def cmd_variance(args):
    """Paired per-coordinate term variances of the three estimators along a run.

    One training run with the configured engine provides a checkpoint every
    ``--every`` iterations. At each checkpoint a common batch of ``n_samples``
    draws feeds the naive, Rao-Blackwellized and controlled estimators.
    """
    if args.checkpoints < 1 or args.every < 1:
        raise UsageError("--checkpoints and --every must be positive")
    if ENGINES[args.engine] is None:
        raise UsageError("variance needs a bbvi engine")
    model, family, lam0, cfg = problem(args)
    rc = dataclasses.replace(run_config(args, cfg), threshold=1e-300, time_budget=None,
                             max_iterations=args.every * (args.checkpoints - 1),
                             snapshot_every=args.every)
    (path,) = _targets(args, ["variance.csv"])
    _, trace = run_bbvi(model, family, lam0, rc)
    rng = np.random.default_rng(args.seed + 1)
    rows = []
    for c in range(args.checkpoints):
        iteration = c * args.every
        lam = trace.snapshots[iteration]
        batch = est.draw_batch(model, family, lam, args.n_samples, rng)
        for kind, g in est.paired_estimates(model, family, lam, batch).items():
            for it, coord, _, var, a in est.diagnostic_rows(g, family, iteration):
                rows.append((it, kind, coord, var, a))
    io.write_rows(path, ["iteration", "estimator", "coordinate", "variance", "a_star"], rows,
                  io.format_config(resolved(args)))
    return EXIT_OK


def cmd_eval(args):
    if not args.fit:
        raise UsageError("--fit is required")
    comment = io.format_config(resolved(args))
    chain = ENGINES[args.engine] is None
    if args.model == "conjugate-oracle":
        rows = _eval_oracle(args, chain)
    else:
        rows = _eval_factor(args, chain)
    (path,) = _targets(args, ["eval.csv"])
    io.write_rows(path, ["patient_id", "n_obs", "log_predictive"], rows, comment)
    return EXIT_OK


def _eval_oracle(args, chain):
    if not args.heldout:
        raise UsageError("--heldout is required for conjugate-oracle")
    model, _ = oracle(args, hierarchical=False if chain else None)
    held = np.asarray(args.heldout)
    sd = np.sqrt(args.lik_var)
    if chain:
        z = _read(io.read_samples, os.path.join(args.fit, "samples.csv"), model)[:, 0]
    else:
        family = oracle_family(model)
        lam = _read(io.read_params, os.path.join(args.fit, "params.csv"), family)
        z = family.sample(lam, args.n_draws, np.random.default_rng(args.seed))[:, 0]
    F = normal_log_pdf(held[None, :], z[:, None], sd)
    per_obs = logsumexp(F, axis=0) - np.log(F.shape[0])
    return [("all", int(held.size), float(per_obs.mean()))]


def _eval_factor(args, chain):
    cfg = factor_config(args)
    data = load_dataset(args)
    proto = protocol(args)
    if chain:
        model, held = zoo.gibbs_model(cfg, data, proto)
        Z = _read(io.read_samples, os.path.join(args.fit, "samples.csv"), model)
        if Z.shape[0] == 0:
            raise UsageError("sample file holds no samples")
        res = zoo.predictive_from_draws(cfg, held, zoo.restrict_draws(model, Z, held, cfg))
    else:
        train = data.select(patients=data.patients_in("train") or data.patients)
        family = zoo.default_family(zoo.build_model(cfg, train))
        lam = _read(io.read_params, os.path.join(args.fit, "params.csv"), family)
        rc = run_config(args, cfg)
        if args.local_iterations is not None:
            rc = dataclasses.replace(rc, max_iterations=args.local_iterations)
        test = data.select(patients=data.patients_in("test"))
        res = zoo.predictive_likelihood(cfg, family, lam, test, proto, rc)
    return res.rows()


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "variance": cmd_variance, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"bbvi: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedRunError as err:
        print(f"bbvi: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ArtifactError) as err:
        print(f"bbvi: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
