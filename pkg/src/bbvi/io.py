"""CSV and flat-text serialization of parameters, traces, samples and reports.

Every file starts with a ``#`` comment line (typically the resolved run
configuration) followed by a header row. Floats are written with ``repr`` so
they read back bit for bit.
"""
from __future__ import annotations

import csv

import numpy as np

from .families import MeanFieldFamily


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_rows(path, header, rows, comment=None):
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path):
    """Rows of a CSV written by :func:`write_rows` as dicts (comments skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_comment(path):
    with open(path) as fh:
        first = fh.readline()
    return first[2:].rstrip("\n") if first.startswith("# ") else None


def format_config(config: dict) -> str:
    return "config: " + "; ".join(f"{k}={config[k]}" for k in sorted(config))


def write_params(path, family: MeanFieldFamily, lam, comment=None):
    """Flat named-parameter format: one ``latent_id, coordinate, value`` row per entry."""
    rows = [(lid, coord, float(v)) for (lid, coord), v in zip(family.param_names(), lam)]
    write_rows(path, ["latent_id", "coordinate", "value"], rows, comment)


def read_params(path, family: MeanFieldFamily | None = None):
    """Read parameters; returns a vector in ``family`` order or a name -> value dict."""
    rows = read_rows(path)
    named = {(r["latent_id"], r["coordinate"]): float(r["value"]) for r in rows}
    if family is None:
        return named
    try:
        return np.array([named[key] for key in family.param_names()])
    except KeyError as err:
        raise ValueError(f"parameter file lacks {err.args[0]}") from None


def write_samples(path, model, samples, comment=None):
    """Chain samples in the flat named format with a leading sample index."""
    names = []
    for lat in model.latents:
        names += [(lat.id, f"value[{k}]") for k in range(lat.size)]
    rows = ((s, lid, coord, float(v))
            for s, row in enumerate(np.atleast_2d(samples))
            for (lid, coord), v in zip(names, row))
    write_rows(path, ["sample", "latent_id", "coordinate", "value"], rows, comment)


def read_samples(path, model):
    rows = read_rows(path)
    index = {}
    for lat in model.latents:
        sl = model.value_slice(lat.id)
        for k in range(lat.size):
            index[(lat.id, f"value[{k}]")] = sl.start + k
    n = 1 + max((int(r["sample"]) for r in rows), default=-1)
    out = np.full((n, model.n_values), np.nan)
    for r in rows:
        out[int(r["sample"]), index[(r["latent_id"], r["coordinate"])]] = float(r["value"])
    return out


def write_trace(path, trace, family: MeanFieldFamily | None = None, comment=None):
    """Trace CSV: iter, elbo, grad_norm, rho_mean plus optional per-latent variances."""
    header = ["iter", "elbo", "grad_norm", "rho_mean"]
    with_var = bool(trace.records) and trace.records[0].variance is not None and family is not None
    if with_var:
        header += [f"var:{lid}" for lid in family.latent_ids]
    rows = []
    for r in trace.records:
        row = [r.iteration, r.elbo, r.grad_norm, r.rho_mean]
        if with_var:
            row += list(r.variance)
        rows.append(row)
    write_rows(path, header, rows, comment)
