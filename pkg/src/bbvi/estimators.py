"""Score-function estimators of the ELBO gradient.

All estimators read one :class:`SampleBatch`, so the per-sample factor
log-densities and scores are computed once and the estimators can be compared
on identical draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .families import MeanFieldFamily
from .model import ModelSpec

ESTIMATORS = ("naive", "rb", "rb_cv", "subsampled")


class SupportMismatchError(ValueError):
    """A variational draw fell outside the model's support."""


@dataclass
class SampleBatch:
    """``S`` joint draws from ``q(z | lam)`` with cached log-densities and scores.

    Attributes
    ----------
    Z : (S, n_values) latent values
    logq : (S, n_latents) per-latent variational log-densities
    score : (S, n_params) scores with respect to the unconstrained parameters
    F : (S, n_members) factor-member log values (0 for unevaluated members)
    members : boolean mask of evaluated members, or None for all
    """

    Z: np.ndarray
    logq: np.ndarray
    score: np.ndarray
    F: np.ndarray
    members: np.ndarray | None = None

    @property
    def S(self) -> int:
        return self.Z.shape[0]

    def subset(self, rows) -> "SampleBatch":
        return SampleBatch(self.Z[rows], self.logq[rows], self.score[rows], self.F[rows], self.members)


@dataclass
class GradientEstimate:
    """Gradient vector plus per-coordinate diagnostics.

    ``term_variance`` is the empirical (n-1) variance of the per-sample terms
    whose mean is the gradient. ``a_star`` holds the control-variate scale per
    latent when one was applied.
    """

    gradient: np.ndarray
    term_variance: np.ndarray
    kind: str
    a_star: np.ndarray | None = None
    cv_degenerate: np.ndarray | None = None
    elbo: float = float("nan")
    extra: dict = field(default_factory=dict)


def draw_batch(model: ModelSpec, family: MeanFieldFamily, lam, S: int, rng,
               members=None) -> SampleBatch:
    """Sample ``S`` draws and cache everything the estimators need."""
    Z = family.sample(lam, S, rng)
    return batch_from_values(model, family, lam, Z, members)


def batch_from_values(model, family, lam, Z, members=None) -> SampleBatch:
    logq = family.latent_log_pdf(lam, Z)
    H = family.score(lam, Z)
    F = model.evaluate(Z, members)
    if not np.all(np.isfinite(F)):
        bad = np.flatnonzero(~np.isfinite(F).all(axis=0))
        names = [model.member_names[j] for j in bad[:3]]
        raise SupportMismatchError(f"non-finite model log density at draws from q: {names}")
    if not np.all(np.isfinite(logq)):
        raise SupportMismatchError("non-finite variational log density")
    return SampleBatch(Z, logq, H, F, members)


def _term_variance(terms):
    if terms.shape[0] < 2:
        return np.zeros(terms.shape[1])
    return terms.var(axis=0, ddof=1)


def naive_gradient(model: ModelSpec, family: MeanFieldFamily, lam, batch: SampleBatch) -> GradientEstimate:
    """Plain score-function estimator over the whole parameter vector."""
    logp = model.log_joint(batch.Z, batch.F)
    logq = np.cumsum(batch.logq, axis=1)[:, -1] if batch.logq.shape[1] else np.zeros(batch.S)
    w = logp - logq
    terms = batch.score * w[:, None]
    return GradientEstimate(terms.mean(axis=0), _term_variance(terms), "naive", elbo=float(w.mean()))


def _rb_terms(model, family, batch, weights=None, latent_scale=None):
    F = batch.F if weights is None else batch.F * weights[None, :]
    local = model.local_log_joints(F)
    logq = batch.logq if latent_scale is None else batch.logq * latent_scale[None, :]
    return batch.score * (local - logq)[:, family.param_latent]


def rb_gradient(model: ModelSpec, family: MeanFieldFamily, lam, batch: SampleBatch) -> GradientEstimate:
    """Per-latent estimator that keeps only the factors containing that latent."""
    terms = _rb_terms(model, family, batch)
    return GradientEstimate(terms.mean(axis=0), _term_variance(terms), "rb",
                            elbo=_elbo_from_batch(model, batch))


def cv_scale(f_terms, h_terms):
    """Control-variate scale ``sum_d Cov(f^d, h^d) / sum_d Var(h^d)``.

    ``f_terms`` and ``h_terms`` have shape ``(S, d)`` (or ``(S,)``). Returns
    ``(a_star, degenerate)``; when the summed variance is zero the scale is 0
    and ``degenerate`` is True.
    """
    f = np.asarray(f_terms, dtype=float)
    h = np.asarray(h_terms, dtype=float)
    if f.ndim == 1:
        f, h = f[:, None], h[:, None]
    if f.shape[0] < 2:
        raise ValueError("control variates need at least two samples")
    fc = f - f.mean(axis=0)
    hc = h - h.mean(axis=0)
    n = f.shape[0] - 1
    cov = (fc * hc).sum(axis=0) / n
    var = (hc * hc).sum(axis=0) / n
    v = var.sum()
    if v <= 0:
        return 0.0, True
    return float(cov.sum() / v), False


def _cv_scales(f, h, param_latent, n_latents):
    """Vectorized :func:`cv_scale` for every latent at once."""
    fc = f - f.mean(axis=0)
    hc = h - h.mean(axis=0)
    n = f.shape[0] - 1
    cov = np.bincount(param_latent, (fc * hc).sum(axis=0) / n, minlength=n_latents)
    var = np.bincount(param_latent, (hc * hc).sum(axis=0) / n, minlength=n_latents)
    degenerate = ~(var > 0)
    a = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, var))
    return a, degenerate


def _controlled(f, h, family, a_star=None, holdout=False):
    S = f.shape[0]
    if S < 2:
        raise ValueError("control variates need S >= 2")
    if a_star is not None:
        a = np.broadcast_to(np.asarray(a_star, dtype=float), (family.n_latents,)).copy()
        degenerate = np.zeros(family.n_latents, dtype=bool)
        rows = slice(None)
    elif holdout:
        m = max(2, S // 10)
        if S - m < 1:
            raise ValueError("held-out control-variate scale needs S >= 3")
        a, degenerate = _cv_scales(f[:m], h[:m], family.param_latent, family.n_latents)
        rows = slice(m, None)
    else:
        a, degenerate = _cv_scales(f, h, family.param_latent, family.n_latents)
        rows = slice(None)
    terms = f[rows] - a[family.param_latent][None, :] * h[rows]
    return terms, a, degenerate


def rb_cv_gradient(model: ModelSpec, family: MeanFieldFamily, lam, batch: SampleBatch,
                   a_star=None, holdout=False) -> GradientEstimate:
    """Rao-Blackwellized estimator with the score as control variate.

    ``a_star`` forces the per-latent scale (e.g. 0 disables the control);
    ``holdout`` estimates the scale on the first ``max(2, S // 10)`` draws and
    averages the gradient over the rest.
    """
    f = _rb_terms(model, family, batch)
    terms, a, degenerate = _controlled(f, batch.score, family, a_star, holdout)
    return GradientEstimate(terms.mean(axis=0), _term_variance(terms), "rb_cv",
                            a_star=a, cv_degenerate=degenerate,
                            elbo=_elbo_from_batch(model, batch))


def _elbo_from_batch(model, batch, weights=None, latent_scale=None):
    F = batch.F if weights is None else batch.F * weights[None, :]
    logq = batch.logq if latent_scale is None else batch.logq * latent_scale[None, :]
    return float((model.log_joint(batch.Z, F) - logq.sum(axis=1)).mean())


def subsample_weights(model: ModelSpec, blocks):
    """Member weights and latent scales for a set of sampled observation blocks.

    Global-scope factors keep weight 1; factors scoped to a sampled block get
    ``n / |blocks|``; all others 0. Local latents of sampled blocks are scaled
    by ``n / |blocks|`` and unsampled locals by 0.
    """
    n = model.n_observations
    if n <= 0:
        raise ValueError("subsampling needs a hierarchical model with n >= 1")
    blocks = np.unique(np.asarray(blocks, dtype=int))
    if blocks.size == 0 or blocks.min() < 0 or blocks.max() >= n:
        raise ValueError("observation indices out of range")
    scale = n / blocks.size
    active = np.zeros(n, dtype=bool)
    active[blocks] = True
    mb = model.member_blocks
    weights = np.where(mb < 0, 1.0, 0.0)
    in_batch = (mb >= 0) & active[np.maximum(mb, 0)]
    weights[in_batch] = scale
    lb = np.array([-1 if lat.block is None else lat.block for lat in model.latents], dtype=int)
    latent_scale = np.where(lb < 0, 1.0, 0.0)
    local_in = (lb >= 0) & active[np.maximum(lb, 0)]
    latent_scale[local_in] = scale
    return weights, latent_scale


def subsampled_gradient(model: ModelSpec, family: MeanFieldFamily, lam, batch: SampleBatch,
                        blocks, control_variate=True, a_star=None, holdout=False) -> GradientEstimate:
    """Noisy gradient from a subsample of observation blocks.

    Factors of the sampled blocks are scaled by ``n / |blocks|``; gradients of
    the locals of unsampled blocks are exactly zero. The batch only needs
    factor values for global-scope members and members of sampled blocks.
    """
    weights, latent_scale = subsample_weights(model, np.atleast_1d(blocks))
    f = _rb_terms(model, family, batch, weights, latent_scale)
    elbo = _elbo_from_batch(model, batch, weights, latent_scale)
    if not control_variate and a_star is None:
        return GradientEstimate(f.mean(axis=0), _term_variance(f), "subsampled", elbo=elbo)
    terms, a, degenerate = _controlled(f, batch.score, family, a_star, holdout)
    return GradientEstimate(terms.mean(axis=0), _term_variance(terms), "subsampled",
                            a_star=a, cv_degenerate=degenerate, elbo=elbo)


def subsample_members(model: ModelSpec, blocks):
    weights, _ = subsample_weights(model, blocks)
    return weights != 0


def sample_blocks(model: ModelSpec, batch_size: int, rng):
    """Uniform subsample of observation blocks without replacement."""
    n = model.n_observations
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def estimate(kind, model, family, lam, S, rng, batch_size=25, holdout=False) -> GradientEstimate:
    """Draw a batch and apply the named estimator."""
    if kind == "subsampled":
        blocks = sample_blocks(model, batch_size, rng)
        batch = draw_batch(model, family, lam, S, rng, subsample_members(model, blocks))
        return subsampled_gradient(model, family, lam, batch, blocks,
                                   control_variate=S >= 2, holdout=holdout)
    batch = draw_batch(model, family, lam, S, rng)
    if kind == "naive":
        return naive_gradient(model, family, lam, batch)
    if kind == "rb":
        return rb_gradient(model, family, lam, batch)
    if kind == "rb_cv":
        return rb_cv_gradient(model, family, lam, batch, holdout=holdout)
    raise ValueError(f"unknown estimator {kind!r}; expected one of {ESTIMATORS}")


def estimator_variance(model, family, lam, kind, S, R, rng, batch_size=25) -> np.ndarray:
    """Per-coordinate variance of the ``S``-sample estimator across ``R`` replicates."""
    if R < 2:
        raise ValueError("need R >= 2 replicates")
    grads = np.array([estimate(kind, model, family, lam, S, rng, batch_size).gradient
                      for _ in range(R)])
    return grads.var(axis=0, ddof=1)


def paired_estimates(model, family, lam, batch: SampleBatch) -> dict:
    """Naive, Rao-Blackwellized and controlled estimates on one batch."""
    return {
        "naive": naive_gradient(model, family, lam, batch),
        "rb": rb_gradient(model, family, lam, batch),
        "rb_cv": rb_cv_gradient(model, family, lam, batch),
    }


def diagnostic_rows(est: GradientEstimate, family: MeanFieldFamily, iteration: int):
    """Rows ``(iteration, coordinate, estimator, variance, a_star)``."""
    rows = []
    for k, (lid, coord) in enumerate(family.param_names()):
        a = est.a_star[family.param_latent[k]] if est.a_star is not None else float("nan")
        rows.append((iteration, f"{lid}:{coord}", est.kind, float(est.term_variance[k]), float(a)))
    return rows
