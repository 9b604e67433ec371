"""Variational factor distributions and the mean-field family built from them.

Every factor is stored in an unconstrained coordinate system: a factor over
``d`` scalars owns ``2 * d`` parameters laid out as ``[first..., second...]``.
Positive parameters are kept as logs and scores are taken with respect to the
unconstrained coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_TINY = np.finfo(float).tiny


class InvalidParameterError(ValueError):
    """Raised for non-finite or out-of-range distribution parameters."""


class SupportError(ValueError):
    """Raised when a value lies outside the support where a score is requested."""


def ordered_sum(x, axis=-1):
    """Sum along ``axis`` in ascending index order.

    ``np.sum`` uses pairwise summation, whose grouping depends on the array
    length; the cumulative sum is strictly left to right.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[axis] == 0:
        return np.sum(x, axis=axis)
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


def gammae_to_shape_rate(mean, variance):
    """Map a gamma mean/variance pair to (shape, rate)."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(variance))):
        raise InvalidParameterError("mean and variance must be finite")
    if np.any(mean <= 0) or np.any(variance <= 0):
        raise InvalidParameterError("mean and variance must be positive")
    shape = mean * mean / variance
    rate = mean / variance
    if shape.ndim == 0:
        return float(shape), float(rate)
    return shape, rate


def gamma_log_pdf(z, shape, rate):
    """Elementwise log-density of Gamma(shape, rate); -inf off the support."""
    z = np.asarray(z, dtype=float)
    positive = z > 0
    zs = np.where(positive, z, 1.0)
    out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(zs) - rate * zs
    return np.where(positive, out, -np.inf)


def normal_log_pdf(z, mean, std):
    """Elementwise log-density of Normal(mean, std**2)."""
    r = (np.asarray(z, dtype=float) - mean) / std
    return -_HALF_LOG_2PI - np.log(std) - 0.5 * r * r


@dataclass(frozen=True)
class FactorKind:
    """A factor distribution over ``dim`` independent scalars.

    Subclasses implement the elementwise kernels ``_sample``, ``_log_pdf`` and
    ``_score`` over the two unconstrained coordinate arrays ``(a, b)``.
    """

    dim: int = 1

    support = "real"
    name = "factor"

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    def split(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape[-1] != self.n_params:
            raise InvalidParameterError(
                f"{self.name} over {self.dim} scalars needs {self.n_params} params, "
                f"got {params.shape[-1]}"
            )
        if not np.all(np.isfinite(params)):
            raise InvalidParameterError(f"non-finite parameters for {self.name}")
        return params[..., : self.dim], params[..., self.dim :]

    def in_support(self, z):
        z = np.asarray(z, dtype=float)
        if self.support == "positive":
            return z > 0
        return np.isfinite(z)

    def sample(self, params, rng, size=None):
        """Draw values; shape ``(dim,)`` or ``(size, dim)``."""
        a, b = self.split(params)
        n = 1 if size is None else size
        z = self._sample(a, b, n, rng)
        return z[0] if size is None else z

    def log_pdf(self, params, z):
        a, b = self.split(params)
        z = np.asarray(z, dtype=float)
        return ordered_sum(self._log_pdf(a, b, z))

    def score(self, params, z):
        a, b = self.split(params)
        z = np.asarray(z, dtype=float)
        if not np.all(self.in_support(z)):
            raise SupportError(f"score of {self.name} undefined outside its support")
        sa, sb = self._score(a, b, z)
        return np.concatenate([sa, sb], axis=-1)

    def moments(self, params):
        """Analytic (mean, variance) per scalar."""
        a, b = self.split(params)
        return self._moments(a, b)

    # elementwise kernels -------------------------------------------------
    def _sample(self, a, b, size, rng):
        raise NotImplementedError

    def _log_pdf(self, a, b, z):
        raise NotImplementedError

    def _score(self, a, b, z):
        raise NotImplementedError

    def _moments(self, a, b):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianMeanLogStd(FactorKind):
    """Normal factor with coordinates (mean, log std)."""

    support = "real"
    name = "GaussianMeanLogStd"

    def _sample(self, a, b, size, rng):
        eps = rng.standard_normal((size,) + np.shape(a))
        return a + np.exp(b) * eps

    def _log_pdf(self, a, b, z):
        r = (z - a) * np.exp(-b)
        return -_HALF_LOG_2PI - b - 0.5 * r * r

    def _score(self, a, b, z):
        inv_std = np.exp(-b)
        r = (z - a) * inv_std
        return r * inv_std, r * r - 1.0

    def _moments(self, a, b):
        return a, np.exp(2.0 * b)


@dataclass(frozen=True)
class GammaShapeRate(FactorKind):
    """Gamma factor with coordinates (log shape, log rate)."""

    support = "positive"
    name = "GammaShapeRate"

    def _sample(self, a, b, size, rng):
        shape = np.exp(a)
        z = rng.gamma(shape, 1.0, (size,) + np.shape(a)) * np.exp(-b)
        # small shapes underflow to exactly zero, which is off the support
        return np.maximum(z, _TINY)

    def _log_pdf(self, a, b, z):
        return gamma_log_pdf(z, np.exp(a), np.exp(b))

    def _score(self, a, b, z):
        shape = np.exp(a)
        rate = np.exp(b)
        d_log_shape = shape * (b - digamma(shape) + np.log(z))
        d_log_rate = shape - rate * z
        return d_log_shape, d_log_rate

    def _moments(self, a, b):
        shape, rate = np.exp(a), np.exp(b)
        return shape / rate, shape / rate**2


@dataclass(frozen=True)
class GammaMeanVar(FactorKind):
    """Gamma factor with coordinates (log mean, log variance).

    Reuses the shape-rate kernel: log shape = 2 log m - log v and
    log rate = log m - log v, so the score follows by the chain rule.
    """

    support = "positive"
    name = "GammaMeanVar"

    @staticmethod
    def _to_shape_rate(a, b):
        return 2.0 * a - b, a - b

    def _sample(self, a, b, size, rng):
        return GammaShapeRate._sample(self, *self._to_shape_rate(a, b), size, rng)

    def _log_pdf(self, a, b, z):
        return GammaShapeRate._log_pdf(self, *self._to_shape_rate(a, b), z)

    def _score(self, a, b, z):
        s_shape, s_rate = GammaShapeRate._score(self, *self._to_shape_rate(a, b), z)
        return 2.0 * s_shape + s_rate, -s_shape - s_rate

    def _moments(self, a, b):
        return np.exp(a), np.exp(b)


KINDS = {k.name: k for k in (GaussianMeanLogStd, GammaShapeRate, GammaMeanVar)}


def sample(factor: FactorKind, params, rng, size=None):
    return factor.sample(params, rng, size)


def log_pdf(factor: FactorKind, params, z):
    """Log-density of one factor; ``-inf`` if ``z`` is off the support."""
    return factor.log_pdf(params, z)


def score(factor: FactorKind, params, z):
    return factor.score(params, z)


class MeanFieldFamily:
    """Fully factorized family ``q(z | lam) = prod_i q(z_i | lam_i)``.

    Parameters
    ----------
    factors : sequence of (latent_id, FactorKind)
        One factor per latent, in layout order. Each latent owns a contiguous
        block of ``2 * dim`` entries of the flat parameter vector and ``dim``
        entries of the flat value vector.

    All batched methods work on value matrices ``Z`` of shape ``(S, n_values)``.
    """

    def __init__(self, factors: Sequence[tuple[str, FactorKind]]):
        self.factors = list(factors)
        self.latent_ids = [lid for lid, _ in self.factors]
        if len(set(self.latent_ids)) != len(self.latent_ids):
            raise ValueError("latent ids must be unique")
        self.index = {lid: i for i, lid in enumerate(self.latent_ids)}
        self.kinds = [kind for _, kind in self.factors]

        dims = np.array([k.dim for k in self.kinds], dtype=int)
        self.dims = dims
        self.value_offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.param_offsets = 2 * self.value_offsets
        self.n_latents = len(self.factors)
        self.n_values = int(self.value_offsets[-1])
        self.n_params = int(self.param_offsets[-1])

        self.param_slices = {
            lid: slice(int(self.param_offsets[i]), int(self.param_offsets[i + 1]))
            for i, lid in enumerate(self.latent_ids)
        }
        self.value_slices = {
            lid: slice(int(self.value_offsets[i]), int(self.value_offsets[i + 1]))
            for i, lid in enumerate(self.latent_ids)
        }
        self.param_latent = np.repeat(np.arange(self.n_latents), 2 * dims)
        self.value_latent = np.repeat(np.arange(self.n_latents), dims)

        # per-scalar coordinate indices, grouped by kind for vectorized kernels
        a_idx = np.empty(self.n_values, dtype=int)
        b_idx = np.empty(self.n_values, dtype=int)
        for i, kind in enumerate(self.kinds):
            v0, p0, d = self.value_offsets[i], self.param_offsets[i], kind.dim
            a_idx[v0 : v0 + d] = p0 + np.arange(d)
            b_idx[v0 : v0 + d] = p0 + d + np.arange(d)
        self.a_idx, self.b_idx = a_idx, b_idx
        self._groups = []
        for kind_cls in (GaussianMeanLogStd, GammaShapeRate, GammaMeanVar):
            lat = [i for i, k in enumerate(self.kinds) if type(k) is kind_cls]
            if not lat:
                continue
            cols = np.concatenate(
                [np.arange(self.value_offsets[i], self.value_offsets[i + 1]) for i in lat]
            )
            self._groups.append((kind_cls(1), cols))
        self.supports = np.array([k.support for k in self.kinds])

    def __repr__(self):
        return f"MeanFieldFamily({self.n_latents} latents, {self.n_params} params)"

    def _check(self, lam):
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (self.n_params,):
            raise InvalidParameterError(f"expected {self.n_params} params, got {lam.shape}")
        if not np.all(np.isfinite(lam)):
            raise InvalidParameterError("non-finite variational parameters")
        return lam

    def init_params(self, rng, scale=0.1):
        """Random start: every unconstrained coordinate drawn from N(0, scale**2)."""
        return scale * rng.standard_normal(self.n_params)

    def params_of(self, lam, latent_id):
        return np.asarray(lam)[self.param_slices[latent_id]]

    def values_of(self, Z, latent_id):
        return np.asarray(Z)[..., self.value_slices[latent_id]]

    def sample(self, lam, S, rng):
        lam = self._check(lam)
        Z = np.empty((S, self.n_values))
        for kind, cols in self._groups:
            Z[:, cols] = kind._sample(lam[self.a_idx[cols]], lam[self.b_idx[cols]], S, rng)
        return Z

    def coord_log_pdf(self, lam, Z):
        lam = np.asarray(lam, dtype=float)
        Z = np.atleast_2d(Z)
        out = np.empty(Z.shape)
        for kind, cols in self._groups:
            out[:, cols] = kind._log_pdf(lam[self.a_idx[cols]], lam[self.b_idx[cols]], Z[:, cols])
        return out

    def latent_log_pdf(self, lam, Z):
        """Per-latent log-densities, shape ``(S, n_latents)``."""
        return self.segment_sum(self.coord_log_pdf(lam, Z))

    def segment_sum(self, X):
        """Sum value-coordinate columns into latents, ascending within each latent."""
        starts = self.value_offsets[:-1]
        out = X[:, starts].copy()
        for k in range(1, int(self.dims.max(initial=1))):
            sel = self.dims > k
            out[:, sel] += X[:, starts[sel] + k]
        return out

    def log_pdf(self, lam, Z):
        return ordered_sum(self.latent_log_pdf(lam, Z), axis=1)

    def score(self, lam, Z):
        """Score matrix ``(S, n_params)`` with respect to unconstrained params."""
        lam = np.asarray(lam, dtype=float)
        Z = np.atleast_2d(Z)
        H = np.empty((Z.shape[0], self.n_params))
        for kind, cols in self._groups:
            zc = Z[:, cols]
            if not np.all(kind.in_support(zc)):
                raise SupportError("score requested outside the family support")
            sa, sb = kind._score(lam[self.a_idx[cols]], lam[self.b_idx[cols]], zc)
            H[:, self.a_idx[cols]] = sa
            H[:, self.b_idx[cols]] = sb
        return H

    def moments(self, lam):
        """Analytic mean and variance per value coordinate."""
        lam = np.asarray(lam, dtype=float)
        mean = np.empty(self.n_values)
        var = np.empty(self.n_values)
        for kind, cols in self._groups:
            m, v = kind._moments(lam[self.a_idx[cols]], lam[self.b_idx[cols]])
            mean[cols], var[cols] = m, v
        return mean, var

    def param_names(self):
        """``(latent_id, coordinate)`` labels for every entry of ``lam``."""
        names = []
        for lid, kind in self.factors:
            first, second = {
                "GaussianMeanLogStd": ("mean", "log_std"),
                "GammaShapeRate": ("log_shape", "log_rate"),
                "GammaMeanVar": ("log_mean", "log_var"),
            }[kind.name]
            names += [(lid, f"{first}[{k}]") for k in range(kind.dim)]
            names += [(lid, f"{second}[{k}]") for k in range(kind.dim)]
        return names
