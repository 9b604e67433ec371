"""Step-size schedules and the stochastic-ascent driver."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .families import MeanFieldFamily, SupportError
from .model import ModelSpec


class DivergedRunError(RuntimeError):
    """Raised when an update produces non-finite parameters; carries the trace."""

    def __init__(self, message, trace=None, lam=None):
        super().__init__(message)
        self.trace = trace
        self.lam = lam


@dataclass
class RobbinsMonroSchedule:
    """``rho_t = eta * (tau + t) ** -kappa`` with ``kappa`` in (0.5, 1]."""

    eta: float = 1.0
    tau: float = 1.0
    kappa: float = 0.9

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0.5, 1]")
        if self.tau < 0 or self.eta <= 0:
            raise ValueError("need eta > 0 and tau >= 0")

    def step(self, t, g=None):
        return self.eta * (self.tau + t) ** (-self.kappa)


def rm_step(schedule: RobbinsMonroSchedule, t: int) -> float:
    if t < 1:
        raise ValueError("iterations count from 1")
    return schedule.step(t)


@dataclass
class AdaGradState:
    """Diagonal AdaGrad: ``rho_t = eta / sqrt(sum of squared gradients + eps)``."""

    eta: float = 1.0
    eps: float = 1e-8
    g2sum: np.ndarray | None = None

    def step(self, t, g):
        g = np.asarray(g, dtype=float)
        if self.g2sum is None:
            self.g2sum = np.zeros_like(g)
        self.g2sum = self.g2sum + g * g
        return self.eta / np.sqrt(self.g2sum + self.eps)


def adagrad_step(state: AdaGradState, g) -> np.ndarray:
    """Accumulate ``g * g`` into ``state`` and return the per-coordinate rates."""
    return state.step(None, g)


@dataclass
class RunConfig:
    estimator: str = "rb_cv"
    n_samples: int = 1000
    max_iterations: int = 1000
    threshold: float = 0.01
    schedule: str = "adagrad"
    eta: float = 1.0
    rm_tau: float = 1.0
    rm_kappa: float = 0.9
    adagrad_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 25
    cv_holdout: bool = False
    snapshot_every: int = 10
    frozen: tuple = ()
    time_budget: float | None = None
    record_variance: bool = False

    def __post_init__(self):
        if self.estimator not in est.ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.estimator in ("rb_cv",) and self.n_samples < 2:
            raise ValueError("control variates need n_samples >= 2")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.schedule not in ("adagrad", "robbins-monro"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def make_schedule(self):
        if self.schedule == "adagrad":
            return AdaGradState(eta=self.eta, eps=self.adagrad_eps)
        return RobbinsMonroSchedule(eta=self.eta, tau=self.rm_tau, kappa=self.rm_kappa)


@dataclass
class IterationRecord:
    iteration: int
    elbo: float
    grad_norm: float
    rho_mean: float
    max_change: float
    seconds: float
    variance: np.ndarray | None = None


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def iterations(self):
        return np.array([r.iteration for r in self.records], dtype=int)

    @property
    def elbo(self):
        return np.array([r.elbo for r in self.records])

    def as_array(self):
        """Deterministic numeric content (wall-clock excluded)."""
        if not self.records:
            return np.zeros((0, 5))
        return np.array([[r.iteration, r.elbo, r.grad_norm, r.rho_mean, r.max_change]
                         for r in self.records])


def elbo_estimate(model: ModelSpec, family: MeanFieldFamily, lam, S: int, rng) -> float:
    """Monte Carlo ELBO: mean of ``log p(x, z) - log q(z)`` over ``S`` draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    Z = family.sample(lam, S, rng)
    logp = model.log_joint(Z)
    if not np.all(np.isfinite(logp)):
        raise est.SupportMismatchError("draw from q outside the model support")
    return float(np.mean(logp - family.log_pdf(lam, Z)))


def _frozen_mask(family, frozen):
    mask = np.zeros(family.n_params, dtype=bool)
    for lid in frozen:
        mask[family.param_slices[lid]] = True
    return mask


def run_bbvi(model: ModelSpec, family: MeanFieldFamily, lam0, config: RunConfig, rng=None):
    """Stochastic gradient ascent on the ELBO.

    Each iteration draws ``config.n_samples`` samples, forms the configured
    gradient estimate, and moves ``lam <- lam + rho_t * g``. The run stops when
    the max-norm of the parameter change drops below ``config.threshold``, at
    ``config.max_iterations``, or when ``config.time_budget`` seconds elapse.

    Returns ``(lam, trace)``.
    """
    model.check_family(family)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    lam = np.array(lam0, dtype=float)
    if lam.shape != (family.n_params,):
        raise ValueError(f"lam0 must have {family.n_params} entries")
    frozen = _frozen_mask(family, config.frozen)
    schedule = config.make_schedule()
    trace = RunTrace()
    trace.snapshots[0] = lam.copy()
    start = time.perf_counter()
    for t in range(1, config.max_iterations + 1):
        try:
            g_est = est.estimate(config.estimator, model, family, lam, config.n_samples, rng,
                                 config.batch_size, config.cv_holdout)
        except (SupportError, est.SupportMismatchError):
            if t == 1:
                raise
            # finite but huge parameters can overflow the draws themselves
            raise DivergedRunError(f"variational draws overflowed at iteration {t}", trace, lam) from None
        g = np.where(frozen, 0.0, g_est.gradient)
        rho = schedule.step(t, g)
        step = rho * g
        new = lam + step
        change = float(np.max(np.abs(step))) if step.size else 0.0
        variance = None
        if config.record_variance:
            variance = np.bincount(family.param_latent, g_est.term_variance,
                                   minlength=family.n_latents) / (2 * family.dims)
        elapsed = time.perf_counter() - start
        trace.records.append(IterationRecord(
            t, g_est.elbo, float(np.linalg.norm(g)), float(np.mean(rho)), change, elapsed, variance))
        if not np.all(np.isfinite(new)):
            trace.snapshots[t] = new
            raise DivergedRunError(f"non-finite parameters at iteration {t}", trace, lam)
        lam = new
        if t % config.snapshot_every == 0:
            trace.snapshots[t] = lam.copy()
        if change < config.threshold:
            trace.converged = True
            break
        if config.time_budget is not None and elapsed >= config.time_budget:
            break
    if trace.records:
        trace.snapshots[trace.records[-1].iteration] = lam.copy()
    return lam, trace
