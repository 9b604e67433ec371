"""Metropolis-Hastings-within-Gibbs over a :class:`ModelSpec`.

Each latent is updated from its complete conditional, which only involves the
factors that contain it. Real latents use a Gaussian random walk; positive
latents use a gamma proposal whose mean is the current value (mean/variance
parameterization), with the Hastings correction for its asymmetry.

Latents that share no factor are conditionally independent, so a group of
them can be updated in one vectorized step with exactly the same result as
updating them one after another. :func:`run_chain` partitions the latents by
greedy graph colouring and sweeps colour by colour.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .model import ModelSpec

_TINY = np.finfo(float).tiny


@dataclass
class ProposalConfig:
    """Proposal scale ``s`` per latent (default for all, optional overrides).

    ``positive`` selects the kernel for positive latents: ``"gamma"`` (mean at
    the current value, variance ``s**2``) or ``"normal"`` (a plain random walk
    that can step off the support; such moves are rejected).
    """

    scale: float = 0.1
    overrides: dict = field(default_factory=dict)
    positive: str = "gamma"

    def __post_init__(self):
        if self.scale <= 0 or any(v <= 0 for v in self.overrides.values()):
            raise ValueError("proposal scales must be positive")
        if self.positive not in ("gamma", "normal"):
            raise ValueError("positive proposal must be 'gamma' or 'normal'")


@dataclass
class ChainState:
    """Current assignment, cached factor values and acceptance counters."""

    z: np.ndarray
    F: np.ndarray
    accepted: np.ndarray
    proposed: np.ndarray
    rng: np.random.Generator

    @property
    def log_joint(self):
        return float(np.cumsum(self.F)[-1]) if self.F.size else 0.0


def init_state(model: ModelSpec, z0=None, rng=None, seed=0) -> ChainState:
    rng = np.random.default_rng(seed) if rng is None else rng
    if z0 is None:
        z0 = model.random_point(rng)[0]
    z = np.array(z0, dtype=float).reshape(model.n_values)
    F = model.evaluate(z[None, :])[0]
    if not np.all(np.isfinite(F)):
        raise ValueError("initial state has zero density under the model")
    return ChainState(z, F, np.zeros(model.n_latents, dtype=int),
                      np.zeros(model.n_latents, dtype=int), rng)


class _Plan:
    """Precomputed column/member bookkeeping for updating one group of latents."""

    def __init__(self, model: ModelSpec, latents, proposal: ProposalConfig):
        self.latents = np.asarray(latents, dtype=int)
        off = model.value_offsets
        self.cols = np.concatenate([np.arange(off[i], off[i + 1]) for i in self.latents])
        self.col_owner = np.concatenate(
            [np.full(off[i + 1] - off[i], k) for k, i in enumerate(self.latents)])
        self.members = np.zeros(model.n_members, dtype=bool)
        A = model.incidence[self.latents]
        self.members[A.indices] = True
        self.A = A
        positive = np.array([model.latents[i].support == "positive" for i in self.latents])
        self.col_positive = positive[self.col_owner]
        self.gamma_cols = self.col_positive & (proposal.positive == "gamma")
        scales = np.array([proposal.overrides.get(model.latent_ids[i], proposal.scale)
                           for i in self.latents], dtype=float)
        self.col_scale = scales[self.col_owner]
        self.n = len(self.latents)


def _stirling_error(a):
    """``gammaln(a) - (a log a - a - log(a) / 2 + log(2 pi) / 2)``."""
    a = np.asarray(a, dtype=float)
    big = np.maximum(a, 10.0)
    series = 1 / (12 * big) - 1 / (360 * big**3) + 1 / (1260 * big**5)
    small = np.minimum(a, 10.0)
    direct = gammaln(small) - (small * np.log(small) - small - 0.5 * np.log(small / (2 * np.pi)))
    return np.where(a >= 10.0, series, direct)


def _gamma_kernel_log_pdf(x, mean, var):
    """Log-density at ``x`` of the Gamma with the given mean and variance.

    Written in terms of ``x / mean`` so tiny variances (huge shapes) do not
    cancel catastrophically.
    """
    a = mean * mean / var
    r = x / mean
    u = r - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        # log1p is accurate near r = 1; far from it u loses the information in r
        dev = np.where(np.abs(u) < 0.5, np.log1p(u) - u, np.log(r) - u)
    return a * dev + 0.5 * np.log(a / (2 * np.pi)) - _stirling_error(a) - np.log(x)


def _propose(plan: _Plan, cur, rng):
    """Proposed values for the group's columns and per-latent log Hastings ratios."""
    s = plan.col_scale
    new = cur + s * rng.standard_normal(cur.shape)
    log_ratio_cols = np.zeros(cur.shape)
    g = plan.gamma_cols
    if g.any():
        var = s[g] ** 2
        m = cur[g]
        x = rng.gamma(m * m / var, var / m)
        x = np.maximum(x, _TINY)
        new[g] = x
        with np.errstate(all="ignore"):
            log_ratio_cols[g] = _gamma_kernel_log_pdf(m, x, var) - _gamma_kernel_log_pdf(x, m, var)
    log_ratio = np.bincount(plan.col_owner, log_ratio_cols, minlength=plan.n)
    return new, log_ratio


def _group_step(model: ModelSpec, state: ChainState, plan: _Plan):
    cur = state.z[plan.cols]
    new_vals, log_hastings = _propose(plan, cur, state.rng)
    z_new = state.z.copy()
    z_new[plan.cols] = new_vals
    F_new = model.evaluate(z_new[None, :], plan.members)[0]
    delta = np.where(plan.members, F_new - state.F, 0.0)
    with np.errstate(invalid="ignore"):
        log_alpha = plan.A @ delta + log_hastings
    log_u = np.log(state.rng.random(plan.n))
    accept = log_u < log_alpha
    state.proposed[plan.latents] += 1
    if accept.any():
        state.accepted[plan.latents[accept]] += 1
        col_acc = accept[plan.col_owner]
        state.z[plan.cols[col_acc]] = new_vals[col_acc]
        acc_members = plan.A[np.flatnonzero(accept)].indices
        state.F[acc_members] = F_new[acc_members]
    return state


def mh_step(model: ModelSpec, state: ChainState, latent_id, proposal: ProposalConfig | None = None):
    """One Metropolis-Hastings update of a single latent from its complete conditional."""
    proposal = ProposalConfig() if proposal is None else proposal
    return _group_step(model, state, _Plan(model, [model.index[latent_id]], proposal))


def color_groups(model: ModelSpec):
    """Greedy colouring of the latent interaction graph, in layout order."""
    G = model.interaction_graph()
    colors = np.full(model.n_latents, -1, dtype=int)
    for i in range(model.n_latents):
        used = set(colors[G.indices[G.indptr[i]:G.indptr[i + 1]]].tolist())
        c = 0
        while c in used:
            c += 1
        colors[i] = c
    return [np.flatnonzero(colors == c) for c in range(colors.max(initial=-1) + 1)]


@dataclass
class ChainConfig:
    sweeps: int = 1000
    burn_in: int = 100
    thin: int = 1
    seed: int = 0
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    blocked: bool = True
    joint: bool = False
    time_budget: float | None = None
    max_stored: int | None = None

    def __post_init__(self):
        if self.sweeps <= self.burn_in:
            raise ValueError("sweeps must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sweeps_done: int
    n_post: int
    seconds: float
    state: ChainState | None = None


def run_chain(model: ModelSpec, config: ChainConfig, z0=None) -> ChainResult:
    """Run MH-within-Gibbs for ``config.sweeps`` sweeps.

    Stores every ``thin``-th post-burn-in state (only the latest
    ``max_stored`` when that is set) and accumulates running means and
    variances over all post-burn-in sweeps. With ``joint=True`` every
    latent is proposed at once and accepted or rejected together (plain
    Metropolis-Hastings). ``blocked=False`` visits latents one at a time in
    layout order.
    """
    rng = np.random.default_rng(config.seed)
    state = init_state(model, z0, rng)
    if config.joint:
        plans = [_JointPlan(model, config.proposal)]
    elif config.blocked:
        plans = [_Plan(model, g, config.proposal) for g in color_groups(model)]
    else:
        plans = [_Plan(model, [i], config.proposal) for i in range(model.n_latents)]
    stored = deque(maxlen=config.max_stored)
    total = np.zeros(model.n_values)
    total_sq = np.zeros(model.n_values)
    shift = state.z.copy()
    n_post = 0
    start = time.perf_counter()
    sweep = 0
    for sweep in range(1, config.sweeps + 1):
        for plan in plans:
            plan.step(model, state) if isinstance(plan, _JointPlan) else _group_step(model, state, plan)
        if sweep > config.burn_in:
            d = state.z - shift
            total += d
            total_sq += d * d
            n_post += 1
            if (sweep - config.burn_in) % config.thin == 0:
                stored.append(state.z.copy())
        if config.time_budget is not None and time.perf_counter() - start >= config.time_budget:
            break
    seconds = time.perf_counter() - start
    if n_post:
        mean_d = total / n_post
        mean = shift + mean_d
        var = np.maximum(total_sq / n_post - mean_d**2, 0.0)
    else:
        mean = np.full(model.n_values, np.nan)
        var = np.full(model.n_values, np.nan)
    acc = state.accepted / np.maximum(state.proposed, 1)
    samples = np.array(stored) if stored else np.zeros((0, model.n_values))
    return ChainResult(samples, acc, mean, var, sweep, n_post, seconds, state)


class _JointPlan:
    """Plain Metropolis-Hastings: all latents proposed and judged together."""

    def __init__(self, model, proposal):
        self.plan = _Plan(model, np.arange(model.n_latents), proposal)

    def step(self, model, state):
        p = self.plan
        cur = state.z[p.cols]
        new_vals, log_hastings = _propose(p, cur, state.rng)
        z_new = state.z.copy()
        z_new[p.cols] = new_vals
        F_new = model.evaluate(z_new[None, :])[0]
        with np.errstate(invalid="ignore"):
            log_alpha = np.sum(F_new) - np.sum(state.F) + log_hastings.sum()
        state.proposed += 1
        if np.log(state.rng.random()) < log_alpha:
            state.accepted += 1
            state.z = z_new
            state.F = F_new
        return state
