"""Longitudinal factor models, synthetic data, a conjugate oracle model, and
held-out predictive likelihood.

Four factor models of sparse per-visit lab measurements share one layout:

* ``W[l]``   -- weight row of lab ``l`` (K-vector, global)
* ``o[p,l]`` -- offset of lab ``l`` for patient ``p`` (scalar, local to ``p``)
* ``x[p,v]`` -- factor state of patient ``p`` at visit ``v`` (K-vector, positive)

``gamma-normal`` and ``gamma-normal-ts`` use Normal weights, offsets and lab
likelihoods; ``gamma`` and ``gamma-ts`` use gamma weights and offsets with a
mean/variance gamma likelihood. The ``-ts`` variants chain the states through
time with ``x[p,v] ~ GammaE(x[p,v-1], sigma_x)``.

Normal hyperparameters are standard deviations; the second argument of every
mean/variance gamma (``GammaE``) is a variance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .families import GammaShapeRate, MeanFieldFamily, gamma_log_pdf, normal_log_pdf
from .model import FactorPlate, Latent, ModelSpec, factor
from .optimize import RunConfig, run_bbvi

MODEL_NAMES = ("gamma", "gamma-ts", "gamma-normal", "gamma-normal-ts")
# state-transition variance for synthetic data; 1.0 sends most chains to zero
# within a few visits
DATA_SIGMA_X = 0.1
_STATE_FLOOR = 1e-150  # keeps prev**2 / var representable


@dataclass(frozen=True)
class FactorModelConfig:
    n_labs: int = 5
    n_factors: int = 2
    n_patients: int = 20
    n_test_patients: int = 5
    n_visits: int = 5
    weight_prior: str = "normal"
    time_series: bool = True
    sigma_w: float = 1.0
    sigma_o: float = 1.0
    sigma_x: float = 1.0
    sigma_l: float = 0.01
    obs_var: float = 0.01
    alpha_w: float = 1.0
    beta_w: float = 1.0
    alpha_o: float = 1.0
    beta_o: float = 1.0
    alpha_x: float = 1.0
    beta_x: float = 1.0
    alpha0: float = 1.0
    max_labs: int = 17

    def __post_init__(self):
        if self.weight_prior not in ("normal", "gamma"):
            raise ValueError("weight_prior must be 'normal' or 'gamma'")
        positives = (self.sigma_w, self.sigma_o, self.sigma_x, self.sigma_l, self.obs_var,
                     self.alpha_w, self.beta_w, self.alpha_o, self.beta_o,
                     self.alpha_x, self.beta_x, self.alpha0)
        if min(positives) <= 0:
            raise ValueError("hyperparameters must be positive")
        if not 1 <= self.n_factors <= self.n_labs <= self.max_labs:
            raise ValueError("need 1 <= K <= L <= max_labs")
        if self.n_visits < 1 or self.n_patients < 1 or self.n_test_patients < 0:
            raise ValueError("need at least one patient and one visit")

    @property
    def name(self):
        base = "gamma-normal" if self.weight_prior == "normal" else "gamma"
        return base + ("-ts" if self.time_series else "")

    @property
    def adagrad_eta(self):
        """Default AdaGrad scale: 1 for Normal-weight models, 0.5 for gamma ones."""
        return 1.0 if self.weight_prior == "normal" else 0.5


def model_config(name: str, **overrides) -> FactorModelConfig:
    """Configuration for one of :data:`MODEL_NAMES`."""
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    return FactorModelConfig(weight_prior="gamma" if name in ("gamma", "gamma-ts") else "normal",
                             time_series=name.endswith("-ts"), **overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class LongitudinalDataset:
    """Sparse lab observations, one row per observed (patient, visit, lab).

    ``n_visits`` maps patient id to its number of (ordinal) visits, so visits
    without any observed lab are still represented.
    """

    patient: np.ndarray
    visit: np.ndarray
    lab: np.ndarray
    value: np.ndarray
    n_labs: int
    n_visits: dict
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patient = np.asarray(self.patient, dtype=int)
        self.visit = np.asarray(self.visit, dtype=int)
        self.lab = np.asarray(self.lab, dtype=int)
        self.value = np.asarray(self.value, dtype=float)
        self.n_visits = {int(p): int(v) for p, v in self.n_visits.items()}
        if not (len(self.patient) == len(self.visit) == len(self.lab) == len(self.value)):
            raise ValueError("observation columns must have equal length")
        if len(self.lab) and (self.lab.min() < 0 or self.lab.max() >= self.n_labs):
            raise ValueError("lab index out of range")
        for p, v in zip(self.patient, self.visit):
            if p not in self.n_visits or not 0 <= v < self.n_visits[p]:
                raise ValueError(f"visit {v} of patient {p} outside its visit range")

    def __len__(self):
        return len(self.value)

    @property
    def patients(self):
        return sorted(self.n_visits)

    def patients_in(self, split):
        return [p for p in self.patients if self.split.get(p) == split]

    def select(self, rows=None, patients=None):
        """Restrict to a row mask and/or a patient list (visit counts kept)."""
        keep = np.ones(len(self), dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
        if patients is not None:
            patients = sorted(int(p) for p in patients)
            keep &= np.isin(self.patient, patients)
        else:
            patients = self.patients
        return LongitudinalDataset(self.patient[keep], self.visit[keep], self.lab[keep],
                                   self.value[keep], self.n_labs,
                                   {p: self.n_visits[p] for p in patients},
                                   {p: self.split[p] for p in patients if p in self.split})

    def write_csv(self, path, comment=None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "visit_index", "lab_id", "value"])
            for p, v, l, x in zip(self.patient, self.visit, self.lab, self.value):
                w.writerow([int(p), int(v), int(l), repr(float(x))])

    def write_split(self, path, comment=None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "split"])
            for p in self.patients:
                w.writerow([p, self.split.get(p, "train")])

    @classmethod
    def read_csv(cls, path, split_path=None, n_labs=None):
        rows = _read_rows(path)
        patient = np.array([int(r["patient_id"]) for r in rows], dtype=int)
        visit = np.array([int(r["visit_index"]) for r in rows], dtype=int)
        lab = np.array([int(r["lab_id"]) for r in rows], dtype=int)
        value = np.array([float(r["value"]) for r in rows], dtype=float)
        split, n_visits = {}, {}
        if split_path is not None:
            for r in _read_rows(split_path):
                p = int(r["patient_id"])
                split[p] = r["split"]
        # visit counts are implied by the largest observed visit index
        for p, v in zip(patient, visit):
            n_visits[int(p)] = max(n_visits.get(int(p), 0), int(v) + 1)
        split = {p: s for p, s in split.items() if p in n_visits}
        if n_labs is None:
            n_labs = int(lab.max()) + 1 if len(lab) else 0
        return cls(patient, visit, lab, value, n_labs, n_visits, split)


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def generate_synthetic(config: FactorModelConfig, sparsity: float = 0.7, seed: int = 0,
                       offset_mean: float = 0.0, weights=None):
    """Forward-sample the generative process and mask labs at rate ``1 - sparsity``.

    Returns ``(dataset, truth)`` where ``truth`` maps latent ids to their true
    values. ``offset_mean`` shifts the offset prior of Normal-weight models so
    labs can be kept positive; ``weights`` fixes ``W`` (shape ``(L, K)``).
    The last ``n_test_patients`` patients are tagged ``"test"``.
    """
    if not 0 < sparsity <= 1:
        raise ValueError("sparsity must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    L, K, V = config.n_labs, config.n_factors, config.n_visits
    P = config.n_patients + config.n_test_patients
    normal = config.weight_prior == "normal"
    if weights is not None:
        W = np.asarray(weights, dtype=float).reshape(L, K)
    elif normal:
        W = rng.normal(0.0, config.sigma_w, (L, K))
    else:
        W = rng.gamma(config.alpha_w, 1.0 / config.beta_w, (L, K))
    truth = {f"W[{l}]": W[l] for l in range(L)}
    rows = []
    for p in range(P):
        if normal:
            o = rng.normal(offset_mean, config.sigma_o, L)
        else:
            o = rng.gamma(config.alpha_o, 1.0 / config.beta_o, L)
        prev = np.full(K, config.alpha0)
        for v in range(V):
            if config.time_series and not (v == 0 and not normal):
                shape = prev * prev / config.sigma_x
                x = rng.gamma(shape, prev / shape)
            else:
                x = rng.gamma(config.alpha_x, 1.0 / config.beta_x, K)
            x = np.maximum(x, _STATE_FLOOR)
            mean = W @ x + o
            if normal:
                labs = rng.normal(mean, config.sigma_l)
            else:
                labs = rng.gamma(mean * mean / config.obs_var, config.obs_var / mean)
            mask = rng.random(L) < sparsity
            for l in np.flatnonzero(mask):
                rows.append((p, v, l, labs[l]))
            truth[f"x[{p},{v}]"] = x
            prev = x
        for l in range(L):
            truth[f"o[{p},{l}]"] = np.array(o[l])
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    split = {p: ("test" if p >= config.n_patients else "train") for p in range(P)}
    ds = LongitudinalDataset(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], L,
                             {p: V for p in range(P)}, split)
    return ds, truth


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def _normal_prior(std):
    def evaluator(z, data):
        return normal_log_pdf(z["z"], 0.0, std).reshape(z["z"].shape[:2] + (-1,)).sum(-1)
    return evaluator


def _gamma_prior(shape, rate):
    def evaluator(z, data):
        return gamma_log_pdf(z["z"], shape, rate).reshape(z["z"].shape[:2] + (-1,)).sum(-1)
    return evaluator


def _gammae_chain(var):
    def evaluator(z, data):
        prev = np.maximum(z["prev"], _STATE_FLOOR)
        return gamma_log_pdf(z["x"], prev * prev / var, prev / var).sum(-1)
    return evaluator


def _gammae_fixed(mean, var):
    def evaluator(z, data):
        return gamma_log_pdf(z["x"], mean * mean / var, mean / var).sum(-1)
    return evaluator


def _normal_likelihood(std):
    def evaluator(z, data):
        mean = (z["w"] * z["x"]).sum(-1) + z["o"]
        return normal_log_pdf(data["value"][None, :], mean, std)
    return evaluator


def _gammae_likelihood(var):
    def evaluator(z, data):
        mean = (z["w"] * z["x"]).sum(-1) + z["o"]
        return gamma_log_pdf(data["value"][None, :], mean * mean / var, mean / var)
    return evaluator


def latent_layout(config: FactorModelConfig, n_visits: dict):
    """Latents of a factor model over the given patients (patient id -> visits)."""
    L, K = config.n_labs, config.n_factors
    w_support = "real" if config.weight_prior == "normal" else "positive"
    latents = [Latent(f"W[{l}]", w_support, (K,)) for l in range(L)]
    for b, p in enumerate(sorted(n_visits)):
        latents += [Latent(f"o[{p},{l}]", w_support, (), b) for l in range(L)]
        latents += [Latent(f"x[{p},{v}]", "positive", (K,), b) for v in range(n_visits[p])]
    return latents


def build_model(config: FactorModelConfig, data: LongitudinalDataset, likelihood_only=False) -> ModelSpec:
    """Factor model over every patient/visit in ``data``, one likelihood factor per lab.

    Hierarchical: ``W`` is global; each patient is one observation block.
    With ``likelihood_only`` the model keeps only the lab likelihood factors
    (used to score held-out labs).
    """
    L = config.n_labs
    if data.n_labs > L:
        raise ValueError(f"data has {data.n_labs} labs, model only {L}")
    normal = config.weight_prior == "normal"
    patients = data.patients
    block = {p: b for b, p in enumerate(patients)}
    latents = latent_layout(config, data.n_visits)
    plates = []
    if not likelihood_only:
        w_eval = (_normal_prior(config.sigma_w) if normal
                  else _gamma_prior(config.alpha_w, config.beta_w))
        plates.append(FactorPlate("prior_W", ["z"], [[f"W[{l}]"] for l in range(L)], w_eval))
        o_eval = (_normal_prior(config.sigma_o) if normal
                  else _gamma_prior(config.alpha_o, config.beta_o))
        o_members = [[f"o[{p},{l}]"] for p in patients for l in range(L)]
        plates.append(FactorPlate("prior_o", ["z"], o_members, o_eval,
                                  blocks=[block[p] for p in patients for _ in range(L)]))
        first = [p for p in patients]
        later = [(p, v) for p in patients for v in range(1, data.n_visits[p])]
        if config.time_series:
            if normal:
                first_eval = _gammae_fixed(config.alpha0, config.sigma_x)
                plates.append(FactorPlate("prior_x0", ["x"], [[f"x[{p},0]"] for p in first],
                                          first_eval, blocks=[block[p] for p in first]))
            else:
                plates.append(FactorPlate("prior_x0", ["z"], [[f"x[{p},0]"] for p in first],
                                          _gamma_prior(config.alpha_x, config.beta_x),
                                          blocks=[block[p] for p in first]))
            if later:
                plates.append(FactorPlate(
                    "prior_x", ["x", "prev"],
                    [[f"x[{p},{v}]", f"x[{p},{v - 1}]"] for p, v in later],
                    _gammae_chain(config.sigma_x), blocks=[block[p] for p, _ in later]))
        else:
            allv = [(p, v) for p in patients for v in range(data.n_visits[p])]
            plates.append(FactorPlate("prior_x", ["z"], [[f"x[{p},{v}]"] for p, v in allv],
                                      _gamma_prior(config.alpha_x, config.beta_x),
                                      blocks=[block[p] for p, _ in allv]))
    if len(data):
        lik = _normal_likelihood(config.sigma_l) if normal else _gammae_likelihood(config.obs_var)
        members = [[f"W[{l}]", f"x[{p},{v}]", f"o[{p},{l}]"]
                   for p, v, l in zip(data.patient, data.visit, data.lab)]
        plates.append(FactorPlate("lik", ["w", "x", "o"], members, lik,
                                  data={"value": data.value},
                                  blocks=[block[p] for p in data.patient]))
    if likelihood_only:
        return _LikelihoodView(latents, plates, len(patients), config.name)
    return ModelSpec(latents, plates, n_observations=len(patients), name=config.name)


class _LikelihoodView(ModelSpec):
    """Likelihood factors only; latents without factors are allowed."""

    def _check_structure(self):
        pass


def default_family(model: ModelSpec) -> MeanFieldFamily:
    return model.default_family(GammaShapeRate)


# ---------------------------------------------------------------------------
# conjugate oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConjugatePosterior:
    mean: float
    var: float

    def predictive_log_pdf(self, x, lik_var):
        return normal_log_pdf(x, self.mean, np.sqrt(self.var + lik_var))


def build_conjugate_oracle(prior_mean=0.0, prior_var=1.0, lik_var=1.0, observations=(1.0,),
                           hierarchical=False):
    """Normal-Normal model ``z ~ N(m0, v0)``, ``x_i | z ~ N(z, v)`` and its posterior.

    With ``hierarchical=True`` each observation is its own block and ``z`` is
    the single global latent.
    """
    if prior_var <= 0 or lik_var <= 0:
        raise ValueError("variances must be positive")
    x = np.asarray(observations, dtype=float).ravel()
    n = x.size
    post_var = 1.0 / (1.0 / prior_var + n / lik_var)
    post_mean = post_var * (prior_mean / prior_var + x.sum() / lik_var)
    prior_sd, lik_sd = np.sqrt(prior_var), np.sqrt(lik_var)
    plates = [factor("prior", ["z"], lambda z, d: normal_log_pdf(z["z"], prior_mean, prior_sd))]
    if n:
        plates.append(FactorPlate(
            "lik", ["z"], [["z"]] * n,
            lambda z, d: normal_log_pdf(d["x"][None, :], z["z"], lik_sd),
            data={"x": x}, blocks=list(range(n)) if hierarchical else None))
    model = ModelSpec([Latent("z", "real")], plates,
                      n_observations=n if hierarchical else 0, name="conjugate-oracle")
    return model, ConjugatePosterior(float(post_mean), float(post_var))


def conjugate_elbo_gradient(mu, log_std, prior_mean, prior_var, lik_var, observations):
    """Closed-form ELBO gradient of the conjugate model under a Gaussian q."""
    x = np.asarray(observations, dtype=float).ravel()
    s2 = np.exp(2.0 * log_std)
    d_mu = -(mu - prior_mean) / prior_var + np.sum(x - mu) / lik_var
    d_log_std = 1.0 - s2 / prior_var - x.size * s2 / lik_var
    return np.array([d_mu, d_log_std])


def conjugate_elbo(mu, log_std, prior_mean, prior_var, lik_var, observations):
    """Closed-form ELBO of the conjugate model under q = N(mu, exp(log_std)**2)."""
    x = np.asarray(observations, dtype=float).ravel()
    s2 = np.exp(2.0 * log_std)
    e_prior = -0.5 * np.log(2 * np.pi * prior_var) - ((mu - prior_mean) ** 2 + s2) / (2 * prior_var)
    e_lik = np.sum(-0.5 * np.log(2 * np.pi * lik_var) - ((x - mu) ** 2 + s2) / (2 * lik_var))
    entropy = 0.5 * np.log(2 * np.pi * np.e) + log_std
    return float(e_prior + e_lik + entropy)


# ---------------------------------------------------------------------------
# predictive likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictiveProtocol:
    fit_fraction: float = 0.75
    n_draws: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fit_fraction < 1:
            raise ValueError("fit_fraction must lie in (0, 1)")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")

    @property
    def eval_fraction(self):
        return 1.0 - self.fit_fraction


def split_observations(data: LongitudinalDataset, protocol: PredictiveProtocol):
    """Seeded split of the (visit, lab) observations of each patient.

    Each patient with ``n`` observations keeps ``round(fit_fraction * n)`` of
    them for fitting; the rest are held out.
    """
    rng = np.random.default_rng(protocol.seed)
    fit = np.zeros(len(data), dtype=bool)
    for p in data.patients:
        rows = np.flatnonzero(data.patient == p)
        n_fit = int(round(protocol.fit_fraction * rows.size))
        fit[rng.permutation(rows)[:n_fit]] = True
    return data.select(fit), data.select(~fit)


@dataclass
class PredictiveResult:
    per_patient: dict
    counts: dict
    per_observation: np.ndarray

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.per_observation))

    def rows(self):
        out = [(str(p), self.counts[p], self.per_patient[p]) for p in sorted(self.per_patient)]
        out.append(("all", int(self.per_observation.size), self.aggregate))
        return out


def predictive_from_draws(config: FactorModelConfig, eval_data: LongitudinalDataset, Z) -> PredictiveResult:
    """Average held-out log predictive density from joint latent draws ``Z``.

    ``Z`` rows follow the layout of :func:`latent_layout` for the patients in
    ``eval_data``. Each held-out lab contributes ``log mean_m p(l | z_m)``.
    """
    if len(eval_data) == 0:
        raise ValueError("empty evaluation split")
    view = build_model(config, eval_data, likelihood_only=True)
    F = view.evaluate(Z)
    per_obs = logsumexp(F, axis=0) - np.log(F.shape[0])
    per_patient, counts = {}, {}
    for p in eval_data.patients:
        sel = eval_data.patient == p
        if sel.any():
            per_patient[p] = float(per_obs[sel].mean())
            counts[p] = int(sel.sum())
    return PredictiveResult(per_patient, counts, per_obs)


def predictive_log_density(eval_model: ModelSpec, family: MeanFieldFamily, lam, M, rng):
    """Per-factor ``log mean_m exp(f(z_m))`` with ``z_m ~ q``, for any model."""
    Z = family.sample(lam, M, rng)
    F = eval_model.evaluate(Z)
    return logsumexp(F, axis=0) - np.log(M)


def transplant(src_family: MeanFieldFamily, src_lam, dst_family: MeanFieldFamily, dst_lam):
    """Copy parameters of latents present in both families."""
    out = np.array(dst_lam, dtype=float)
    for lid in dst_family.latent_ids:
        if lid in src_family.index:
            out[dst_family.param_slices[lid]] = src_lam[src_family.param_slices[lid]]
    return out


def fit_local(config: FactorModelConfig, fit_data: LongitudinalDataset, global_family, global_lam,
              run_config: RunConfig):
    """Fit local latents of ``fit_data`` with the global weights frozen."""
    model = build_model(config, fit_data)
    family = default_family(model)
    rng = np.random.default_rng(run_config.seed)
    lam0 = transplant(global_family, global_lam, family, family.init_params(rng))
    frozen = tuple(lid for lid in family.latent_ids if lid.startswith("W["))
    rc = replace(run_config, frozen=frozen)
    lam, trace = run_bbvi(model, family, lam0, rc)
    return model, family, lam, trace


def predictive_likelihood(config: FactorModelConfig, global_family, global_lam,
                          test_data: LongitudinalDataset, protocol: PredictiveProtocol,
                          run_config: RunConfig) -> PredictiveResult:
    """Held-out predictive likelihood of a fitted model on test patients.

    Splits each test patient's labs into fit/eval parts, fits the local
    latents on the fit part with the global weights frozen at the fitted
    values, then scores the eval labs with ``n_draws`` draws from the fitted q.
    """
    fit_data, eval_data = split_observations(test_data, protocol)
    if len(eval_data) == 0:
        raise ValueError("empty evaluation split")
    _, family, lam, _ = fit_local(config, fit_data, global_family, global_lam, run_config)
    rng = np.random.default_rng(protocol.seed + 1)
    Z = family.sample(lam, protocol.n_draws, rng)
    return predictive_from_draws(config, eval_data, Z)


def train_model(config: FactorModelConfig, data: LongitudinalDataset, run_config: RunConfig):
    """Fit the model on the training patients; returns (model, family, lam, trace)."""
    train = data.select(patients=data.patients_in("train") or data.patients)
    model = build_model(config, train)
    family = default_family(model)
    lam0 = family.init_params(np.random.default_rng(run_config.seed))
    lam, trace = run_bbvi(model, family, lam0, run_config)
    return model, family, lam, trace


def gibbs_model(config: FactorModelConfig, data: LongitudinalDataset, protocol: PredictiveProtocol):
    """Model over training patients plus the fit part of test patients, and the held-out labs."""
    train = data.select(patients=data.patients_in("train"))
    test = data.select(patients=data.patients_in("test"))
    fit, held = split_observations(test, protocol)
    merged = LongitudinalDataset(
        np.concatenate([train.patient, fit.patient]), np.concatenate([train.visit, fit.visit]),
        np.concatenate([train.lab, fit.lab]), np.concatenate([train.value, fit.value]),
        data.n_labs, {**train.n_visits, **fit.n_visits}, {**train.split, **fit.split})
    return build_model(config, merged), held


def restrict_draws(src_model: ModelSpec, Z, eval_data: LongitudinalDataset, config: FactorModelConfig):
    """Re-layout draws of ``src_model`` onto the latent layout of ``eval_data``."""
    layout = latent_layout(config, eval_data.n_visits)
    cols = np.concatenate([np.arange(src_model.value_slice(lat.id).start,
                                     src_model.value_slice(lat.id).stop) for lat in layout])
    return np.asarray(Z)[:, cols]

