"""Laplace-approximation inference for Poisson panel counts.

The pipeline mirrors the empirical-Bayes grid strategy of latent Gaussian
modelling: an inner constrained Newton iteration finds the mode and
curvature of the latent field given hyperparameters, a derivative-free
simplex search (with restarts) maximizes the resulting evidence over
log-hyperparameters, and a small axial grid around the optimum supplies
mixture weights for posterior summaries and draws.

Constraint handling: identifiability constraints Cx = 0 are imposed by
adding w * C'C to the prior precision (any positive weight leaves the
conditional law on {Cx = 0} unchanged) and by projecting every Newton
step onto the constraint subspace with a kriging correction in the
Hessian metric, which is exactly the KKT-constrained Newton step.  The
evidence uses subspace-restricted log-determinants,

    logdet_r(S) = log|B' S B| + log|C C'|        (B spans null(C))
                = log|S + w C'C| + log|C (S + w C'C)^-1 C'|,

whose difference between the prior and posterior terms is independent of
the augmentation weight; the shared log|CC'| and 2*pi constants drop.
For the prior the quantity decomposes over the block-diagonal structure,
and every block scaled by a single precision contributes
``(dim_b - k_b) * log tau_b + const_b`` with a precomputed constant; only
the copy-field block (which mixes several hyperparameters) is evaluated
numerically per call.  Improper-prior normalizing constants follow the
fixed convention of :mod:`stshared.gmrf`; only evidence differences
between models are meaningful.

Cell ordering: predictor and observation vectors stack incidence cells
(area-fastest) before mortality cells, flat index d*T*A + t*A + i.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaln

from .gmrf import ConstraintSet, SparseFactor, factorize, rng_from
from .graphs import AdjacencyGraph
from .model import (
    HyperParams,
    LatentLayout,
    ModelSpec,
    ModelStructures,
    build_structures,
    constraints_for,
    design_matrix,
    hyper_from_vector,
    hyper_names,
    layout,
    log_prior,
    prior_blocks,
)

__all__ = [
    "InferenceError",
    "ObservationSet",
    "FitConfig",
    "FitResult",
    "PredictiveStore",
    "PoissonLikelihood",
    "GaussianSurrogate",
    "GaussianApprox",
    "gaussian_approx",
    "fit",
    "posterior_draws",
]

_AUG_WEIGHT_REL = 1.0   # relative weight of the C'C constraint augmentation
_DENSE_LIMIT = 4096     # latent sizes up to this use dense linear algebra


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationSet:
    """Panel of counts and populations indexed by (area, period, outcome).

    ``counts`` has shape (A, T, 2) with outcome 0 = incidence and
    1 = mortality; missing counts are NaN and are excluded from the
    likelihood (but remain predictable).  ``populations`` has shape
    (A, T) and is shared between outcomes.
    """

    A: int
    T: int
    counts: np.ndarray = field(repr=False)
    populations: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        pops = np.asarray(self.populations, dtype=float)
        if counts.shape != (self.A, self.T, 2):
            raise ValueError(f"counts shape {counts.shape}, expected {(self.A, self.T, 2)}")
        if pops.shape != (self.A, self.T):
            raise ValueError(f"populations shape {pops.shape}, expected {(self.A, self.T)}")
        obs = ~np.isnan(counts)
        vals = counts[obs]
        if np.any(np.isinf(vals)) or np.any(vals < 0) or np.any(vals != np.round(vals)):
            raise ValueError("observed counts must be finite nonnegative integers")
        if np.any(~np.isfinite(pops)) or np.any(pops <= 0):
            raise ValueError("populations must be positive")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "populations", pops)

    @property
    def n_cells(self) -> int:
        return 2 * self.T * self.A

    def counts_vec(self) -> np.ndarray:
        """Counts as a flat vector (incidence cells, then mortality)."""
        return self.counts.transpose(2, 1, 0).ravel()

    def logn_vec(self) -> np.ndarray:
        logn = np.log(self.populations.T.ravel())
        return np.concatenate([logn, logn])

    def observed_vec(self) -> np.ndarray:
        return ~np.isnan(self.counts_vec())


class PoissonLikelihood:
    """Poisson log-likelihood with log mu = log n + eta, missing cells masked."""

    def __init__(self, data: ObservationSet):
        o = data.counts_vec()
        self.mask = data.observed_vec()
        self.o = np.where(self.mask, o, 0.0)
        self.logn = data.logn_vec()
        self._const = -float(gammaln(self.o[self.mask] + 1.0).sum())

    def value(self, eta: np.ndarray) -> float:
        logmu = self.logn + eta
        with np.errstate(over="ignore"):
            mu = np.exp(logmu)
        terms = self.o * logmu - mu
        total = terms[self.mask].sum()
        return float(total) + self._const if np.isfinite(total) else -math.inf

    def grad_weights(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = np.exp(self.logn + eta)
        g = np.where(self.mask, self.o - mu, 0.0)
        w = np.where(self.mask, mu, 0.0)
        return g, w


class GaussianSurrogate:
    """Known-variance Gaussian likelihood (test hook replacing Poisson)."""

    def __init__(self, y: np.ndarray, prec: np.ndarray):
        self.y = np.asarray(y, dtype=float)
        self.prec = np.asarray(prec, dtype=float)

    def value(self, eta: np.ndarray) -> float:
        r = self.y - eta
        return float(-0.5 * (self.prec * r * r).sum()
                     + 0.5 * np.log(self.prec / (2 * np.pi)).sum())

    def grad_weights(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.prec * (self.y - eta), self.prec


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs of the fitting pipeline; defaults are the contract."""

    newton_max: int = 50
    newton_tol: float = 1e-8
    simplex_tol: float = 1e-6
    simplex_max_evals: int = 1200
    grid_step: float = 0.5
    grid_max_steps: int = 2
    weight_floor: float = 1e-4
    draws: int = 1000
    seed: int = 0
    theta0: dict | None = None

    def to_json(self) -> str:
        d = dict(self.__dict__)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FitConfig":
        return cls(**json.loads(text))


_TAU_ATTR = {
    "kappa": "tau_kappa",
    "u": "tau_u",
    "v": "tau_v",
    "w": "tau_w",
    "gamma_I": "tau_gamma_I",
    "gamma_M": "tau_gamma_M",
    "chi_I": "tau_chi_I",
    "chi_M": "tau_chi_M",
}


def _restricted_logdet_dense(s: np.ndarray, c_rows: np.ndarray) -> float:
    """log|S| + log|C S^-1 C'| via one dense Cholesky."""
    chol = sla.cho_factor(s, lower=True, check_finite=False)
    out = 2.0 * float(np.log(np.diag(chol[0])).sum())
    if c_rows.shape[0]:
        small = c_rows @ sla.cho_solve(chol, c_rows.T, check_finite=False)
        sc = sla.cho_factor(small, check_finite=False)
        out += 2.0 * float(np.log(np.diag(sc[0])).sum())
    return out


@dataclass
class ModelContext:
    """Precomputed model pieces reused across hyperparameter evaluations."""

    spec: ModelSpec
    graph: AdjacencyGraph
    data: ObservationSet
    structures: ModelStructures
    lay: LatentLayout
    constraints: ConstraintSet
    likelihood: object
    dense: bool
    aug_weight: float
    ctc: object                      # dense array or sparse C'C
    cct_chol: tuple | None
    tau_logdet_terms: list           # (hyper attr, dim_b - k_b, const_b)
    logdet_const: float              # theta-independent part
    x_rows: np.ndarray | None        # copy-field constraint rows (block coords)
    x_ctc: object | None             # w-weighted C'C for the copy-field block
    x_aug_weight: float

    @classmethod
    def create(cls, spec: ModelSpec, graph: AdjacencyGraph, data: ObservationSet,
               likelihood=None) -> "ModelContext":
        if graph.n_areas != data.A:
            raise ValueError(f"graph has {graph.n_areas} areas, data has {data.A}")
        structures = build_structures(graph, data.T, spec)
        lay = layout(spec, data.A, data.T)
        constraints = constraints_for(spec, data.A, data.T,
                                      component_labels=graph.component_labels)
        dense = lay.total <= _DENSE_LIMIT
        c = constraints.rows
        ctc = c.T @ c if dense else sp.csc_array(sp.csc_array(c.T) @ sp.csc_array(c))
        cct_chol = sla.cho_factor(c @ c.T, check_finite=False) if constraints.rank else None
        if likelihood is None:
            likelihood = PoissonLikelihood(data)

        # blockwise restricted-logdet plan for the prior
        ref = hyper_from_vector(np.zeros(len(hyper_names(spec, data.T))), spec, data.T)
        blocks = prior_blocks(spec, ref, structures)
        tau_terms: list = []
        const = 0.0
        x_rows = x_ctc = None
        x_aug_weight = 1.0
        offset = 0
        for name, block, scale in blocks:
            d_b = block.shape[0]
            sl = slice(offset, offset + d_b)
            sub = c[:, sl]
            touches = np.abs(sub).sum(axis=1) > 0
            rows_b = sub[touches]
            k_b = rows_b.shape[0]
            if scale is not None:
                template = (block / scale).toarray()
                if k_b:
                    w_b = max(float(np.abs(np.diag(template)).max()), 1.0)
                    const_b = _restricted_logdet_dense(
                        template + w_b * rows_b.T @ rows_b, rows_b)
                else:
                    const_b = _restricted_logdet_dense(template, rows_b)
                if name.startswith("alpha"):
                    const += const_b + d_b * math.log(scale)
                else:
                    tau_terms.append((_TAU_ATTR[name], d_b - k_b, const_b))
            else:
                x_rows = rows_b
                x_aug_weight = max(float(np.abs(block.diagonal()).max()), 1.0)
                xc = rows_b.T @ rows_b
                x_ctc = xc if dense else sp.csc_array(xc)
            offset += d_b

        q_ref = sp.block_diag([b for _, b, _ in blocks], format="csc")
        aug_weight = _AUG_WEIGHT_REL * max(float(q_ref.diagonal().max()), 1.0)
        return cls(spec=spec, graph=graph, data=data, structures=structures,
                   lay=lay, constraints=constraints, likelihood=likelihood,
                   dense=dense, aug_weight=aug_weight, ctc=ctc,
                   cct_chol=cct_chol, tau_logdet_terms=tau_terms,
                   logdet_const=const, x_rows=x_rows, x_ctc=x_ctc,
                   x_aug_weight=x_aug_weight)

    def prior_matrices(self, h: HyperParams):
        """(Q_prior, restricted prior logdet) for one hyperparameter point."""
        blocks = prior_blocks(self.spec, h, self.structures)
        logdet = self.logdet_const
        for attr, dmk, const_b in self.tau_logdet_terms:
            logdet += dmk * math.log(getattr(h, attr)) + const_b
        if self.dense:
            n = self.lay.total
            q = np.zeros((n, n))
            offset = 0
            for name, block, _ in blocks:
                d_b = block.shape[0]
                q[offset:offset + d_b, offset:offset + d_b] = block.toarray()
                if name == "x":
                    xd = block.toarray()
                    logdet += _restricted_logdet_dense(
                        xd + self.x_aug_weight * self.x_ctc, self.x_rows)
                offset += d_b
        else:
            q = sp.csc_array(sp.block_diag([b for _, b, _ in blocks], format="csc"))
            for name, block, _ in blocks:
                if name == "x":
                    f = factorize(sp.csc_array(block + self.x_aug_weight * self.x_ctc))
                    logdet += _restricted_logdet_factor(f, self.x_rows)
        return q, logdet


def _restricted_logdet_factor(factor: SparseFactor, c_rows: np.ndarray) -> float:
    out = factor.logdet()
    if c_rows.shape[0]:
        sc = factor.solve(c_rows.T)
        small = sla.cho_factor(c_rows @ sc, check_finite=False)
        out += 2.0 * float(np.log(np.diag(small[0])).sum())
    return out


@dataclass
class GaussianApprox:
    """Constrained Gaussian approximation of the latent field at fixed hypers."""

    mode: np.ndarray
    factor: SparseFactor
    log_h: float
    iterations: int
    converged: bool
    h: HyperParams
    design: sp.csr_array
    _hc: np.ndarray          # H^-1 C'
    _small_chol: tuple       # cho factor of C H^-1 C'

    def marginal_variances(self) -> np.ndarray:
        """Constrained latent marginal variances diag(H^-1) - correction."""
        base = self.factor.inv_diag()
        if self._hc.shape[1]:
            corr = np.einsum("ik,ki->i", self._hc,
                             sla.cho_solve(self._small_chol, self._hc.T, check_finite=False))
            base = base - corr
        return np.maximum(base, 0.0)

    def sample(self, rng: np.random.Generator, size: int,
               c_rows: np.ndarray) -> np.ndarray:
        """Draws from N(mode, H^-1) conditioned on the constraints."""
        draws = self.factor.sample_zero_mean(rng, size)
        if self._hc.shape[1]:
            resid = draws @ c_rows.T
            draws = draws - (self._hc @ sla.cho_solve(self._small_chol, resid.T, check_finite=False)).T
        return draws + self.mode


def gaussian_approx(spec: ModelSpec, data: ObservationSet, h: HyperParams, *,
                    graph: AdjacencyGraph | None = None,
                    ctx: ModelContext | None = None,
                    config: FitConfig | None = None,
                    x0: np.ndarray | None = None) -> GaussianApprox:
    """Newton mode, curvature factor and evidence at fixed hyperparameters.

    Either ``graph`` or a prebuilt ``ctx`` must be given.  Returns the
    constrained mode, the factorized negative Hessian and the Laplace
    evidence contribution log pi(y | h) up to a fixed constant.
    """
    if ctx is None:
        if graph is None:
            raise ValueError("need graph or ctx")
        ctx = ModelContext.create(spec, graph, data)
    config = config or FitConfig()
    lik = ctx.likelihood
    q_prior, prior_logdet = ctx.prior_matrices(h)
    if ctx.dense:
        q_aug = q_prior + ctx.aug_weight * ctx.ctc
    else:
        q_aug = sp.csc_array(q_prior + ctx.aug_weight * ctx.ctc)
    c_rows = ctx.constraints.rows
    design = design_matrix(ctx.spec, ctx.lay, h)
    design_t = sp.csc_array(design.T)

    def aug_quad(vec):
        return float(vec @ (q_aug @ vec))

    x = np.zeros(ctx.lay.total) if x0 is None else np.array(x0, dtype=float)
    eta = design @ x
    obj = lik.value(eta) - 0.5 * aug_quad(x)
    if not np.isfinite(obj):
        x = np.zeros(ctx.lay.total)
        eta = design @ x
        obj = lik.value(eta) - 0.5 * aug_quad(x)

    factor = None
    hc = None
    small_chol = None
    converged = False
    iterations = 0
    gproj = np.zeros(ctx.lay.total)
    for iterations in range(1, config.newton_max + 1):
        g_lik, w_lik = lik.grad_weights(eta)
        grad = design_t @ g_lik - q_aug @ x
        mtwm = design_t @ sp.dia_array(
            (w_lik[None, :], [0]), shape=(len(w_lik), len(w_lik))) @ design
        hess = q_aug + (mtwm.toarray() if ctx.dense else mtwm)
        factor = factorize(hess)
        if c_rows.shape[0]:
            hc = factor.solve(c_rows.T)
            small_chol = sla.cho_factor(c_rows @ hc, check_finite=False)
        else:
            hc = np.zeros((ctx.lay.total, 0))
        delta = factor.solve(grad)
        if c_rows.shape[0]:
            delta = delta - hc @ sla.cho_solve(small_chol, c_rows @ delta, check_finite=False)
            gproj = grad - c_rows.T @ sla.cho_solve(ctx.cct_chol, c_rows @ grad, check_finite=False)
        else:
            gproj = grad
        if np.abs(gproj).max() < config.newton_tol:
            converged = True
            break
        step = 1.0
        improved = False
        while step >= 2.0 ** -30:
            x_new = x + step * delta
            eta_new = design @ x_new
            obj_new = lik.value(eta_new) - 0.5 * aug_quad(x_new)
            if obj_new >= obj - 1e-12 * max(1.0, abs(obj)):
                x, eta, obj = x_new, eta_new, obj_new
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = np.abs(gproj).max() < 1e3 * config.newton_tol
            break
    else:
        raise InferenceError(
            f"Newton did not converge in {config.newton_max} steps "
            f"(|grad|={np.abs(gproj).max():.3e})"
        )
    if not converged:
        raise InferenceError(
            f"Newton stalled after {iterations} steps (|grad|={np.abs(gproj).max():.3e})"
        )
    # polish feasibility in the Hessian metric (exact KKT projection)
    if c_rows.shape[0]:
        x = x - hc @ sla.cho_solve(small_chol, c_rows @ x, check_finite=False)
        eta = design @ x

    quad_prior = float(x @ (q_prior @ x))
    log_h = (
        lik.value(eta)
        - 0.5 * quad_prior
        + 0.5 * prior_logdet
        - 0.5 * _restricted_logdet_factor(factor, c_rows)
    )
    return GaussianApprox(mode=x, factor=factor, log_h=log_h,
                          iterations=iterations, converged=converged, h=h,
                          design=design, _hc=hc, _small_chol=small_chol)


@dataclass
class PredictiveStore:
    """Per-cell posterior draws of log means, enough for DIC/WAIC/LS."""

    log_mu: np.ndarray       # (draws, cells)
    counts: np.ndarray       # (cells,) observed counts, NaN for missing
    observed: np.ndarray     # (cells,) bool


@dataclass
class FitResult:
    """Posterior summaries of one model fit."""

    spec: ModelSpec
    lay: LatentLayout
    hyper_mode: HyperParams
    grid_thetas: np.ndarray       # (G, p) log-scale grid
    grid_weights: np.ndarray      # (G,) normalized
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    rate_quantiles: np.ndarray    # (cells, 3): 2.5 / 50 / 97.5 percent
    predictive_store: PredictiveStore
    latent_draws: np.ndarray      # (draws, total)
    hyper_draws: np.ndarray       # (draws, p) log scale
    diagnostics: dict
    _ctx: ModelContext = field(repr=False, default=None)
    _config: FitConfig = field(repr=False, default=None)

    def hyper_medians(self) -> HyperParams:
        med = np.quantile(self.hyper_draws, 0.5, axis=0)
        return hyper_from_vector(med, self.spec, self.lay.T)

    def rates(self) -> np.ndarray:
        """Rate quantiles reshaped to (A, T, 2, 3)."""
        a, t = self.lay.A, self.lay.T
        return self.rate_quantiles.reshape(2, t, a, 3).transpose(2, 1, 0, 3)


def _objective_factory(ctx: ModelContext, config: FitConfig):
    state = {"x0": None, "evals": 0}

    def objective(theta: np.ndarray) -> float:
        state["evals"] += 1
        try:
            h = hyper_from_vector(theta, ctx.spec, ctx.lay.T)
            lp = log_prior(h, ctx.spec, ctx.lay.T)
            if not np.isfinite(lp):
                return -math.inf
            ga = gaussian_approx(ctx.spec, ctx.data, h, ctx=ctx, config=config,
                                 x0=state["x0"])
            state["x0"] = ga.mode
            return ga.log_h + lp
        except (InferenceError, sla.LinAlgError, ValueError):
            return -math.inf

    return objective, state


def _default_theta0(spec: ModelSpec, T: int, overrides: dict | None) -> np.ndarray:
    names = hyper_names(spec, T)
    values = []
    for name in names:
        if overrides and name in overrides:
            values.append(math.log(overrides[name]))
        elif name.startswith(("delta", "rho")):
            values.append(0.0)
        else:
            values.append(math.log(50.0))
    return np.array(values)


def _simplex_search(objective, theta0: np.ndarray, config: FitConfig):
    """Nelder-Mead with restarts from shrinking initial simplices.

    Stages get a fixed share of the evaluation budget; a restart whose
    improvement is below tolerance terminates the search as converged.
    """
    p = len(theta0)
    budget = config.simplex_max_evals
    used = 0
    best_x = np.asarray(theta0, dtype=float)
    best_f = -math.inf
    success = False
    message = ""
    for step, frac in ((0.5, 0.55), (0.15, 0.30), (0.05, 0.15)):
        if budget - used < 3 * p:
            break
        stage_budget = min(max(int(budget * frac), 4 * p), budget - used)
        sim = np.vstack([best_x] + [best_x + step * np.eye(p)[j] for j in range(p)])
        res = minimize(lambda t: -objective(t), best_x, method="Nelder-Mead",
                       options={"xatol": config.simplex_tol,
                                "fatol": config.simplex_tol,
                                "maxfev": stage_budget,
                                "initial_simplex": sim,
                                "adaptive": True})
        used += res.nfev
        message = str(res.message)
        improvement = -res.fun - best_f
        if np.isfinite(res.fun) and -res.fun > best_f:
            best_x, best_f = res.x, -res.fun
        if res.success and improvement < max(10 * config.simplex_tol, 1e-8) * max(
                1.0, abs(best_f)):
            success = True
            break
        success = bool(res.success)
    return best_x, best_f, success, message


def fit(spec: ModelSpec, graph: AdjacencyGraph, data: ObservationSet,
        config: FitConfig | None = None, likelihood=None) -> FitResult:
    """Fit a model: simplex search over log-hyperparameters, axial grid
    around the optimum, mixture summaries and seeded posterior draws.

    Deterministic given (spec, graph, data, config): rerunning with the
    same seed yields bit-identical results.
    """
    config = config or FitConfig()
    ctx = ModelContext.create(spec, graph, data, likelihood=likelihood)
    objective, state = _objective_factory(ctx, config)
    theta0 = _default_theta0(spec, ctx.lay.T, config.theta0)

    theta_hat, f_hat, nm_success, nm_message = _simplex_search(objective, theta0, config)
    if not np.isfinite(f_hat):
        raise InferenceError(f"optimizer failed: {nm_message}")
    if not nm_success:
        warnings.warn(f"simplex search not converged: {nm_message}", stacklevel=2)

    # axial grid walk around the optimum
    grid_thetas = [theta_hat]
    grid_f = [f_hat]
    p = len(theta_hat)
    for axis in range(p):
        for direction in (-1.0, 1.0):
            for steps in range(1, config.grid_max_steps + 1):
                theta_g = theta_hat.copy()
                theta_g[axis] += direction * steps * config.grid_step
                f_g = objective(theta_g)
                if not np.isfinite(f_g) or math.exp(
                        min(f_g - f_hat, 0.0)) < config.weight_floor:
                    break
                grid_thetas.append(theta_g)
                grid_f.append(f_g)
    grid_thetas = np.array(grid_thetas)
    rel = np.exp(np.array(grid_f) - max(grid_f))
    keep = rel >= config.weight_floor
    grid_thetas, rel = grid_thetas[keep], rel[keep]
    weights = rel / rel.sum()
    if len(weights) == 1:
        warnings.warn("degenerate hyperparameter grid (single point)", stacklevel=2)

    # allocate draws across grid points, then sample per point
    rng_alloc = rng_from(config.seed, 0)
    alloc = rng_alloc.multinomial(config.draws, weights)
    total = ctx.lay.total
    n_cells = ctx.data.n_cells
    latent_draws = np.empty((config.draws, total))
    hyper_draws = np.empty((config.draws, p))
    eta_draws = np.empty((config.draws, n_cells))
    mean_mix = np.zeros(total)
    m2_mix = np.zeros(total)
    newton_iters = []
    pos = 0
    for g_idx, (theta_g, n_g) in enumerate(zip(grid_thetas, alloc)):
        h_g = hyper_from_vector(theta_g, ctx.spec, ctx.lay.T)
        ga = gaussian_approx(ctx.spec, ctx.data, h_g, ctx=ctx, config=config,
                             x0=state["x0"])
        newton_iters.append(ga.iterations)
        var_g = ga.marginal_variances()
        w_g = weights[g_idx]
        mean_mix += w_g * ga.mode
        m2_mix += w_g * (var_g + ga.mode ** 2)
        if n_g:
            rng_g = rng_from(config.seed, 1, g_idx)
            draws = ga.sample(rng_g, int(n_g), ctx.constraints.rows)
            latent_draws[pos:pos + n_g] = draws
            hyper_draws[pos:pos + n_g] = theta_g
            eta_draws[pos:pos + n_g] = draws @ ga.design.T
            pos += n_g
    assert pos == config.draws
    latent_mean = mean_mix
    latent_sd = np.sqrt(np.maximum(m2_mix - mean_mix ** 2, 0.0))

    rate_draws = np.exp(eta_draws)
    rate_quantiles = np.quantile(rate_draws, [0.025, 0.5, 0.975], axis=0).T
    log_mu = ctx.data.logn_vec()[None, :] + eta_draws
    store = PredictiveStore(log_mu=log_mu, counts=ctx.data.counts_vec(),
                            observed=ctx.data.observed_vec())

    diagnostics = {
        "nm_evals": state["evals"],
        "nm_converged": bool(nm_success),
        "nm_message": nm_message,
        "grid_size": int(len(weights)),
        "newton_iterations": newton_iters,
        "log_evidence_mode": float(f_hat),
    }
    return FitResult(
        spec=spec,
        lay=ctx.lay,
        hyper_mode=hyper_from_vector(theta_hat, ctx.spec, ctx.lay.T),
        grid_thetas=grid_thetas,
        grid_weights=weights,
        latent_mean=latent_mean,
        latent_sd=latent_sd,
        rate_quantiles=rate_quantiles,
        predictive_store=store,
        latent_draws=latent_draws,
        hyper_draws=hyper_draws,
        diagnostics=diagnostics,
        _ctx=ctx,
        _config=config,
    )


def posterior_draws(fr: FitResult, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh joint draws (latent, log-hyper) from the stored grid mixture.

    Deterministic per seed; reconstructs the conditional Gaussians from
    the fit context, so arbitrary n is supported.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ctx, config = fr._ctx, fr._config
    if ctx is None:
        raise InferenceError("fit context unavailable; refit to draw")
    alloc = rng_from(seed, 0).multinomial(n, fr.grid_weights)
    latent = np.empty((n, fr.lay.total))
    hyper = np.empty((n, fr.grid_thetas.shape[1]))
    pos = 0
    for g_idx, (theta_g, n_g) in enumerate(zip(fr.grid_thetas, alloc)):
        if not n_g:
            continue
        h_g = hyper_from_vector(theta_g, ctx.spec, ctx.lay.T)
        ga = gaussian_approx(ctx.spec, ctx.data, h_g, ctx=ctx, config=config)
        rng_g = rng_from(seed, 1, g_idx)
        latent[pos:pos + n_g] = ga.sample(rng_g, int(n_g), ctx.constraints.rows)
        hyper[pos:pos + n_g] = theta_g
        pos += n_g
    return latent, hyper
