"""Metropolis-within-Gibbs sampler used as a validation oracle.

Small instances only (latent length <= 2000).  The latent field is
updated by preconditioned MALA in an explicit orthonormal basis of the
constraint null space, so constraints hold exactly by construction; the
preconditioner is the restricted curvature at the initial Laplace mode.
Hyperparameters move by an adaptive joint random walk on the log scale
(covariance adapted during burn-in only, then frozen, so the chain is a
valid time-homogeneous Markov chain afterwards).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .gmrf import rng_from
from .graphs import AdjacencyGraph
from .inference import FitConfig, ModelContext, ObservationSet, gaussian_approx
from .model import (
    HyperParams,
    ModelSpec,
    hyper_from_vector,
    log_prior,
    prior_precision,
)
from .inference import _default_theta0

__all__ = ["McmcConfig", "McmcResult", "mcmc_oracle", "effective_sample_size"]

_MAX_LATENT = 2000


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 20_000
    burn_in: int | None = None
    seed: int = 0
    prior_only: bool = False
    fix_hyper: bool = False
    theta0: dict | None = None
    mala_step: float = 0.8
    hyper_scale: float = 0.3


@dataclass
class McmcResult:
    latent_draws: np.ndarray   # (S, n)
    hyper_draws: np.ndarray    # (S, p) log scale
    accept_latent: float
    accept_hyper: float
    ess_latent: np.ndarray
    ess_hyper: np.ndarray

    def latent_mean(self) -> np.ndarray:
        return self.latent_draws.mean(axis=0)

    def latent_se(self) -> np.ndarray:
        sd = self.latent_draws.std(axis=0, ddof=1)
        return sd / np.sqrt(np.maximum(self.ess_latent, 1.0))

    def hyper_mean(self) -> np.ndarray:
        return self.hyper_draws.mean(axis=0)

    def hyper_se(self) -> np.ndarray:
        sd = self.hyper_draws.std(axis=0, ddof=1)
        return sd / np.sqrt(np.maximum(self.ess_hyper, 1.0))


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from the initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.allclose(x, x[0]):
        return float(n)
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    # Geyer: sum consecutive pairs while positive
    total = 0.0
    for k in range(1, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    return float(n / (1.0 + 2.0 * total))


class _EtaCache:
    """Fast predictor evaluation with the delta loading factored out."""

    def __init__(self, ctx: ModelContext):
        from .model import design_matrix

        lay = ctx.lay
        h_unit = _unit_delta_hyper(ctx)
        design = design_matrix(ctx.spec, lay, h_unit).tolil()
        ta = lay.T * lay.A
        area = np.arange(ta) % lay.A + lay.slices["kappa"].start
        # strip the kappa columns; they are re-added with the current delta
        for r in range(2 * ta):
            design[r, area[r % ta]] = 0.0
        self.base = design.tocsr()
        self.kappa_cols = area
        self.ta = ta

    def eta(self, x: np.ndarray, delta: float) -> np.ndarray:
        out = self.base @ x
        kap = x[self.kappa_cols]
        out[: self.ta] += delta * kap
        out[self.ta:] += kap / delta
        return out


def _unit_delta_hyper(ctx: ModelContext) -> HyperParams:
    theta = _default_theta0(ctx.spec, ctx.lay.T, None)
    h = hyper_from_vector(theta, ctx.spec, ctx.lay.T)
    return h


def mcmc_oracle(spec: ModelSpec, graph: AdjacencyGraph, data: ObservationSet,
                config: McmcConfig | None = None, likelihood=None) -> McmcResult:
    """Run the oracle sampler and return post-burn-in draws with ESS."""
    config = config or McmcConfig()
    ctx = ModelContext.create(spec, graph, data, likelihood=likelihood)
    n = ctx.lay.total
    if n > _MAX_LATENT:
        raise ValueError(f"latent length {n} exceeds oracle limit {_MAX_LATENT}")
    burn = config.n_iter // 2 if config.burn_in is None else config.burn_in
    rng = rng_from(config.seed, 42)

    c_rows = ctx.constraints.rows
    basis = sla.null_space(c_rows) if c_rows.shape[0] else np.eye(n)
    m = basis.shape[1]
    p = len(_default_theta0(ctx.spec, ctx.lay.T, config.theta0))
    theta = _default_theta0(ctx.spec, ctx.lay.T, config.theta0)

    lik = ctx.likelihood
    eta_cache = _EtaCache(ctx)

    def loglik(x, delta):
        if config.prior_only:
            return 0.0
        return lik.value(eta_cache.eta(x, delta))

    def lik_grad(x, delta):
        if config.prior_only:
            return np.zeros(n)
        g, _ = lik.grad_weights(eta_cache.eta(x, delta))
        out = eta_cache.base.T @ g
        kap_grad = delta * g[: eta_cache.ta] + g[eta_cache.ta:] / delta
        np.add.at(out, eta_cache.kappa_cols, kap_grad)
        return out

    def restricted_prior(theta_vec):
        h = hyper_from_vector(theta_vec, ctx.spec, ctx.lay.T)
        q = prior_precision(ctx.spec, h, ctx.structures)
        q_res = basis.T @ (q @ basis)
        chol = sla.cho_factor(q_res, check_finite=False)
        logdet = 2.0 * float(np.log(np.diag(chol[0])).sum())
        return h, q_res, logdet

    h_cur, q_res, logdet_cur = restricted_prior(theta)
    lp_hyper = log_prior(h_cur, ctx.spec, ctx.lay.T)

    # preconditioner = restricted curvature at the initial Laplace mode
    try:
        ga = gaussian_approx(ctx.spec, ctx.data, h_cur, ctx=ctx, config=FitConfig())
        mass = np.linalg.inv(basis.T @ ga.factor.solve(basis))
        u = basis.T @ ga.mode
    except Exception:
        mass = np.eye(m)
        u = np.zeros(m)
    mass = 0.5 * (mass + mass.T)
    mass_chol = sla.cholesky(mass, lower=True, check_finite=False)

    def prec_solve(v):
        return sla.cho_solve((mass_chol, True), v, check_finite=False)

    x = basis @ u
    ll_cur = loglik(x, h_cur.delta)

    eps = config.mala_step
    hyper_scale = config.hyper_scale
    hyper_cov_chol = np.eye(p)
    theta_hist = np.zeros((burn, p))
    acc_lat = acc_hyp = 0
    n_keep = config.n_iter - burn
    latent_out = np.empty((n_keep, n))
    hyper_out = np.empty((n_keep, p))

    def latent_logpost(u_vec, x_vec, ll):
        return ll - 0.5 * float(u_vec @ (q_res @ u_vec))

    lp_lat = latent_logpost(u, x, ll_cur)
    for it in range(config.n_iter):
        # --- latent MALA step ---
        g_u = basis.T @ lik_grad(x, h_cur.delta) - q_res @ u
        drift = 0.5 * eps ** 2 * prec_solve(g_u)
        noise = eps * sla.solve_triangular(mass_chol, rng.standard_normal(m),
                                           lower=True, trans="T", check_finite=False)
        u_prop = u + drift + noise
        x_prop = basis @ u_prop
        ll_prop = loglik(x_prop, h_cur.delta)
        lp_prop = ll_prop - 0.5 * float(u_prop @ (q_res @ u_prop))
        g_prop = basis.T @ lik_grad(x_prop, h_cur.delta) - q_res @ u_prop
        fwd = u_prop - u - 0.5 * eps ** 2 * prec_solve(g_u)
        bwd = u - u_prop - 0.5 * eps ** 2 * prec_solve(g_prop)
        qfwd = -0.5 / eps ** 2 * float(fwd @ (mass @ fwd))
        qbwd = -0.5 / eps ** 2 * float(bwd @ (mass @ bwd))
        log_alpha = lp_prop - lp_lat + qbwd - qfwd
        if math.log(rng.uniform()) < log_alpha:
            u, x, ll_cur, lp_lat = u_prop, x_prop, ll_prop, lp_prop
            acc_lat += 1
            accepted_lat = True
        else:
            accepted_lat = False
        if it < burn:
            eps *= math.exp(
                ((1.0 if accepted_lat else 0.0) - 0.57) / (1 + it) ** 0.6
            )

        # --- hyper joint random-walk step ---
        if not config.fix_hyper:
            step = hyper_scale * (hyper_cov_chol @ rng.standard_normal(p))
            theta_prop = theta + step
            try:
                h_prop, q_res_prop, logdet_prop = restricted_prior(theta_prop)
                lp_h_prop = log_prior(h_prop, ctx.spec, ctx.lay.T)
            except Exception:
                lp_h_prop = -math.inf
            if np.isfinite(lp_h_prop):
                ll_prop = loglik(x, h_prop.delta)
                num = (ll_prop - 0.5 * float(u @ (q_res_prop @ u))
                       + 0.5 * logdet_prop + lp_h_prop)
                den = (ll_cur - 0.5 * float(u @ (q_res @ u))
                       + 0.5 * logdet_cur + lp_hyper)
                if math.log(rng.uniform()) < num - den:
                    theta, h_cur, q_res, logdet_cur = (theta_prop, h_prop,
                                                       q_res_prop, logdet_prop)
                    lp_hyper, ll_cur = lp_h_prop, ll_prop
                    lp_lat = latent_logpost(u, x, ll_cur)
                    acc_hyp += 1
                    accepted_hyp = True
                else:
                    accepted_hyp = False
            else:
                accepted_hyp = False
            if it < burn:
                theta_hist[it] = theta
                hyper_scale *= math.exp(
                    ((1.0 if accepted_hyp else 0.0) - 0.30) / (1 + it) ** 0.6
                )
                if it == burn // 2 and it > 2 * p:
                    cov = np.cov(theta_hist[: it].T) + 1e-8 * np.eye(p)
                    hyper_cov_chol = sla.cholesky(np.atleast_2d(cov), lower=True, check_finite=False)

        if it >= burn:
            latent_out[it - burn] = x
            hyper_out[it - burn] = theta

    rate_lat = acc_lat / config.n_iter
    rate_hyp = acc_hyp / config.n_iter if not config.fix_hyper else float("nan")
    for name, rate in (("latent", rate_lat), ("hyper", rate_hyp)):
        if not math.isnan(rate) and not 0.1 <= rate <= 0.8:
            warnings.warn(f"{name} acceptance rate {rate:.3f} outside [0.1, 0.8]",
                          stacklevel=2)

    ess_latent = np.array([effective_sample_size(latent_out[:, j])
                           for j in range(n)])
    ess_hyper = np.array([effective_sample_size(hyper_out[:, j])
                          for j in range(p)])
    return McmcResult(latent_draws=latent_out, hyper_draws=hyper_out,
                      accept_latent=rate_lat, accept_hyper=rate_hyp,
                      ess_latent=ess_latent, ess_hyper=ess_hyper)
