"""Model-comparison criteria and predictive accuracy metrics.

Information criteria (DIC, WAIC, LS) consume a predictive store of
posterior draws of per-cell Poisson log means; the predictive metrics
(MARB, MRRMSE, interval score, CIL, coverage) compare fitted rates against
simulation truths.  All scores sum over observed cells only.

The logarithmic score is computed from the draws through the
harmonic-mean identity for the leave-one-out predictive ordinate,
CPO_c^-1 = mean over draws of 1 / p(O_c | draw), stabilized by truncating
the per-draw weights at their 99.5th percentile.  Cells whose CPO
underflows to zero are excluded and counted.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

__all__ = [
    "ScoreTable",
    "dic",
    "waic",
    "log_score",
    "marb",
    "mrrmse",
    "interval_score",
    "cil_coverage",
    "delta_vs_reference",
    "crude_rates",
]


def _poisson_logpmf(o: np.ndarray, log_mu: np.ndarray) -> np.ndarray:
    return o * log_mu - np.exp(log_mu) - gammaln(o + 1.0)


def _check_store(store) -> tuple[np.ndarray, np.ndarray]:
    log_mu = np.asarray(store.log_mu, dtype=float)
    if log_mu.ndim != 2 or log_mu.shape[0] < 1:
        raise ValueError("predictive store must hold at least one draw")
    obs = np.asarray(store.observed, dtype=bool)
    counts = np.asarray(store.counts, dtype=float)
    return log_mu[:, obs], counts[obs]


def _dic_core(logp: np.ndarray, logp_plugin: np.ndarray) -> float:
    dev_draws = -2.0 * logp.sum(axis=1)
    d_bar = float(dev_draws.mean())
    d_hat = float(-2.0 * logp_plugin.sum())
    return 2.0 * d_bar - d_hat


def _waic_core(logp: np.ndarray) -> float:
    s = logp.shape[0]
    lppd = float((logsumexp(logp, axis=0) - math.log(s)).sum())
    p_waic = float(logp.var(axis=0, ddof=1).sum())
    return -2.0 * (lppd - p_waic)


def _ls_core(logp: np.ndarray, weight_quantile: float) -> float:
    s = logp.shape[0]
    logw = -logp  # log of the inverse-density draw weights
    if weight_quantile < 1.0:
        cap = np.quantile(logw, weight_quantile, axis=0)
        logw = np.minimum(logw, cap[None, :])
    log_inv_cpo = logsumexp(logw, axis=0) - math.log(s)
    bad = ~np.isfinite(log_inv_cpo)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} cells dropped from log score "
                      "(CPO underflow)", stacklevel=2)
    return float(log_inv_cpo[~bad].sum())


def dic(store, min_draws: int = 2) -> float:
    """Deviance information criterion, D_bar + p_D.

    D_bar is the posterior-mean deviance over draws and
    p_D = D_bar - D(mean mu), with the plug-in deviance evaluated at the
    posterior-mean Poisson mean.
    """
    log_mu, o = _check_store(store)
    if log_mu.shape[0] < min_draws:
        raise ValueError(f"need >= {min_draws} draws")
    logp = _poisson_logpmf(o[None, :], log_mu)
    mu_mean = np.exp(log_mu).mean(axis=0)
    return _dic_core(logp, _poisson_logpmf(o, np.log(mu_mean)))


def waic(store, min_draws: int = 2) -> float:
    """Watanabe-Akaike information criterion, -2 (lppd - p_waic)."""
    log_mu, o = _check_store(store)
    if log_mu.shape[0] < min_draws:
        raise ValueError(f"need >= {min_draws} draws")
    return _waic_core(_poisson_logpmf(o[None, :], log_mu))


def log_score(store, weight_quantile: float = 0.995,
              min_draws: int = 100) -> float:
    """Negative sum of log leave-one-out predictive ordinates.

    CPO is estimated by the harmonic mean of per-draw densities with the
    inverse-density weights truncated at ``weight_quantile`` per cell
    (pass 1.0 to disable the truncation).
    """
    log_mu, o = _check_store(store)
    s = log_mu.shape[0]
    if s < 2:
        raise ValueError("need >= 2 draws")
    if s < min_draws:
        warnings.warn(f"log score from only {s} draws is noisy", stacklevel=2)
    return _ls_core(_poisson_logpmf(o[None, :], log_mu), weight_quantile)


def marb(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Mean absolute relative bias, percent.

    ``estimates`` stacks per-replicate point estimates with the replicate
    axis first; ``truths`` broadcasts against one replicate.
    """
    est = np.asarray(estimates, dtype=float)
    tr = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    if np.any(tr <= 0):
        raise ValueError("truths must be positive")
    return float((np.abs(est - tr) / tr).mean() * 100.0)


def mrrmse(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Mean relative root mean square error, percent.

    The square root is taken inside the average over replicates: each
    replicate contributes the RMS of its relative errors.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim < 2:
        est = est[None, :]
    n = est.shape[0]
    tr = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    if np.any(tr <= 0):
        raise ValueError("truths must be positive")
    rel2 = ((est - tr) / tr) ** 2
    per_rep = np.sqrt(rel2.reshape(n, -1).mean(axis=1))
    return float(per_rep.mean() * 100.0)


def interval_score(lo: np.ndarray, hi: np.ndarray, truths: np.ndarray,
                   beta: float = 0.05) -> float:
    """Mean interval score for central (1 - beta) credible intervals.

    Width plus (2/beta)-scaled excursions of the truth outside the
    interval; endpoints inclusive (a truth exactly on an endpoint incurs
    no penalty).
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    tr = np.asarray(truths, dtype=float)
    if np.any(lo > hi):
        raise ValueError("crossed quantiles: lo > hi")
    width = hi - lo
    below = np.where(tr < lo, lo - tr, 0.0)
    above = np.where(tr > hi, tr - hi, 0.0)
    return float((width + (2.0 / beta) * (below + above)).mean())


def cil_coverage(lo: np.ndarray, hi: np.ndarray,
                 truths: np.ndarray) -> tuple[float, float]:
    """(mean credible-interval length, coverage percent), inclusive bounds."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    tr = np.asarray(truths, dtype=float)
    if np.any(lo > hi):
        raise ValueError("crossed quantiles: lo > hi")
    inside = (tr >= lo) & (tr <= hi)
    return float((hi - lo).mean()), float(inside.mean() * 100.0)


def delta_vs_reference(value: float, reference: float) -> float:
    """Percentage change of a metric relative to the reference model."""
    if reference == 0:
        raise ValueError("reference value must be nonzero")
    return (value - reference) / reference * 100.0


def crude_rates(data) -> tuple[np.ndarray, np.ndarray]:
    """Crude rates per 100 000: per cell (A, T, 2) and per-area aggregates.

    The aggregate pools counts and person-periods over time, the
    map-style summary.
    """
    counts = np.asarray(data.counts, dtype=float)
    pops = np.asarray(data.populations, dtype=float)
    if np.any(pops <= 0):
        raise ValueError("populations must be positive")
    per_cell = counts / pops[..., None] * 1e5
    with np.errstate(invalid="ignore"):
        agg = (np.nansum(counts, axis=1)
               / np.where(np.isnan(counts), 0.0, pops[..., None]).sum(axis=1) * 1e5)
    return per_cell, agg


@dataclass
class ScoreTable:
    """Per-model scores with percentage changes against a reference model.

    ``rows`` maps model label to a metric dict; Delta columns are added
    against ``reference`` on demand and are 0 for the reference itself.
    """

    reference: str
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    delta_metrics: tuple[str, ...] = ("MARB", "MRRMSE", "IS")

    def add(self, label: str, **metrics: float) -> None:
        self.rows[label] = dict(metrics)

    def with_deltas(self) -> dict[str, dict[str, float]]:
        if self.reference not in self.rows:
            raise ValueError(f"reference model {self.reference!r} missing")
        ref = self.rows[self.reference]
        out = {}
        for label, metrics in self.rows.items():
            row = dict(metrics)
            for m in self.delta_metrics:
                if m in metrics and m in ref:
                    row[f"{m}_delta_pct"] = delta_vs_reference(metrics[m], ref[m])
            out[label] = row
        return out

    def to_csv(self) -> str:
        """Fixed-column-order CSV; Delta columns suffixed ``_delta_pct``."""
        rows = self.with_deltas()
        cols: list[str] = ["model"]
        for metrics in rows.values():
            for key in metrics:
                if key not in cols:
                    cols.append(key)
        lines = [",".join(cols)]
        for label in sorted(rows):
            vals = [label]
            for c in cols[1:]:
                v = rows[label].get(c)
                vals.append("" if v is None else f"{v:.10g}")
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"
