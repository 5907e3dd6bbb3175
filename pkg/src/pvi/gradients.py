"""Gradient estimators for the scoring-rule objectives.

Every estimator works on a frozen :class:`~pvi.scores.McBatch`, so with the
batch held fixed it is the exact derivative of the Monte Carlo objective
computed from the same batch (the rejection estimator is the exception: it
is an unbiased estimate of the derivative of the *exact* log score).
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
from scipy.stats import norm

from .errors import ConfigurationError, ContractViolation, LikelihoodBoundError
from .scores import McBatch, crps_parts, log_parts, quadratic_parts

ESTIMATORS = ("log_reparam", "log_rejection", "quadratic", "crps", "finite_diff")


@dataclass
class GradientEstimate:
    grad: np.ndarray
    estimator: str
    mc_size: int
    objective: float | None = None
    accepted: np.ndarray | None = None  # per-datum acceptance counts (rejection only)
    dropped_data: int = 0

    @property
    def accept_rate(self) -> float | None:
        if self.accepted is None:
            return None
        return float(np.mean(self.accepted) / self.mc_size)


def grad_log_reparam(model, family, phi, data, batch: McBatch) -> GradientEstimate:
    """Self-normalized pathwise gradient of the Monte Carlo log score.

    Per datum this is ``sum_j w_ij d/dphi log p(y_i | T(u_j))`` with
    ``w_ij = softmax_j log p(y_i | T(u_j))``, the stable form of
    ``sum_j dp / sum_j p``.
    """
    theta, ll, terms, w = log_parts(model, family, phi, data, batch)
    keep = np.isfinite(terms)
    dropped = int(data.n - keep.sum())
    data_k = data.take(keep) if dropped else data
    if dropped == data.n:
        grad = np.full(family.n_params, np.nan)
    else:
        if dropped:
            w = w[keep]
        cot = model.weighted_dloglik(theta, data_k, w / data_k.n)
        grad = family.pathwise_jvp(phi, batch.u, cot)
    return GradientEstimate(grad, "log_reparam", batch.M, float(np.mean(terms)), dropped_data=dropped)


def grad_log_rejection(model, family, phi, data, batch: McBatch, log_bound=None) -> GradientEstimate:
    """Rejection-sampling gradient of the log score, unbiased for any M.

    Draw j is accepted for datum i when ``t_j < p(y_i | theta_j) / C_i``;
    the datum's gradient is the average score function ``d log q(theta_j)``
    over its accepted draws.  Data with no acceptance are dropped and the
    rest averaged.
    """
    if batch.t is None or len(batch.t) != batch.M:
        raise ContractViolation("rejection gradient needs M uniforms in batch.t")
    if log_bound is None:
        log_bound = model.log_bound(data)
    if log_bound is None:
        raise ConfigurationError(f"{model.name}: rejection gradient needs a likelihood bound C")
    log_bound = np.broadcast_to(np.asarray(log_bound, dtype=float), (data.n,))
    theta, ll, terms, _ = log_parts(model, family, phi, data, batch)
    log_ratio = ll - log_bound[:, None]
    over = np.max(log_ratio, axis=1) > 1e-10
    if over.any():
        i = int(np.flatnonzero(over)[0])
        raise LikelihoodBoundError(
            f"likelihood exceeds its bound C at datum {i} (log p - log C = {log_ratio[i].max():.3g})"
        )
    accept = batch.t[None, :] < np.exp(log_ratio)
    counts = accept.sum(axis=1)
    flag = counts > 0
    dropped = int(data.n - flag.sum())
    if not flag.any():
        grad = np.full(family.n_params, np.nan)
    else:
        weights = accept[flag] / counts[flag][:, None]
        per_draw = weights.sum(axis=0) / flag.sum()
        used = per_draw > 0
        scores = family.grad_logq(phi, theta[used])
        grad = per_draw[used] @ scores
    return GradientEstimate(
        grad, "log_rejection", batch.M, float(np.mean(terms)), accepted=counts, dropped_data=dropped
    )


def grad_quadratic(model, family, phi, data, batch: McBatch) -> GradientEstimate:
    """Pathwise gradient ``2 A_{y_i} - 2 sum_c B_c A_c`` of the quadratic score."""
    theta, f, B, idx, terms = quadratic_parts(model, family, phi, data, batch)
    n, M, _ = f.shape
    cot_B = -2.0 * B
    cot_B[np.arange(n), idx] += 2.0
    cot_f = np.broadcast_to((cot_B / (n * M))[:, None, :], f.shape)
    cot = model.category_probs_vjp(theta, data, cot_f)
    grad = family.pathwise_jvp(phi, batch.u, cot)
    return GradientEstimate(grad, "quadratic", M, float(np.mean(terms)))


def grad_crps(model, family, phi, data, batch: McBatch, energy: bool = False) -> GradientEstimate:
    """Pathwise gradient of the negative CRPS (energy score for vector outcomes).

    Ties (zero distance) contribute nothing.
    """
    theta, sims, diff, dist, pair, pdist, terms = crps_parts(model, family, phi, data, batch, energy)
    M = batch.M
    rows = sims.shape[0]  # n for covariate-dependent simulators, 1 when shared
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
        punit = np.where(pdist[..., None] > 0, pair / pdist[..., None], 0.0)
    cot = -unit / (2 * M * data.n)
    if rows == 1:
        cot = cot.sum(axis=0, keepdims=True)
    pc = punit / (2 * M * rows)
    cot[:, :M] += pc
    cot[:, M:] -= pc
    theta_cot = model.simulate_vjp(theta, batch.eps, data, cot)
    grad = family.pathwise_jvp(phi, batch.u, theta_cot)
    return GradientEstimate(grad, "crps", M, float(np.mean(terms)))


def finite_difference_gradient(objective, phi, h: float = 1e-5) -> GradientEstimate:
    """Central differences ``(f(phi + h e_k) - f(phi - h e_k)) / 2h``."""
    if h <= 0:
        raise ContractViolation("h must be positive")
    phi = np.asarray(phi, dtype=float)
    grad = np.empty_like(phi)
    for k in range(phi.size):
        step = np.zeros_like(phi)
        step[k] = h
        hi, lo = objective(phi + step), objective(phi - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"objective not finite at probe {k}")
        grad[k] = (hi - lo) / (2.0 * h)
    return GradientEstimate(grad, "finite_diff", 0, float(objective(phi)))


def normal_toy_gradient(score: str, phi, y, noise_sd: float = 1.0) -> np.ndarray:
    """Exact gradient for ``theta ~ N(mu, e^ls)`` and ``y ~ N(theta, noise_sd)``.

    The predictive is ``N(mu, s)`` with ``s^2 = noise_sd^2 + e^{2 ls}``, so the
    log score and the negative CRPS both have closed forms.  Returns the
    gradient of the data-averaged score with respect to ``(mu, ls)``.
    """
    mu, ls = (float(v) for v in np.asarray(phi, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    var_q = math.exp(2.0 * ls)
    s2 = noise_sd**2 + var_q
    s = math.sqrt(s2)
    r = y - mu
    if score == "log":
        d_mu = r / s2
        d_s2 = -0.5 / s2 + 0.5 * r**2 / s2**2
        d_ls = d_s2 * 2.0 * var_q
    elif score == "crps":
        z = r / s
        d_mu = 2.0 * norm.cdf(z) - 1.0
        d_ls = -(2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi)) * var_q / s
    else:
        raise ConfigurationError(f"no closed-form oracle for score {score!r}")
    return np.array([np.mean(d_mu), np.mean(d_ls)])


def estimate_gradient(estimator: str, score: str, model, family, phi, data, batch) -> GradientEstimate:
    if estimator == "log_reparam":
        return grad_log_reparam(model, family, phi, data, batch)
    if estimator == "log_rejection":
        return grad_log_rejection(model, family, phi, data, batch)
    if estimator == "quadratic":
        return grad_quadratic(model, family, phi, data, batch)
    if estimator == "crps":
        return grad_crps(model, family, phi, data, batch, energy=score == "energy")
    raise ConfigurationError(f"unknown estimator {estimator!r}")
