"""Prior-KL and posterior-KL regularizers, and the VI/PVI mixing rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .families import KLValue

REGULARIZER_KINDS = ("none", "prior_kl", "posterior_kl")
MIX_MODES = ("additive", "interpolate")


@dataclass(frozen=True)
class RegularizerSpec:
    """``kind`` and weight ``lam``.

    In ``additive`` mode the objective is ``score - (lam / n) * r``;
    in ``interpolate`` mode it is ``lam * score + (1 - lam) * ELBO / n``.
    """

    kind: str = "none"
    lam: float = 0.0
    mode: str = "additive"
    mc_size: int = 100

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise ConfigurationError(f"unknown regularizer {self.kind!r}")
        if self.mode not in MIX_MODES:
            raise ConfigurationError(f"unknown mixing mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.mode == "interpolate" and self.lam > 1:
            raise ConfigurationError("interpolation lambda must lie in [0, 1]")
        if self.mc_size < 1:
            raise ConfigurationError("mc_size must be >= 1")

    @property
    def needs_elbo(self) -> bool:
        if self.mode == "interpolate":
            return self.lam < 1
        return self.kind == "posterior_kl" and self.lam > 0


def prior_kl(family, phi, prior_mean, prior_scale, u=None) -> KLValue:
    """KL(q_phi || prior): closed form for Gaussians, reparameterized MC otherwise."""
    return family.kl_to_gaussian_prior(phi, prior_mean, prior_scale, u)


def posterior_kl_surrogate(family, phi, model, data, u, scale: float = 1.0) -> KLValue:
    """Negative ELBO ``E_q[log q - log prior - sum_i log p(y_i | theta)]``.

    Equals KL(q || p(theta | y)) - log p(y), so it has the same gradient as
    the posterior KL.  With ``scale = n_total / data.n`` a data subset
    stands in for the full likelihood sum.
    """
    if not model.has_likelihood:
        raise ConfigurationError(f"{model.name}: posterior regularizer needs an explicit likelihood")
    u = family.check_points(u)
    M = u.shape[0]
    theta = family.sample(phi, u)
    logq, glogq = family.logq_reparam(phi, u)
    ll = model.loglik(theta, data)  # (n, M)
    terms = logq - model.log_prior(theta) - scale * ll.sum(axis=0)
    cot = -model.dlog_prior(theta) - scale * model.weighted_dloglik(theta, data, np.ones_like(ll))
    grad = glogq + family.pathwise_jvp(phi, u, cot) / M
    se = float(np.std(terms, ddof=1) / math.sqrt(M)) if M > 1 else float("inf")
    return KLValue(float(np.mean(terms)), grad, se)


def combined_objective(lam: float, pvi_term, vi_term, mode: str = "interpolate"):
    """Mix a PVI score term with a regularizer / VI term.

    ``pvi_term`` and ``vi_term`` are ``(value, grad)`` pairs.  ``interpolate``
    returns ``lam * pvi + (1 - lam) * vi`` (``vi_term`` is the averaged
    ELBO); ``additive`` returns ``pvi - lam * vi`` (``vi_term`` is the
    averaged regularizer).
    """
    pv, pg = pvi_term
    vv, vg = vi_term
    if mode == "interpolate":
        if not 0.0 <= lam <= 1.0:
            raise ContractViolation("interpolation lambda must lie in [0, 1]")
        return lam * pv + (1.0 - lam) * vv, lam * np.asarray(pg) + (1.0 - lam) * np.asarray(vg)
    if mode == "additive":
        if lam < 0:
            raise ContractViolation("additive lambda must be >= 0")
        return pv - lam * vv, np.asarray(pg) - lam * np.asarray(vg)
    raise ContractViolation(f"unknown mode {mode!r}")
