"""Monte Carlo estimates of the empirical (data-averaged) scoring-rule objectives.

All objectives are "higher is better": the log score, the quadratic (Brier)
score, and the negative CRPS / negative energy score.  One batch of base
noise is shared by every datum in an evaluation (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation

SCORE_KINDS = ("log", "quadratic", "crps", "energy")


@dataclass(frozen=True)
class McBatch:
    """Base noise for one evaluation.

    ``u`` holds M rows for the log/quadratic scores and 2M rows for
    CRPS/energy, which also carry 2M simulator noise records in ``eps``.
    ``t`` holds the M uniforms of the rejection gradient when requested.
    """

    M: int
    u: np.ndarray
    eps: dict | None = None
    t: np.ndarray | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ContractViolation("M must be >= 1")


def draw_batch(family, model, kind: str, M: int, rng: np.random.Generator, uniforms: bool = False) -> McBatch:
    if kind in ("crps", "energy"):
        u = family.base_noise(rng, 2 * M)
        return McBatch(M, u, eps=model.noise(rng, 2 * M))
    u = family.base_noise(rng, M)
    t = rng.random(M) if uniforms else None
    return McBatch(M, u, t=t)


# ---------------------------------------------------------------------------
# log score


def _log_mean_exp(ll):
    """Row-wise log-mean-exp of ``ll`` and the matching softmax weights."""
    top = ll.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(ll - top)
    total = e.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.log(total) + top[:, 0] - math.log(ll.shape[1])
        weights = e / total[:, None]
    return terms, weights


def log_parts(model, family, phi, data, batch: McBatch):
    """Draws, log-likelihood matrix, per-datum log-score terms and softmax weights."""
    theta = family.sample(phi, batch.u)
    ll = model.loglik(theta, data)
    terms, weights = _log_mean_exp(ll)
    return theta, ll, terms, weights


def log_score_terms(model, family, phi, data, batch: McBatch) -> np.ndarray:
    """Per-datum ``log (1/M) sum_j p(y_i | T(u_j))``; ``-inf`` marks total underflow."""
    _require(model.has_likelihood, "log score needs an explicit likelihood")
    return log_parts(model, family, phi, data, batch)[2]


def log_score_objective(model, family, phi, data, batch: McBatch) -> float:
    return float(np.mean(log_score_terms(model, family, phi, data, batch)))


# ---------------------------------------------------------------------------
# quadratic score


def quadratic_parts(model, family, phi, data, batch: McBatch):
    _require(getattr(model, "has_categories", False), "quadratic score needs a discrete-outcome model")
    theta = family.sample(phi, batch.u)
    f = model.category_probs(theta, data)
    idx = model.category_index(data)
    if np.any(idx < 0) or np.any(idx >= f.shape[2]):
        raise ContractViolation("outcome outside the category range")
    B = f.mean(axis=1)
    rows = np.arange(data.n)
    terms = 2.0 * B[rows, idx] - np.sum(B**2, axis=1)
    return theta, f, B, idx, terms


def quadratic_score_terms(model, family, phi, data, batch: McBatch) -> np.ndarray:
    return quadratic_parts(model, family, phi, data, batch)[4]


def quadratic_score_objective(model, family, phi, data, batch: McBatch) -> float:
    return float(np.mean(quadratic_score_terms(model, family, phi, data, batch)))


# ---------------------------------------------------------------------------
# CRPS / energy score


def crps_parts(model, family, phi, data, batch: McBatch, energy: bool = False):
    _require(model.has_simulator, "CRPS needs a simulator or likelihood sampler")
    M = batch.M
    if batch.u.shape[0] != 2 * M:
        raise ContractViolation("CRPS batches need exactly 2M draws")
    theta = family.sample(phi, batch.u)
    sims = model.simulate(theta, batch.eps, data)  # (n or 1, 2M, dy)
    y = data.y2d()
    if sims.shape[2] != y.shape[1]:
        raise ContractViolation(
            f"simulated outcome dim {sims.shape[2]} != data outcome dim {y.shape[1]}"
        )
    if not energy and y.shape[1] != 1:
        raise ContractViolation("CRPS needs scalar outcomes; use the energy score")
    diff = sims - y[:, None, :]  # (n, 2M, dy)
    pair = sims[:, :M] - sims[:, M:]
    dist = np.sqrt(np.sum(diff**2, axis=2))
    pdist = np.sqrt(np.sum(pair**2, axis=2))
    terms = -dist.mean(axis=1) + 0.5 * pdist.mean(axis=1)
    terms = np.broadcast_to(terms, (data.n,))
    return theta, sims, diff, dist, pair, pdist, terms


def crps_terms(model, family, phi, data, batch: McBatch, energy: bool = False) -> np.ndarray:
    """Per-datum negative CRPS (or negative energy score when ``energy``)."""
    return np.array(crps_parts(model, family, phi, data, batch, energy)[-1])


def crps_objective(model, family, phi, data, batch: McBatch, energy: bool = False) -> float:
    return float(np.mean(crps_terms(model, family, phi, data, batch, energy)))


# ---------------------------------------------------------------------------


def score_terms(kind: str, model, family, phi, data, batch: McBatch) -> np.ndarray:
    if kind == "log":
        return log_score_terms(model, family, phi, data, batch)
    if kind == "quadratic":
        return quadratic_score_terms(model, family, phi, data, batch)
    if kind in ("crps", "energy"):
        return crps_terms(model, family, phi, data, batch, energy=kind == "energy")
    raise ConfigurationError(f"unknown score kind {kind!r}")


def score_objective(kind: str, model, family, phi, data, batch: McBatch) -> float:
    return float(np.mean(score_terms(kind, model, family, phi, data, batch)))


def _require(ok, message):
    if not ok:
        raise ConfigurationError(message)
