from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ..errors import ContractViolation

LOG_2PI = math.log(2.0 * math.pi)


class ParamLayout:
    """Named index ranges over the flat variational parameter vector.

    Segments must be disjoint and tile ``[0, size)`` exactly, in the order
    given.
    """

    def __init__(self, segments: list[tuple[str, int]]):
        self.slices: dict[str, slice] = {}
        start = 0
        for name, length in segments:
            if length < 0 or name in self.slices:
                raise ContractViolation(f"bad layout segment {name!r}")
            self.slices[name] = slice(start, start + length)
            start += length
        self.size = start

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def __iter__(self):
        return iter(self.slices.items())

    def split(self, phi: np.ndarray) -> dict[str, np.ndarray]:
        return {name: phi[s] for name, s in self.slices.items()}

    def __repr__(self):
        inner = ", ".join(f"{k}[{s.start}:{s.stop}]" for k, s in self.slices.items())
        return f"ParamLayout({inner})"


class KLValue(NamedTuple):
    value: float
    grad: np.ndarray
    se: float = 0.0  # zero for closed forms


class Family:
    """Common plumbing for reparameterized variational families.

    Subclasses work on batches: base noise ``u`` and draws ``theta`` are
    arrays of shape ``(M, dim)``.
    """

    dim: int
    layout: ParamLayout
    kind: str = "family"

    @property
    def n_params(self) -> int:
        return self.layout.size

    def check_phi(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_params,):
            raise ContractViolation(
                f"{self.kind}: phi has shape {phi.shape}, expected ({self.n_params},)"
            )
        if not np.all(np.isfinite(phi)):
            raise ContractViolation(f"{self.kind}: phi contains non-finite entries")
        return phi

    def check_points(self, x, what="u") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.dim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractViolation(
                f"{self.kind}: {what} has shape {x.shape}, expected (M, {self.dim})"
            )
        return x

    def base_noise(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_normal((size, self.dim))

    def segments(self, phi) -> dict[str, list[float]]:
        phi = self.check_phi(phi)
        return {k: v.tolist() for k, v in self.layout.split(phi).items()}

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}

    # concrete families implement: sample, log_density, pathwise_jvp,
    # grad_logq, logq_reparam, kl_to_gaussian_prior, marginal_stds, marginal_means

    def kl_to_gaussian_prior(self, phi, prior_mean, prior_scale, u=None) -> KLValue:
        """Monte Carlo KL(q || N(m, diag s^2)) from reparameterized draws ``u``.

        Gaussian families override this with the closed form.
        """
        phi = self.check_phi(phi)
        m, s = _check_prior(prior_mean, prior_scale, self.dim)
        if u is None:
            raise ContractViolation(f"{self.kind}: Monte Carlo KL needs base draws u")
        u = self.check_points(u)
        theta = self.sample(phi, u)
        logq, glogq = self.logq_reparam(phi, u)
        z = (theta - m) / s
        logp = -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(s)) - 0.5 * self.dim * LOG_2PI
        terms = logq - logp
        M = u.shape[0]
        # d/dtheta of -log p = (theta - m) / s^2
        grad = glogq + self.pathwise_jvp(phi, u, z / s) / M
        se = float(np.std(terms, ddof=1) / math.sqrt(M)) if M > 1 else float("inf")
        return KLValue(float(np.mean(terms)), grad, se)


def _check_prior(mean, scale, dim):
    m = np.broadcast_to(np.asarray(mean, dtype=float), (dim,))
    s = np.broadcast_to(np.asarray(scale, dtype=float), (dim,))
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ContractViolation("prior scale must be positive and finite")
    return m, s
