from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import ContractViolation
from .base import LOG_2PI, Family, KLValue, ParamLayout, _check_prior


class GaussianDiag(Family):
    """Mean-field Gaussian, ``theta = mean + exp(log_scale) * u``."""

    kind = "gaussian_diag"

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractViolation("dim must be >= 1")
        self.dim = int(dim)
        self.layout = ParamLayout([("mean", self.dim), ("log_scale", self.dim)])

    def init_params(self, mean=0.0, log_scale=0.0) -> np.ndarray:
        phi = np.empty(self.n_params)
        phi[self.layout["mean"]] = mean
        phi[self.layout["log_scale"]] = log_scale
        return phi

    def _unpack(self, phi):
        phi = self.check_phi(phi)
        return phi[self.layout["mean"]], np.exp(phi[self.layout["log_scale"]])

    def sample(self, phi, u):
        mu, sigma = self._unpack(phi)
        return mu + sigma * self.check_points(u)

    def log_density(self, phi, theta):
        mu, sigma = self._unpack(phi)
        z = (self.check_points(theta, "theta") - mu) / sigma
        return -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(sigma)) - 0.5 * self.dim * LOG_2PI

    def pathwise_jvp(self, phi, u, cotangent):
        """Sum over the batch of ``cotangent_j^T dT(u_j)/dphi``."""
        mu, sigma = self._unpack(phi)
        u = self.check_points(u)
        c = np.asarray(cotangent, dtype=float).reshape(u.shape)
        out = np.empty(self.n_params)
        out[self.layout["mean"]] = c.sum(axis=0)
        out[self.layout["log_scale"]] = np.sum(c * u, axis=0) * sigma
        return out

    def grad_logq(self, phi, theta):
        mu, sigma = self._unpack(phi)
        z = (self.check_points(theta, "theta") - mu) / sigma
        return np.concatenate([z / sigma, z**2 - 1.0], axis=1)

    def logq_reparam(self, phi, u):
        """``log q(T(u_j))`` per draw and the fixed-u gradient of their mean."""
        mu, sigma = self._unpack(phi)
        u = self.check_points(u)
        values = -0.5 * np.sum(u**2, axis=1) - np.sum(np.log(sigma)) - 0.5 * self.dim * LOG_2PI
        grad = np.zeros(self.n_params)
        grad[self.layout["log_scale"]] = -1.0
        return values, grad

    def kl_to_gaussian_prior(self, phi, prior_mean, prior_scale, u=None) -> KLValue:
        mu, sigma = self._unpack(phi)
        m, s = _check_prior(prior_mean, prior_scale, self.dim)
        r2 = (sigma / s) ** 2
        value = 0.5 * np.sum(r2 + ((mu - m) / s) ** 2 - 1.0 - np.log(r2))
        grad = np.concatenate([(mu - m) / s**2, r2 - 1.0])
        return KLValue(float(value), grad)

    def marginal_means(self, phi, rng=None):
        return self._unpack(phi)[0].copy()

    def marginal_stds(self, phi, rng=None):
        return self._unpack(phi)[1].copy()


class GaussianDense(Family):
    """Full-covariance Gaussian with Cholesky factor ``L``.

    The ``chol`` segment holds the lower triangle row by row (numpy
    ``tril_indices`` order); diagonal entries are stored as logs.
    """

    kind = "gaussian_dense"

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractViolation("dim must be >= 1")
        self.dim = int(dim)
        self._rows, self._cols = np.tril_indices(self.dim)
        self._is_diag = self._rows == self._cols
        self.layout = ParamLayout([("mean", self.dim), ("chol", len(self._rows))])

    def init_params(self, mean=0.0, log_scale=0.0) -> np.ndarray:
        phi = np.zeros(self.n_params)
        phi[self.layout["mean"]] = mean
        chol = np.zeros(len(self._rows))
        chol[self._is_diag] = log_scale
        phi[self.layout["chol"]] = chol
        return phi

    def cholesky(self, phi) -> np.ndarray:
        raw = self.check_phi(phi)[self.layout["chol"]]
        L = np.zeros((self.dim, self.dim))
        L[self._rows, self._cols] = np.where(self._is_diag, np.exp(raw), raw)
        return L

    def _unpack(self, phi):
        phi = self.check_phi(phi)
        return phi[self.layout["mean"]], self.cholesky(phi)

    def _pack_tril_grad(self, G, L):
        # G: (..., D, D) gradient w.r.t. L entries; chain exp on the diagonal
        g = G[..., self._rows, self._cols]
        return np.where(self._is_diag, g * L[self._rows, self._cols], g)

    def sample(self, phi, u):
        mu, L = self._unpack(phi)
        return mu + self.check_points(u) @ L.T

    def log_density(self, phi, theta):
        mu, L = self._unpack(phi)
        r = self.check_points(theta, "theta") - mu
        z = solve_triangular(L, r.T, lower=True).T
        logdet = np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(z**2, axis=1) - logdet - 0.5 * self.dim * LOG_2PI

    def pathwise_jvp(self, phi, u, cotangent):
        mu, L = self._unpack(phi)
        u = self.check_points(u)
        c = np.asarray(cotangent, dtype=float).reshape(u.shape)
        out = np.empty(self.n_params)
        out[self.layout["mean"]] = c.sum(axis=0)
        out[self.layout["chol"]] = self._pack_tril_grad(c.T @ u, L)
        return out

    def grad_logq(self, phi, theta):
        mu, L = self._unpack(phi)
        r = self.check_points(theta, "theta") - mu
        z = solve_triangular(L, r.T, lower=True)
        v = solve_triangular(L, z, lower=True, trans="T").T  # L^{-T} z
        z = z.T
        G = v[:, :, None] * z[:, None, :]
        G[:, np.arange(self.dim), np.arange(self.dim)] -= 1.0 / np.diag(L)
        return np.concatenate([v, self._pack_tril_grad(G, L)], axis=1)

    def logq_reparam(self, phi, u):
        mu, L = self._unpack(phi)
        u = self.check_points(u)
        logdet = np.sum(np.log(np.diag(L)))
        values = -0.5 * np.sum(u**2, axis=1) - logdet - 0.5 * self.dim * LOG_2PI
        grad = np.zeros(self.n_params)
        chol = np.zeros(len(self._rows))
        chol[self._is_diag] = -1.0
        grad[self.layout["chol"]] = chol
        return values, grad

    def kl_to_gaussian_prior(self, phi, prior_mean, prior_scale, u=None) -> KLValue:
        mu, L = self._unpack(phi)
        m, s = _check_prior(prior_mean, prior_scale, self.dim)
        var = np.sum(L**2, axis=1)
        diagL = np.diag(L)
        value = 0.5 * (
            np.sum(var / s**2)
            + np.sum(((mu - m) / s) ** 2)
            - self.dim
            + 2.0 * np.sum(np.log(s))
            - 2.0 * np.sum(np.log(diagL))
        )
        G = L / (s**2)[:, None]
        G[np.arange(self.dim), np.arange(self.dim)] -= 1.0 / diagL
        grad = np.concatenate([(mu - m) / s**2, self._pack_tril_grad(G, L)])
        return KLValue(float(value), grad)

    def covariance(self, phi):
        L = self.cholesky(phi)
        return L @ L.T

    def marginal_means(self, phi, rng=None):
        return self._unpack(phi)[0].copy()

    def marginal_stds(self, phi, rng=None):
        return np.sqrt(np.sum(self.cholesky(phi) ** 2, axis=1))
