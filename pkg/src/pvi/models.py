"""Built-in statistical models and synthetic data generators.

Two model flavours share one class hierarchy:

* explicit-likelihood models implement ``loglik`` / ``dloglik_dtheta``
  (and optionally a per-datum likelihood bound for the rejection gradient);
* simulator models implement ``noise`` / ``simulate`` / ``simulate_vjp``.

Some explicit models also carry a reparameterized sampler so that CRPS can
be used with them.  All evaluation methods are vectorized over a batch of
parameter draws ``theta`` with shape ``(M, dim)``; likelihood arrays have
shape ``(n, M)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, xlogy

from .errors import ContractViolation

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dataset:
    """Aligned outcomes, optional covariates and optional binomial trial counts."""

    y: np.ndarray
    x: np.ndarray | None = None
    trials: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 0 or len(y) < 1:
            raise ContractViolation("dataset needs at least one outcome")
        object.__setattr__(self, "y", y)
        n = len(y)
        if self.x is not None:
            x = np.asarray(self.x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if len(x) != n:
                raise ContractViolation("covariates not aligned with outcomes")
            object.__setattr__(self, "x", x)
        if self.trials is not None:
            N = np.asarray(self.trials, dtype=np.int64)
            if N.shape != (n,):
                raise ContractViolation("trial counts not aligned with outcomes")
            if np.any(y < 0) or np.any(y > N):
                raise ContractViolation("binomial counts must satisfy 0 <= y <= N")
            object.__setattr__(self, "trials", N)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def outcome_dim(self) -> int:
        return 1 if self.y.ndim == 1 else self.y.shape[1]

    def y2d(self) -> np.ndarray:
        return self.y[:, None] if self.y.ndim == 1 else self.y

    def take(self, idx) -> "Dataset":
        return Dataset(
            self.y[idx],
            None if self.x is None else self.x[idx],
            None if self.trials is None else self.trials[idx],
            self.meta,
        )

    def to_csv(self, path) -> None:
        """Write ``y`` (or ``y1..yk``), optional ``N`` and ``x1..xd`` columns."""
        y = self.y2d()
        cols = ["y"] if self.y.ndim == 1 else [f"y{j + 1}" for j in range(y.shape[1])]
        blocks = [y]
        if self.trials is not None:
            cols.append("N")
            blocks.append(self.trials[:, None])
        if self.x is not None:
            cols += [f"x{j + 1}" for j in range(self.x.shape[1])]
            blocks.append(self.x)
        table = np.hstack(blocks)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ContractViolation(f"{path}: no data rows")
        header, body = rows[0], np.array(rows[1:], dtype=float)
        ycols = [i for i, c in enumerate(header) if c == "y" or (c[0] == "y" and c[1:].isdigit())]
        xcols = [i for i, c in enumerate(header) if c[0] == "x" and c[1:].isdigit()]
        if not ycols:
            raise ContractViolation(f"{path}: missing y column")
        y = body[:, ycols[0]] if header[ycols[0]] == "y" else body[:, ycols]
        trials = body[:, header.index("N")].astype(np.int64) if "N" in header else None
        x = body[:, xcols] if xcols else None
        return cls(y, x, trials)


# ---------------------------------------------------------------------------
# model base


class Model:
    name = "model"
    dim: int
    param_names: list[str]
    prior_mean: np.ndarray
    prior_scale: np.ndarray

    has_likelihood = False
    has_simulator = False
    has_categories = False

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim}

    def _theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[None, :]
        if theta.shape[1] != self.dim:
            raise ContractViolation(f"{self.name}: theta must have {self.dim} columns")
        return theta

    def check_data(self, data: Dataset) -> None:
        pass

    # explicit-likelihood surface
    def loglik(self, theta, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def dloglik_dtheta(self, theta, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def weighted_dloglik(self, theta, data: Dataset, weights) -> np.ndarray:
        """``sum_i weights[i, j] * dloglik[i, j, :]`` for each draw j."""
        return np.einsum("nm,nmd->md", weights, self.dloglik_dtheta(theta, data))

    def log_bound(self, data: Dataset) -> np.ndarray | None:
        """Per-datum log of an upper bound on ``p(y_i | theta)``; None if unknown."""
        return None

    def log_prior(self, theta) -> np.ndarray:
        theta = self._theta(theta)
        z = (theta - self.prior_mean) / self.prior_scale
        return -0.5 * np.sum(z**2, axis=1) - np.sum(np.log(self.prior_scale)) - 0.5 * self.dim * LOG_2PI

    def dlog_prior(self, theta) -> np.ndarray:
        return -(self._theta(theta) - self.prior_mean) / self.prior_scale**2


# ---------------------------------------------------------------------------
# explicit models


class NormalLocationModel(Model):
    """``y | theta ~ N(theta, 1)`` with prior ``N(0, 1)``."""

    name = "normal_location"
    has_likelihood = True
    has_simulator = True
    outcome_dim = 1

    def __init__(self, prior_scale: float = 1.0):
        self.dim = 1
        self.param_names = ["theta"]
        self.prior_mean = np.zeros(1)
        self.prior_scale = np.full(1, float(prior_scale))

    def loglik(self, theta, data):
        theta = self._theta(theta)
        r = data.y[:, None] - theta[None, :, 0]
        return -0.5 * r**2 - 0.5 * LOG_2PI

    def dloglik_dtheta(self, theta, data):
        theta = self._theta(theta)
        return (data.y[:, None] - theta[None, :, 0])[:, :, None]

    def weighted_dloglik(self, theta, data, weights):
        theta = self._theta(theta)
        r = data.y[:, None] - theta[None, :, 0]
        return np.sum(weights * r, axis=0)[:, None]

    def log_bound(self, data):
        return np.full(data.n, -0.5 * LOG_2PI)

    def noise(self, rng, count):
        return {"e": rng.standard_normal((count, 1))}

    def simulate(self, theta, eps, data=None):
        theta = self._theta(theta)
        return (theta + eps["e"])[None, :, :]

    def simulate_vjp(self, theta, eps, data, cotangent):
        return np.asarray(cotangent).sum(axis=0)


class LinearRegressionModel(Model):
    """``y_i = x_i^T beta + sigma * eps`` with fixed ``sigma``."""

    name = "linear_regression"
    has_likelihood = True
    has_simulator = True
    outcome_dim = 1

    def __init__(self, d: int, sigma: float = 1.0, prior_scale: float = 1.0):
        if d < 1:
            raise ContractViolation("d must be >= 1")
        if sigma <= 0:
            raise ContractViolation("sigma must be positive")
        self.dim = int(d)
        self.sigma = float(sigma)
        self.param_names = [f"beta[{j}]" for j in range(self.dim)]
        self.prior_mean = np.zeros(self.dim)
        self.prior_scale = np.full(self.dim, float(prior_scale))

    def describe(self):
        return {"name": self.name, "dim": self.dim, "sigma": self.sigma}

    def check_data(self, data):
        if data.x is None or data.x.shape[1] != self.dim:
            raise ContractViolation(f"{self.name}: need {self.dim} covariate columns")

    def _resid(self, theta, data):
        return data.y[:, None] - data.x @ self._theta(theta).T

    def loglik(self, theta, data):
        r = self._resid(theta, data) / self.sigma
        return -0.5 * r**2 - math.log(self.sigma) - 0.5 * LOG_2PI

    def dloglik_dtheta(self, theta, data):
        r = self._resid(theta, data) / self.sigma**2
        return r[:, :, None] * data.x[:, None, :]

    def weighted_dloglik(self, theta, data, weights):
        r = self._resid(theta, data) / self.sigma**2
        return (weights * r).T @ data.x

    def log_bound(self, data):
        return np.full(data.n, -math.log(self.sigma) - 0.5 * LOG_2PI)

    def noise(self, rng, count):
        return {"e": rng.standard_normal((count, 1))}

    def simulate(self, theta, eps, data):
        mean = data.x @ self._theta(theta).T
        return (mean + self.sigma * eps["e"][:, 0])[:, :, None]

    def simulate_vjp(self, theta, eps, data, cotangent):
        return np.asarray(cotangent)[:, :, 0].T @ data.x


VOTING_LEVELS = ("state", "state_eth", "shared_slope", "state_slope")


class BinomialLogitModel(Model):
    """Binomial cells with a logit-linear predictor over state/ethnicity/income.

    Covariate columns are ``(state index, ethnicity index, income level)``.
    ``level`` selects the nesting: ``state`` (state intercepts only),
    ``state_eth`` (+ ethnicity), ``shared_slope`` (+ one income slope),
    ``state_slope`` (+ one income slope per state).
    """

    name = "binomial_logit"
    has_likelihood = True
    has_categories = True

    def __init__(self, level: str, n_states: int, n_eth: int = 1, prior_scale: float = 10.0):
        if level not in VOTING_LEVELS:
            raise ContractViolation(f"unknown level {level!r}; choose from {VOTING_LEVELS}")
        self.level = level
        self.n_states = int(n_states)
        self.n_eth = int(n_eth)
        names = [f"state[{i}]" for i in range(self.n_states)]
        if level != "state":
            names += [f"eth[{j}]" for j in range(self.n_eth)]
        if level == "shared_slope":
            names.append("slope")
        elif level == "state_slope":
            names += [f"slope[{i}]" for i in range(self.n_states)]
        self.param_names = names
        self.dim = len(names)
        self.prior_mean = np.zeros(self.dim)
        self.prior_scale = np.full(self.dim, float(prior_scale))

    def describe(self):
        return {
            "name": self.name,
            "level": self.level,
            "n_states": self.n_states,
            "n_eth": self.n_eth,
            "dim": self.dim,
        }

    def check_data(self, data):
        if data.trials is None or data.x is None or data.x.shape[1] < 1:
            raise ContractViolation("binomial model needs trial counts and covariates")
        state = data.x[:, 0]
        if np.any(state < 0) or np.any(state >= self.n_states) or np.any(state != np.round(state)):
            raise ContractViolation("state index out of range")
        if self.level != "state":
            eth = data.x[:, 1]
            if np.any(eth < 0) or np.any(eth >= self.n_eth) or np.any(eth != np.round(eth)):
                raise ContractViolation("ethnicity index out of range")

    def design(self, data: Dataset) -> np.ndarray:
        """Rows ``z_i`` with linear predictor ``eta_i = z_i^T theta``."""
        self.check_data(data)
        n = data.n
        Z = np.zeros((n, self.dim))
        rows = np.arange(n)
        state = data.x[:, 0].astype(int)
        Z[rows, state] = 1.0
        col = self.n_states
        if self.level != "state":
            Z[rows, col + data.x[:, 1].astype(int)] = 1.0
            col += self.n_eth
        if self.level == "shared_slope":
            Z[:, col] = data.x[:, 2]
        elif self.level == "state_slope":
            Z[rows, col + state] = data.x[:, 2]
        return Z

    def _eta(self, theta, data):
        return self.design(data) @ self._theta(theta).T

    def loglik(self, theta, data):
        eta = self._eta(theta, data)
        y = data.y[:, None]
        N = data.trials[:, None].astype(float)
        log_choose = gammaln(N + 1) - gammaln(y + 1) - gammaln(N - y + 1)
        # log sigmoid(eta) = -log(1 + e^-eta)
        return log_choose - y * np.logaddexp(0.0, -eta) - (N - y) * np.logaddexp(0.0, eta)

    def dloglik_dtheta(self, theta, data):
        eta = self._eta(theta, data)
        r = data.y[:, None] - data.trials[:, None] * expit(eta)
        return r[:, :, None] * self.design(data)[:, None, :]

    def weighted_dloglik(self, theta, data, weights):
        Z = self.design(data)
        eta = Z @ self._theta(theta).T
        r = data.y[:, None] - data.trials[:, None] * expit(eta)
        return (weights * r).T @ Z

    def log_bound(self, data):
        # binomial mass at y is largest when p = y / N
        y = data.y
        N = data.trials.astype(float)
        p = y / N
        log_choose = gammaln(N + 1) - gammaln(y + 1) - gammaln(N - y + 1)
        return log_choose + xlogy(y, p) + xlogy(N - y, 1.0 - p)

    # categorical surface for the quadratic score: category c <-> count c
    def n_categories(self, data) -> int:
        return int(data.trials.max()) + 1

    def category_index(self, data) -> np.ndarray:
        return data.y.astype(np.int64)

    def category_probs(self, theta, data) -> np.ndarray:
        """Predictive masses ``f(theta_j, c; x_i)``, shape ``(n, M, I)``."""
        eta = self._eta(theta, data)
        c = np.arange(self.n_categories(data), dtype=float)
        N = data.trials[:, None, None].astype(float)
        valid = c[None, None, :] <= N
        cc = np.minimum(c[None, None, :], N)
        log_choose = gammaln(N + 1) - gammaln(cc + 1) - gammaln(N - cc + 1)
        logp = log_choose - cc * np.logaddexp(0.0, -eta)[:, :, None] - (N - cc) * np.logaddexp(0.0, eta)[:, :, None]
        return np.where(valid, np.exp(logp), 0.0)

    def category_probs_vjp(self, theta, data, cotangent) -> np.ndarray:
        """``sum_{i,c} cot[i,j,c] * d f(theta_j, c; x_i) / d theta_j``."""
        Z = self.design(data)
        eta = Z @ self._theta(theta).T
        f = self.category_probs(theta, data)
        c = np.arange(f.shape[2], dtype=float)
        N = data.trials[:, None, None].astype(float)
        deta = np.sum(cotangent * f * (c[None, None, :] - N * expit(eta)[:, :, None]), axis=2)
        return deta.T @ Z


# ---------------------------------------------------------------------------
# simulators


class SumOfSquaresSimulator(Model):
    """Only the squared norm of ``X beta + eps`` is observed (``X`` is m x d).

    ``X`` and ``eps`` are standard normal and live in the noise record, so
    ``simulate`` is deterministic given it.
    """

    name = "sum_of_squares"
    has_simulator = True
    outcome_dim = 1

    def __init__(self, m: int, d: int = 1, prior_scale: float = 1.0):
        if m < 1 or d < 1:
            raise ContractViolation("m and d must be >= 1")
        self.m = int(m)
        self.dim = int(d)
        self.param_names = [f"beta[{j}]" for j in range(self.dim)]
        self.prior_mean = np.zeros(self.dim)
        self.prior_scale = np.full(self.dim, float(prior_scale))

    def describe(self):
        return {"name": self.name, "m": self.m, "dim": self.dim}

    def noise(self, rng, count):
        return {
            "X": rng.standard_normal((count, self.m, self.dim)),
            "e": rng.standard_normal((count, self.m)),
        }

    def _resid(self, theta, eps):
        return np.einsum("kmd,kd->km", eps["X"], self._theta(theta)) + eps["e"]

    def simulate(self, theta, eps, data=None):
        r = self._resid(theta, eps)
        return np.sum(r**2, axis=1)[None, :, None]

    def simulate_vjp(self, theta, eps, data, cotangent):
        r = self._resid(theta, eps)
        c = np.asarray(cotangent).sum(axis=0)[:, 0]
        return 2.0 * c[:, None] * np.einsum("kmd,km->kd", eps["X"], r)


# ---------------------------------------------------------------------------
# data generators


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate_normal_data(n: int, sigma_true: float, seed) -> Dataset:
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if sigma_true <= 0:
        raise ContractViolation("sigma_true must be positive")
    return Dataset(_rng(seed).normal(0.0, sigma_true, size=n))


@dataclass(frozen=True)
class MisspecGrid:
    """Interpolation ``(1 - alpha) beta_0 + alpha beta_j`` over groups j = 1..g."""

    alpha: float
    coefs: np.ndarray  # (g + 1, d); row 0 is beta_0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation("alpha must lie in [0, 1]")
        coefs = np.atleast_2d(np.asarray(self.coefs, dtype=float))
        if coefs.shape[0] < 2:
            raise ContractViolation("need beta_0 and at least one group coefficient")
        object.__setattr__(self, "coefs", coefs)

    @property
    def groups(self) -> int:
        return self.coefs.shape[0] - 1

    @property
    def d(self) -> int:
        return self.coefs.shape[1]

    def group_coefs(self) -> np.ndarray:
        return (1.0 - self.alpha) * self.coefs[0] + self.alpha * self.coefs[1:]


def make_misspec_grid(d: int, groups: int, alpha: float, seed) -> MisspecGrid:
    """Draw beta_0..beta_g as standard normal vectors."""
    return MisspecGrid(alpha, _rng(seed).standard_normal((groups + 1, d)))


def generate_misspec_regression(n: int, grid: MisspecGrid, seed, sigma: float = 1.0) -> Dataset:
    """Regression data whose per-datum coefficient is one of the grid's groups."""
    rng = _rng(seed)
    x = rng.standard_normal((n, grid.d))
    group = rng.integers(grid.groups, size=n)
    beta = grid.group_coefs()[group]
    y = np.sum(x * beta, axis=1) + sigma * rng.standard_normal(n)
    return Dataset(y, x, meta={"group": group, "beta": beta})


@dataclass(frozen=True)
class MixturePopulation:
    """Gaussian-mixture population of per-datum coefficients."""

    weights: tuple
    means: tuple
    scales: tuple

    def sample(self, rng, size) -> np.ndarray:
        rng = _rng(rng)
        w = np.asarray(self.weights, dtype=float)
        comp = rng.choice(len(w), size=size, p=w / w.sum())
        mean = np.asarray(self.means, dtype=float)[comp]
        scale = np.asarray(self.scales, dtype=float)[comp]
        return (mean + scale * rng.standard_normal(size))[:, None]


BIMODAL_POPULATION = MixturePopulation((0.5, 0.5), (1.0, 3.0), (0.3, 0.3))


def generate_sum_of_squares_data(n: int, m: int, population, seed) -> Dataset:
    """Observed squared norms ``||X_i beta_i + eps_i||^2`` with ``beta_i`` from ``population``.

    ``population`` is either a :class:`MixturePopulation` (d = 1) or a
    :class:`MisspecGrid` (groups picked uniformly).
    """
    rng = _rng(seed)
    if isinstance(population, MisspecGrid):
        beta = population.group_coefs()[rng.integers(population.groups, size=n)]
    else:
        beta = population.sample(rng, n)
    d = beta.shape[1]
    X = rng.standard_normal((n, m, d))
    r = np.einsum("nmd,nd->nm", X, beta) + rng.standard_normal((n, m))
    return Dataset(np.sum(r**2, axis=1), meta={"beta": beta})


@dataclass(frozen=True)
class VotingTruth:
    state: np.ndarray  # beta_1, one intercept per state
    eth: np.ndarray  # beta_2
    slope: np.ndarray  # beta_3, one income slope per state


def make_voting_truth(
    n_states: int = 51,
    n_eth: int = 4,
    seed=0,
    state_scale: float = 0.5,
    eth_scale: float = 0.5,
    slope_mean: float = 0.2,
    slope_scale: float = 0.0,
) -> VotingTruth:
    """Random coefficient tables; ``slope_scale > 0`` makes slopes vary by state."""
    rng = _rng(seed)
    return VotingTruth(
        state=rng.normal(0.0, state_scale, n_states),
        eth=rng.normal(0.0, eth_scale, n_eth),
        slope=slope_mean + slope_scale * rng.standard_normal(n_states),
    )


def voting_cells(n_states: int, n_eth: int, income_levels: int, trials: int) -> tuple[np.ndarray, np.ndarray]:
    """Full grid of (state, ethnicity, income) cells with ``trials`` respondents each."""
    s, e, x = np.meshgrid(
        np.arange(n_states), np.arange(n_eth), np.arange(1, income_levels + 1), indexing="ij"
    )
    cells = np.column_stack([s.ravel(), e.ravel(), x.ravel()]).astype(float)
    return cells, np.full(len(cells), int(trials), dtype=np.int64)


def generate_voting_data(truth: VotingTruth, cells: np.ndarray, trials, seed) -> Dataset:
    """One binomial draw per cell from the per-state-slope generating process."""
    cells = np.asarray(cells, dtype=float)
    state = cells[:, 0].astype(int)
    eth = cells[:, 1].astype(int)
    if state.max() >= len(truth.state) or eth.max() >= len(truth.eth):
        raise ContractViolation("cell index outside the coefficient tables")
    eta = truth.state[state] + truth.eth[eth] + truth.slope[state] * cells[:, 2]
    trials = np.broadcast_to(np.asarray(trials, dtype=np.int64), (len(cells),)).copy()
    y = _rng(seed).binomial(trials, expit(eta))
    return Dataset(y.astype(float), cells, trials)
