"""Monotone rational-quadratic spline flow on the real line.

The transform acts on ``[-bound, bound]`` with ``n_bins`` bins and is the
identity outside, so both the support and the range are all of R.  Bin
widths and heights come from a softmax over raw parameters, interior knot
derivatives from a softplus; boundary derivatives are pinned to 1 so the
map joins the identity tails smoothly.

Derivatives with respect to the raw parameters are computed exactly: each
bin formula is evaluated with a small forward-mode dual number carrying
partials with respect to the input and the six bin-local quantities, which
are then chained through the softmax/softplus Jacobians.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, softmax

from ..errors import ContractViolation
from .base import LOG_2PI, Family, ParamLayout

# direction indices carried by _Dual
_U, _XK, _W, _YK, _H, _D0, _D1 = range(7)


class _Dual:
    __slots__ = ("val", "grad")

    def __init__(self, val, grad):
        self.val = val
        self.grad = grad  # (N, 7)

    @classmethod
    def seed(cls, val, direction):
        grad = np.zeros((val.shape[0], 7))
        grad[:, direction] = 1.0
        return cls(val, grad)

    def __add__(self, other):
        if isinstance(other, _Dual):
            return _Dual(self.val + other.val, self.grad + other.grad)
        return _Dual(self.val + other, self.grad)

    __radd__ = __add__

    def __neg__(self):
        return _Dual(-self.val, -self.grad)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, _Dual):
            return _Dual(
                self.val * other.val,
                self.grad * other.val[:, None] + other.grad * self.val[:, None],
            )
        return _Dual(self.val * other, self.grad * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _Dual):
            val = self.val / other.val
            grad = (self.grad - other.grad * val[:, None]) / other.val[:, None]
            return _Dual(val, grad)
        return _Dual(self.val / other, self.grad / other)

    def log(self):
        return _Dual(np.log(self.val), self.grad / self.val[:, None])


def _rq_bin(u, xk, w, yk, h, d0, d1):
    """Forward value and log-slope of one RQ bin, as duals."""
    U = _Dual.seed(u, _U)
    X = _Dual.seed(xk, _XK)
    W = _Dual.seed(w, _W)
    Y = _Dual.seed(yk, _YK)
    H = _Dual.seed(h, _H)
    A = _Dual.seed(d0, _D0)
    B = _Dual.seed(d1, _D1)
    xi = (U - X) / W
    s = H / W
    t = xi * (1.0 - xi)
    den = s + (A + B - 2.0 * s) * t
    out = Y + H * (s * xi * xi + A * t) / den
    one_minus = 1.0 - xi
    slope_num = s * s * (B * xi * xi + 2.0 * s * t + A * one_minus * one_minus)
    log_slope = slope_num.log() - 2.0 * den.log()
    return out, log_slope


class Spline1D(Family):
    """One-dimensional rational-quadratic spline flow over a standard normal base."""

    kind = "spline1d"

    def __init__(
        self,
        n_bins: int = 32,
        bound: float = 10.0,
        min_bin_width: float = 1e-3,
        min_bin_height: float = 1e-3,
        min_derivative: float = 1e-3,
    ):
        if n_bins < 2:
            raise ContractViolation("n_bins must be >= 2")
        if bound <= 0:
            raise ContractViolation("bound must be positive")
        if min_bin_width * n_bins >= 1 or min_bin_height * n_bins >= 1:
            raise ContractViolation("minimum bin size too large for n_bins")
        self.dim = 1
        self.n_bins = int(n_bins)
        self.bound = float(bound)
        self.min_bin_width = min_bin_width
        self.min_bin_height = min_bin_height
        self.min_derivative = min_derivative
        K = self.n_bins
        self.layout = ParamLayout([("widths", K), ("heights", K), ("derivatives", K - 1)])

    def describe(self):
        return {"kind": self.kind, "dim": 1, "n_bins": self.n_bins, "bound": self.bound}

    def init_params(self) -> np.ndarray:
        """Raw parameters of the identity map."""
        phi = np.zeros(self.n_params)
        phi[self.layout["derivatives"]] = math.log(math.expm1(1.0 - self.min_derivative))
        return phi

    # -- raw parameters -> knots, with Jacobians -------------------------

    def _knots(self, raw, min_size):
        K, B = self.n_bins, self.bound
        sm = softmax(raw)
        scale = 1.0 - min_size * K
        sizes = min_size + scale * sm
        cum = np.concatenate([[0.0], np.cumsum(sizes)])
        knots = -B + 2.0 * B * cum
        knots[0], knots[-1] = -B, B
        # d sizes_i / d raw_j
        J_sizes = scale * (np.diag(sm) - np.outer(sm, sm))
        J_knots = 2.0 * B * np.vstack([np.zeros(K), np.cumsum(J_sizes, axis=0)])
        J_knots[-1] = 0.0
        return knots, J_knots

    def _params(self, phi):
        phi = self.check_phi(phi)
        x, Jx = self._knots(phi[self.layout["widths"]], self.min_bin_width)
        y, Jy = self._knots(phi[self.layout["heights"]], self.min_bin_height)
        raw_d = phi[self.layout["derivatives"]]
        K = self.n_bins
        d = np.ones(K + 1)
        d[1:-1] = self.min_derivative + np.logaddexp(0.0, raw_d)
        Jd = np.zeros((K + 1, K - 1))
        Jd[np.arange(1, K), np.arange(K - 1)] = expit(raw_d)
        return x, Jx, y, Jy, d, Jd

    # -- core evaluation --------------------------------------------------

    def _evaluate(self, phi, u):
        """Values, log-slopes and bin-local partials at base points ``u`` (1-D)."""
        x, Jx, y, Jy, d, Jd = self._params(phi)
        K = self.n_bins
        inside = (u >= -self.bound) & (u <= self.bound)
        k = np.clip(np.searchsorted(x, u[inside], side="right") - 1, 0, K - 1)
        out = u.copy()
        log_slope = np.zeros_like(u)
        T, LS = _rq_bin(u[inside], x[k], x[k + 1] - x[k], y[k], y[k + 1] - y[k], d[k], d[k + 1])
        out[inside] = T.val
        log_slope[inside] = LS.val
        ctx = dict(inside=inside, k=k, T=T, LS=LS, Jx=Jx, Jy=Jy, Jd=Jd)
        return out, log_slope, ctx

    def _raw_grad(self, local, ctx):
        """Chain bin-local partials ``local`` (N, 7) to raw parameters (N, P)."""
        k, Jx, Jy, Jd = ctx["k"], ctx["Jx"], ctx["Jy"], ctx["Jd"]
        Jw = Jx[k + 1] - Jx[k]
        Jh = Jy[k + 1] - Jy[k]
        g = np.empty((len(k), self.n_params))
        g[:, self.layout["widths"]] = local[:, [_XK]] * Jx[k] + local[:, [_W]] * Jw
        g[:, self.layout["heights"]] = local[:, [_YK]] * Jy[k] + local[:, [_H]] * Jh
        g[:, self.layout["derivatives"]] = local[:, [_D0]] * Jd[k] + local[:, [_D1]] * Jd[k + 1]
        return g

    def _inverse(self, phi, theta):
        x, _, y, _, d, _ = self._params(phi)
        K = self.n_bins
        inside = (theta >= -self.bound) & (theta <= self.bound)
        t = theta[inside]
        k = np.clip(np.searchsorted(y, t, side="right") - 1, 0, K - 1)
        w = x[k + 1] - x[k]
        h = y[k + 1] - y[k]
        s = h / w
        d0, d1 = d[k], d[k + 1]
        dy = t - y[k]
        a = dy * (d0 + d1 - 2.0 * s) + h * (s - d0)
        b = h * d0 - dy * (d0 + d1 - 2.0 * s)
        c = -s * dy
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        xi = (2.0 * c) / (-b - np.sqrt(disc))
        u = theta.copy()
        u[inside] = x[k] + xi * w
        return u

    # -- Family interface -------------------------------------------------

    def sample(self, phi, u):
        u = self.check_points(u)
        out, _, _ = self._evaluate(phi, u[:, 0])
        return out[:, None]

    def forward_log_slope(self, phi, u):
        u = self.check_points(u)
        return self._evaluate(phi, u[:, 0])[1]

    def inverse(self, phi, theta):
        theta = self.check_points(theta, "theta")
        return self._inverse(phi, theta[:, 0])[:, None]

    def log_density(self, phi, theta):
        u = self.inverse(phi, theta)[:, 0]
        _, log_slope, _ = self._evaluate(phi, u)
        return -0.5 * u**2 - 0.5 * LOG_2PI - log_slope

    def pathwise_jvp(self, phi, u, cotangent):
        u = self.check_points(u)
        c = np.asarray(cotangent, dtype=float).reshape(u.shape)[:, 0]
        _, _, ctx = self._evaluate(phi, u[:, 0])
        if not ctx["inside"].any():
            return np.zeros(self.n_params)
        g = self._raw_grad(ctx["T"].grad, ctx)
        return c[ctx["inside"]] @ g

    def grad_logq(self, phi, theta):
        theta = self.check_points(theta, "theta")
        u = self._inverse(phi, theta[:, 0])
        _, _, ctx = self._evaluate(phi, u)
        out = np.zeros((len(u), self.n_params))
        inside = ctx["inside"]
        if not inside.any():
            return out
        T, LS = ctx["T"], ctx["LS"]
        ui = u[inside]
        dT_dphi = self._raw_grad(T.grad, ctx)
        dLS_dphi = self._raw_grad(LS.grad, ctx)
        slope = np.exp(LS.val)
        du_dphi = -dT_dphi / slope[:, None]
        # log q = log N(u) - log T'(u), with u = T^{-1}(theta; phi)
        out[inside] = (
            -ui[:, None] * du_dphi - dLS_dphi - LS.grad[:, [_U]] * du_dphi
        )
        return out

    def logq_reparam(self, phi, u):
        u = self.check_points(u)
        _, log_slope, ctx = self._evaluate(phi, u[:, 0])
        values = -0.5 * u[:, 0] ** 2 - 0.5 * LOG_2PI - log_slope
        grad = np.zeros(self.n_params)
        if ctx["inside"].any():
            grad = -self._raw_grad(ctx["LS"].grad, ctx).sum(axis=0) / u.shape[0]
        return values, grad

    def marginal_means(self, phi, rng=None, size=10_000):
        return np.mean(self._draws(phi, rng, size), axis=0)

    def marginal_stds(self, phi, rng=None, size=10_000):
        return np.std(self._draws(phi, rng, size), axis=0, ddof=1)

    def _draws(self, phi, rng, size):
        rng = np.random.default_rng(0) if rng is None else rng
        return self.sample(phi, self.base_noise(rng, size))
