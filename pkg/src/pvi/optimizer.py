"""Stochastic-gradient ascent for PVI objectives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .gradients import estimate_gradient
from .regularizers import RegularizerSpec, posterior_kl_surrogate, prior_kl
from .scores import draw_batch

TRACE_COLUMNS = ("iter", "objective", "regularizer", "grad_norm", "lr", "accept_rate", "dropped")


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class Constant:
    lr: float

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")


@dataclass(frozen=True)
class StepDecay:
    """``lr`` until ``at_iteration``, then ``lr * factor``."""

    lr: float
    factor: float
    at_iteration: int

    def __post_init__(self):
        if self.lr <= 0 or self.factor <= 0:
            raise ContractViolation("lr and factor must be positive")


@dataclass(frozen=True)
class WarmupCosine:
    peak_lr: float
    floor_lr: float
    warmup_iters: int
    total_iters: int

    def __post_init__(self):
        if self.peak_lr <= 0 or self.floor_lr < 0:
            raise ContractViolation("learning rates must be positive")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ContractViolation("need 0 <= warmup_iters < total_iters")


Schedule = Constant | StepDecay | WarmupCosine


def lr_at(schedule, t: int) -> float:
    if t < 0:
        raise ContractViolation("iteration must be >= 0")
    if isinstance(schedule, Constant):
        return schedule.lr
    if isinstance(schedule, StepDecay):
        return schedule.lr * (schedule.factor if t >= schedule.at_iteration else 1.0)
    if isinstance(schedule, WarmupCosine):
        if t > schedule.total_iters:
            raise ContractViolation(f"iteration {t} beyond schedule end {schedule.total_iters}")
        if t < schedule.warmup_iters:
            return schedule.peak_lr * t / schedule.warmup_iters
        progress = (t - schedule.warmup_iters) / (schedule.total_iters - schedule.warmup_iters)
        span = schedule.peak_lr - schedule.floor_lr
        return schedule.floor_lr + span * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ContractViolation(f"unknown schedule {schedule!r}")


def schedule_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "constant")
    try:
        if kind == "constant":
            return Constant(**d)
        if kind == "step_decay":
            return StepDecay(**d)
        if kind == "warmup_cosine":
            return WarmupCosine(**d)
    except TypeError as exc:
        raise ConfigurationError(f"schedule {kind}: {exc}") from None
    raise ConfigurationError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# update rules (ascent)


@dataclass
class RmspropState:
    v: np.ndarray
    decay: float = 0.9
    eps: float = 1e-8


def rmsprop_step(state: RmspropState, phi, grad, lr):
    """Return ``(new_state, new_phi)``; ``v <- decay v + (1 - decay) g^2``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.v.shape:
        raise ContractViolation("gradient and optimizer state differ in size")
    v = state.decay * state.v + (1.0 - state.decay) * grad**2
    phi = phi + lr * grad / (np.sqrt(v) + state.eps)
    return RmspropState(v, state.decay, state.eps), phi


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, phi, grad, lr):
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ContractViolation("gradient and optimizer state differ in size")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    phi = phi + lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), phi


def clip_by_global_norm(grad, max_norm):
    norm = float(np.sqrt(np.sum(grad**2)))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


# ---------------------------------------------------------------------------
# run


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "rmsprop"
    schedule: object = field(default_factory=lambda: Constant(1e-2))
    iterations: int = 10_000
    mc_size: int = 100
    minibatch: int | None = None
    clip_global_norm: float | None = None
    seed: int = 0
    log_stride: int = 10
    snapshot_stride: int = 1000
    rmsprop_decay: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    box: float | None = None  # optional projection of phi onto [-box, box]

    def __post_init__(self):
        if self.algorithm not in ("rmsprop", "adam"):
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.iterations < 1 or self.mc_size < 1 or self.log_stride < 1:
            raise ConfigurationError("iterations, mc_size and log_stride must be >= 1")
        if self.clip_global_norm is not None and self.clip_global_norm <= 0:
            raise ConfigurationError("clip_global_norm must be positive")
        if self.minibatch is not None and self.minibatch < 1:
            raise ConfigurationError("minibatch must be >= 1")


@dataclass
class PVIProblem:
    model: object
    family: object
    data: object
    score: str = "log"
    estimator: str = "log_reparam"
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)


@dataclass
class RunTrace:
    records: dict
    snapshots: list
    final_phi: np.ndarray
    flagged: int
    iterations: int
    failed: bool = False

    def column(self, name) -> np.ndarray:
        return np.asarray(self.records[name])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in zip(*(self.records[c] for c in TRACE_COLUMNS)):
                w.writerow([str(int(row[0]))] + [_fmt(v) for v in row[1:]])

    @staticmethod
    def read_csv(path) -> dict:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        cols = {h: [] for h in header}
        for r in rows[1:]:
            for h, v in zip(header, r):
                cols[h].append(float(v))
        return {h: np.asarray(v) for h, v in cols.items()}


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{float(v):.17g}"


def check_compatibility(problem: PVIProblem) -> None:
    """Reject undefined (model, score, estimator, regularizer) combinations up front."""
    m, score, est = problem.model, problem.score, problem.estimator
    valid = {
        "log": ("log_reparam", "log_rejection"),
        "quadratic": ("quadratic",),
        "crps": ("crps",),
        "energy": ("crps",),
    }
    if score not in valid:
        raise ConfigurationError(f"unknown score {score!r}")
    if est not in valid[score]:
        raise ConfigurationError(f"estimator {est!r} does not apply to score {score!r}")
    if est in ("log_reparam", "log_rejection", "quadratic") and not m.has_likelihood:
        raise ConfigurationError(f"estimator {est!r} needs an explicit likelihood; {m.name} has none")
    if est == "log_rejection" and m.log_bound(problem.data) is None:
        raise ConfigurationError(f"estimator 'log_rejection' needs a likelihood bound; {m.name} has none")
    if est == "quadratic" and not m.has_categories:
        raise ConfigurationError(f"score 'quadratic' needs a discrete-outcome model; {m.name} is not")
    if score in ("crps", "energy") and not m.has_simulator:
        raise ConfigurationError(f"score {score!r} needs a simulator or sampler; {m.name} has none")
    if score == "crps" and problem.data.outcome_dim != 1:
        raise ConfigurationError("score 'crps' needs scalar outcomes; use 'energy'")
    if score == "energy" and problem.data.outcome_dim == 1:
        raise ConfigurationError("score 'energy' is for vector outcomes; use 'crps'")
    if problem.regularizer.needs_elbo and not m.has_likelihood:
        raise ConfigurationError(f"posterior/VI term needs an explicit likelihood; {m.name} has none")
    m.check_data(problem.data)


def run_pvi(problem: PVIProblem, spec: OptimizerSpec, phi0=None) -> RunTrace:
    check_compatibility(problem)
    model, family, data = problem.model, problem.family, problem.data
    reg = problem.regularizer
    n = data.n
    rng = np.random.default_rng(spec.seed)
    phi = family.init_params() if phi0 is None else family.check_phi(phi0).copy()

    if spec.algorithm == "rmsprop":
        state = RmspropState(np.zeros_like(phi), spec.rmsprop_decay, spec.eps)
        step = rmsprop_step
    else:
        state = AdamState(np.zeros_like(phi), np.zeros_like(phi), 0, *spec.adam_betas, spec.eps)
        step = adam_step

    interpolate = reg.mode == "interpolate"
    score_weight = reg.lam if interpolate else 1.0
    use_sub = spec.minibatch is not None and spec.minibatch < n

    records = {c: [] for c in TRACE_COLUMNS}
    snapshots = []
    flagged = 0
    for t in range(spec.iterations):
        lr = lr_at(spec.schedule, t)
        sub = data.take(np.sort(rng.choice(n, spec.minibatch, replace=False))) if use_sub else data

        value = 0.0
        grad = np.zeros_like(phi)
        accept_rate, dropped = float("nan"), 0
        if score_weight > 0:
            batch = draw_batch(
                family, model, problem.score, spec.mc_size, rng, uniforms=problem.estimator == "log_rejection"
            )
            est = estimate_gradient(problem.estimator, problem.score, model, family, phi, sub, batch)
            value, grad = score_weight * est.objective, score_weight * est.grad
            dropped = est.dropped_data
            if est.accept_rate is not None:
                accept_rate = est.accept_rate

        reg_value = float("nan")
        if interpolate and reg.lam < 1:
            u = family.base_noise(rng, reg.mc_size)
            nelbo = posterior_kl_surrogate(family, phi, model, sub, u, scale=n / sub.n)
            reg_value = -nelbo.value / n
            value += (1.0 - reg.lam) * reg_value
            grad = grad - (1.0 - reg.lam) * nelbo.grad / n
        elif not interpolate and reg.kind != "none" and reg.lam > 0:
            if reg.kind == "prior_kl":
                u = None if family.kind.startswith("gaussian") else family.base_noise(rng, reg.mc_size)
                r = prior_kl(family, phi, model.prior_mean, model.prior_scale, u)
            else:
                u = family.base_noise(rng, reg.mc_size)
                r = posterior_kl_surrogate(family, phi, model, sub, u, scale=n / sub.n)
            reg_value = r.value / n
            value -= reg.lam * reg_value
            grad = grad - reg.lam * r.grad / n

        if np.all(np.isfinite(grad)):
            grad, norm = clip_by_global_norm(grad, spec.clip_global_norm)
            state, phi = step(state, phi, grad, lr)
            if spec.box is not None:
                phi = np.clip(phi, -spec.box, spec.box)
        else:
            flagged += 1
            norm = float("nan")

        if (t + 1) % spec.log_stride == 0:
            for c, v in zip(TRACE_COLUMNS, (t + 1, value, reg_value, norm, lr, accept_rate, dropped)):
                records[c].append(v)
        if spec.snapshot_stride and (t + 1) % spec.snapshot_stride == 0:
            snapshots.append((t + 1, phi.copy()))

    return RunTrace(
        records=records,
        snapshots=snapshots,
        final_phi=phi,
        flagged=flagged,
        iterations=spec.iterations,
        failed=flagged > spec.iterations / 2,
    )
