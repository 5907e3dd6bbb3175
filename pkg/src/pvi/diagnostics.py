"""Post-hoc checks: heterogeneity flags, two-sample KS distance, held-out score tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .scores import draw_batch, score_terms

HELDOUT_KINDS = ("log", "quadratic", "crps", "energy")


def two_sample_ks(a, b) -> float:
    """Largest gap between the two empirical CDFs, taken over the pooled points."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractViolation("KS needs two nonempty samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractViolation("KS samples must be finite")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# ---------------------------------------------------------------------------
# heterogeneity


@dataclass(frozen=True)
class HeterogeneityRow:
    name: str
    pvi_std: float
    reference_std: float
    ratio: float
    flag: bool


@dataclass
class HeterogeneityReport:
    rows: list[HeterogeneityRow]
    threshold: float

    @property
    def flagged(self) -> list[str]:
        return [r.name for r in self.rows if r.flag]

    def row(self, name) -> HeterogeneityRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [{**asdict(r), "ratio": _json_float(r.ratio)} for r in self.rows],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "pvi_std", "reference_std", "ratio", "flag"])
            for r in self.rows:
                w.writerow([r.name, repr(r.pvi_std), repr(r.reference_std), repr(r.ratio), int(r.flag)])


def heterogeneity_report(family, phi_pvi, reference, threshold: float = 3.0, names=None) -> HeterogeneityReport:
    """Compare marginal q stds against a reference fit.

    ``reference`` is either a ``(family, phi)`` pair (typically the VI fit)
    or an array of reference standard deviations (e.g. the exact posterior).
    A zero reference std gives an infinite ratio, which is flagged.
    """
    if threshold <= 0:
        raise ContractViolation("threshold must be positive")
    pvi = np.asarray(family.marginal_stds(family.check_phi(phi_pvi)), dtype=float)
    if isinstance(reference, tuple):
        ref_family, ref_phi = reference
        ref = np.asarray(ref_family.marginal_stds(ref_family.check_phi(ref_phi)), dtype=float)
    else:
        ref = np.atleast_1d(np.asarray(reference, dtype=float))
    if ref.shape != pvi.shape:
        raise ContractViolation(f"reference has {ref.size} parameters, PVI fit has {pvi.size}")
    if np.any(ref < 0) or np.any(pvi < 0):
        raise ContractViolation("standard deviations must be >= 0")
    names = list(names) if names is not None else [f"theta[{j}]" for j in range(pvi.size)]
    if len(names) != pvi.size:
        raise ContractViolation("one name per parameter")
    rows = []
    for name, s, r in zip(names, pvi, ref):
        ratio = s / r if r > 0 else math.inf
        rows.append(HeterogeneityRow(name, float(s), float(r), float(ratio), bool(ratio > threshold)))
    return HeterogeneityReport(rows, threshold)


# ---------------------------------------------------------------------------
# held-out scores


@dataclass(frozen=True)
class ScoreRow:
    kind: str
    mean: float
    se: float
    n_test: int


@dataclass
class ScoreTable:
    rows: dict[str, ScoreRow]
    M: int
    seed: int
    skipped: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, kind) -> ScoreRow:
        return self.rows[kind]

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "seed": self.seed,
            "scores": {k: asdict(r) for k, r in self.rows.items()},
            "skipped": dict(self.skipped),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "mean", "se", "n_test"])
            for r in self.rows.values():
                w.writerow([r.kind, repr(r.mean), repr(r.se), r.n_test])


def heldout_batch(family, model, kind, M, seed):
    """The noise batch ``heldout_scores`` uses for ``kind``; one substream per kind."""
    stream = np.random.SeedSequence([int(seed), HELDOUT_KINDS.index(kind)])
    return draw_batch(family, model, kind, M, np.random.default_rng(stream))


def heldout_terms(model, family, phi, data, kind, batch, chunk: int = 256) -> np.ndarray:
    """Per-datum scores, evaluated in data chunks to bound memory.

    Row reductions do not depend on the chunking, so the result equals the
    unchunked ``scores.score_terms`` bit for bit.
    """
    parts = []
    for start in range(0, data.n, chunk):
        sub = data.take(np.arange(start, min(start + chunk, data.n)))
        parts.append(np.asarray(score_terms(kind, model, family, phi, sub, batch), dtype=float))
    return np.concatenate(parts)


def applicable_kinds(model, data) -> dict[str, str | None]:
    """Map each held-out score kind to ``None`` if usable, else the reason it is skipped."""
    out = {}
    for kind in HELDOUT_KINDS:
        reason = None
        if kind == "log" and not model.has_likelihood:
            reason = "no explicit likelihood"
        elif kind == "quadratic" and not getattr(model, "has_categories", False):
            reason = "outcomes are not categorical"
        elif kind in ("crps", "energy") and not model.has_simulator:
            reason = "no simulator"
        elif kind == "crps" and data.outcome_dim != 1:
            reason = "vector outcomes (use energy)"
        elif kind == "energy" and data.outcome_dim == 1:
            reason = "scalar outcomes (use crps)"
        out[kind] = reason
    return out


def heldout_scores(model, family, phi, test_data, M: int = 10_000, seed: int = 0, kinds=None) -> ScoreTable:
    """Mean held-out score per datum and its standard error across data."""
    phi = family.check_phi(phi)
    model.check_data(test_data)
    if test_data.n < 1:
        raise ContractViolation("need at least one test datum")
    status = applicable_kinds(model, test_data)
    wanted = HELDOUT_KINDS if kinds is None else tuple(kinds)
    rows, skipped = {}, {}
    for kind in wanted:
        if kind not in status:
            raise ConfigurationError(f"unknown score kind {kind!r}")
        if status[kind] is not None:
            skipped[kind] = status[kind]
            continue
        batch = heldout_batch(family, model, kind, M, seed)
        terms = heldout_terms(model, family, phi, test_data, kind, batch)
        n = terms.size
        se = float(np.std(terms, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        rows[kind] = ScoreRow(kind, float(np.mean(terms)), se, n)
    return ScoreTable(rows, M, int(seed), skipped)


def paired_difference(model, family_a, phi_a, family_b, phi_b, test_data, kind, M=10_000, seed=0):
    """Mean and SE of per-datum score differences ``a - b`` on shared test data."""
    ta = heldout_terms(model, family_a, phi_a, test_data, kind, heldout_batch(family_a, model, kind, M, seed))
    tb = heldout_terms(model, family_b, phi_b, test_data, kind, heldout_batch(family_b, model, kind, M, seed))
    d = ta - tb
    return float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(d.size))


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _json_float(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")
