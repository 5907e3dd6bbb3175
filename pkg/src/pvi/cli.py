"""Command-line driver: ``pvi {run,gradcheck,eval,sweep} --config FILE``.

Configs are JSON.  A minimal run config::

    {
      "model": {"name": "normal_location"},
      "data": {"generator": "normal", "n": 10000, "sigma_true": 2.0},
      "family": {"kind": "gaussian_diag"},
      "score": "log",
      "estimator": "log_reparam",
      "optimizer": {"iterations": 5000, "minibatch": 256,
                    "schedule": {"kind": "warmup_cosine", "peak_lr": 0.02,
                                 "floor_lr": 1e-4, "warmup_iters": 100,
                                 "total_iters": 5000}},
      "seed": 0
    }

Exit codes: 0 success, 1 runtime or tolerance failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, models
from .diagnostics import heldout_scores, heterogeneity_report, write_json
from .errors import ConfigurationError, ContractViolation
from .families import make_family
from .gradients import ESTIMATORS, estimate_gradient, finite_difference_gradient, normal_toy_gradient
from .optimizer import OptimizerSpec, PVIProblem, RunTrace, check_compatibility, run_pvi, schedule_from_dict
from .regularizers import RegularizerSpec
from .scores import SCORE_KINDS, draw_batch, score_objective

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

TOP_KEYS = {
    "model", "data", "test_data", "family", "score", "estimator", "regularizer",
    "optimizer", "seed", "output", "heldout", "gradcheck", "eval", "sweep",
}
SUMMARY_KEYS = (
    "status", "seed", "config", "n_data", "family", "final_phi", "final_segments",
    "final_mean", "final_std", "final_objective", "iterations", "logged_records",
    "flagged", "failed", "heldout",
)


class ValidationError(Exception):
    """Input problem detected before any computation (exit code 2)."""


# ---------------------------------------------------------------------------
# config -> objects


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    cfg.setdefault("_base", str(path.resolve().parent))
    return cfg


def _resolve(cfg, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def build_model(spec: dict):
    spec = dict(spec)
    name = spec.pop("name", None)
    builders = {
        "normal_location": models.NormalLocationModel,
        "linear_regression": models.LinearRegressionModel,
        "binomial_logit": models.BinomialLogitModel,
        "sum_of_squares": models.SumOfSquaresSimulator,
    }
    if name not in builders:
        raise ValidationError(f"unknown model {name!r}; choose from {sorted(builders)}")
    try:
        return builders[name](**spec)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"model {name}: {exc}") from None


def build_data(spec: dict, cfg: dict, seed: int):
    """Generate or load a dataset; generator seeds default to the run seed."""
    spec = dict(spec)
    if "csv" in spec:
        path = _resolve(cfg, spec["csv"])
        if not path.exists():
            raise ValidationError(f"data file not found: {path}")
        try:
            return models.Dataset.from_csv(path)
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"data file {path}: {exc}") from None
    gen = spec.pop("generator", None)
    data_seed = spec.pop("seed", seed)
    try:
        if gen == "normal":
            return models.generate_normal_data(spec["n"], spec["sigma_true"], data_seed)
        if gen == "misspec_regression":
            grid = models.make_misspec_grid(spec["d"], spec.get("groups", 5), spec["alpha"], spec.get("grid_seed", 0))
            return models.generate_misspec_regression(spec["n"], grid, data_seed, spec.get("sigma", 1.0))
        if gen == "sum_of_squares":
            pop = spec.get("population")
            pop = models.BIMODAL_POPULATION if pop is None else models.MixturePopulation(**pop)
            return models.generate_sum_of_squares_data(spec["n"], spec["m"], pop, data_seed)
        if gen == "voting":
            truth = models.make_voting_truth(
                spec["n_states"], spec.get("n_eth", 1), spec.get("truth_seed", 0), **spec.get("truth", {})
            )
            cells, trials = models.voting_cells(
                spec["n_states"], spec.get("n_eth", 1), spec.get("income_levels", 3), spec.get("trials", 500)
            )
            return models.generate_voting_data(truth, cells, trials, data_seed)
    except KeyError as exc:
        raise ValidationError(f"data generator {gen!r} is missing {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"data generator {gen!r}: {exc}") from None
    raise ValidationError(f"unknown data generator {gen!r}")


def build_family(spec: dict, model):
    spec = dict(spec)
    kind = spec.pop("kind", "gaussian_diag")
    spec.pop("init", None)
    try:
        return make_family(kind, model.dim, **spec)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"family {kind}: {exc}") from None


def initial_phi(spec: dict, family):
    init = spec.get("init")
    if init is None:
        return family.init_params()
    if isinstance(init, dict):
        try:
            return family.init_params(**init)
        except TypeError as exc:
            raise ValidationError(f"family init: {exc}") from None
    try:
        return family.check_phi(np.asarray(init, dtype=float))
    except ContractViolation as exc:
        raise ValidationError(str(exc)) from None


def build_optimizer(spec: dict, seed: int) -> OptimizerSpec:
    spec = dict(spec)
    sched = spec.pop("schedule", {"kind": "constant", "lr": 1e-2})
    if "adam_betas" in spec:
        spec["adam_betas"] = tuple(spec["adam_betas"])
    try:
        return OptimizerSpec(schedule=schedule_from_dict(sched), seed=seed, **spec)
    except (TypeError, ConfigurationError, ContractViolation) as exc:
        raise ValidationError(f"optimizer: {exc}") from None


@dataclass
class RunConfig:
    """A validated configuration with every object built."""

    raw: dict
    seed: int
    model: object
    data: object
    family: object
    phi0: np.ndarray
    problem: PVIProblem
    optimizer: OptimizerSpec
    test_data: object = None


def validate(cfg: dict, seed_override: int | None = None) -> RunConfig:
    """Build everything and check the whole combination before running anything."""
    unknown = set(cfg) - TOP_KEYS - {"_base"}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for key in ("model", "data"):
        if key not in cfg:
            raise ValidationError(f"config needs a {key!r} section")
    seed = int(cfg.get("seed", 0) if seed_override is None else seed_override)
    score = cfg.get("score", "log")
    if score not in SCORE_KINDS:
        raise ValidationError(f"unknown score {score!r}")
    estimator = cfg.get("estimator", _default_estimator(score))
    if estimator not in ESTIMATORS or estimator == "finite_diff":
        raise ValidationError(f"unknown estimator {estimator!r}")
    model = build_model(cfg["model"])
    data = build_data(cfg["data"], cfg, seed)
    fam_spec = cfg.get("family", {})
    family = build_family(fam_spec, model)
    phi0 = initial_phi(fam_spec, family)
    try:
        reg = RegularizerSpec(**cfg.get("regularizer", {}))
    except (TypeError, ConfigurationError) as exc:
        raise ValidationError(f"regularizer: {exc}") from None
    problem = PVIProblem(model, family, data, score, estimator, reg)
    try:
        check_compatibility(problem)
    except (ConfigurationError, ContractViolation) as exc:
        raise ValidationError(f"incompatible combination (score={score}, estimator={estimator}, "
                              f"model={model.name}): {exc}") from None
    opt = build_optimizer(cfg.get("optimizer", {}), seed)
    test = None
    if "test_data" in cfg:
        test = build_data(cfg["test_data"], cfg, seed + 1_000_003)
        try:
            model.check_data(test)
        except (ValueError, ContractViolation) as exc:
            raise ValidationError(f"test data: {exc}") from None
    return RunConfig(cfg, seed, model, data, family, phi0, problem, opt, test)


def _default_estimator(score):
    return {"log": "log_reparam", "quadratic": "quadratic"}.get(score, "crps")


def echo_config(cfg: dict, seed: int) -> dict:
    out = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in ("_base", "sweep", "output")}
    out["seed"] = seed
    return out


# ---------------------------------------------------------------------------
# commands


def execute_run(cfg: dict, out: Path, seed: int | None = None) -> dict:
    """Validate, run and write trace.csv / summary.json / data.csv / phi.json."""
    rc = validate(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    rc.data.to_csv(out / "data.csv")
    trace = run_pvi(rc.problem, rc.optimizer, rc.phi0)
    trace.to_csv(out / "trace.csv")
    fam, phi = rc.family, trace.final_phi
    objective = trace.column("objective")
    summary = {
        "status": "failed" if trace.failed else "ok",
        "seed": rc.seed,
        "config": echo_config(cfg, rc.seed),
        "n_data": rc.data.n,
        "family": fam.describe(),
        "final_phi": phi.tolist(),
        "final_segments": fam.segments(phi),
        "final_mean": np.asarray(fam.marginal_means(phi)).tolist(),
        "final_std": np.asarray(fam.marginal_stds(phi)).tolist(),
        "final_objective": float(objective[-1]) if objective.size else None,
        "iterations": trace.iterations,
        "logged_records": int(objective.size),
        "flagged": trace.flagged,
        "failed": trace.failed,
        "heldout": None,
    }
    if rc.test_data is not None:
        h = cfg.get("heldout", {})
        table = heldout_scores(rc.model, fam, phi, rc.test_data, h.get("M", 10_000), h.get("seed", rc.seed))
        summary["heldout"] = table.to_dict()
    write_json(summary, out / "summary.json")
    write_json({"family": fam.describe(), "phi": phi.tolist()}, out / "phi.json")
    return summary


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    summary = execute_run(cfg, out, args.seed)
    print(json.dumps({"status": summary["status"], "final_std": summary["final_std"], "out": str(out)}))
    return EXIT_RUNTIME if summary["failed"] else EXIT_OK


def gradcheck(rc: RunConfig, opts: dict) -> dict:
    """Frozen-batch FD comparison plus replication unbiasedness where an oracle exists."""
    problem, family, model = rc.problem, rc.family, rc.model
    est, score = problem.estimator, problem.score
    n_phi = opts.get("n_phi", 20)
    M = opts.get("M", 100)
    h = opts.get("h", 1e-5)
    rtol = opts.get("rtol", 1e-3 if est == "crps" else 1e-4)
    floor = opts.get("floor", 1e-6)
    spread = opts.get("phi_scale", 0.5)
    n_data = min(opts.get("n_data", 100), rc.data.n)
    corrupt = bool(opts.get("corrupt", False))
    data = rc.data.take(np.arange(n_data))
    root = np.random.SeedSequence(rc.seed)
    fd_stream, rep_stream = root.spawn(2)
    report = {"estimator": est, "score": score, "model": model.name, "family": family.describe()}

    if est == "log_rejection":
        report["fd"] = {"skipped": "rejection estimator targets the exact score, not the frozen-batch objective"}
        fd_ok = True
    else:
        worst = np.zeros(family.n_params)
        rng = np.random.default_rng(fd_stream)
        for _ in range(n_phi):
            phi = rc.phi0 + spread * rng.standard_normal(family.n_params)
            batch = draw_batch(family, model, score, M, rng)
            g = estimate_gradient(est, score, model, family, phi, data, batch).grad
            if corrupt:
                g = g.copy()
                g[0] += 1e-2 * max(1.0, abs(g[0]))
            fd = finite_difference_gradient(
                lambda p: score_objective(score, model, family, p, data, batch), phi, h
            ).grad
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
            worst = np.maximum(worst, rel)
        offending = [int(k) for k in np.flatnonzero(worst > rtol)]
        fd_ok = not offending
        report["fd"] = {
            "n_phi": n_phi, "M": M, "h": h, "tolerance": rtol,
            "max_rel_error": worst.tolist(), "offending": offending, "pass": fd_ok,
        }

    rep_ok = True
    if est not in ("log_rejection", "crps"):
        report["replication"] = {"skipped": f"{est} is only consistent in M, not unbiased"}
    elif not _oracle_available(model, family, score):
        report["replication"] = {"skipped": "no closed-form oracle for this combination"}
    else:
        reps = opts.get("replications", 500)
        y = np.atleast_1d(opts.get("oracle_y", 1.0))
        phi = np.asarray(opts.get("oracle_phi", [0.0, 0.0]), dtype=float)
        one = models.Dataset(y.astype(float))
        target = normal_toy_gradient(score, phi, y)
        default_ms = [1, 10, 100] if est == "log_rejection" else [10, 100]
        rows = []
        for M_rep, sub in zip(opts.get("replication_M", default_ms), rep_stream.spawn(8)):
            rng = np.random.default_rng(sub)
            gs = []
            for _ in range(reps):
                batch = draw_batch(family, model, score, M_rep, rng, uniforms=est == "log_rejection")
                gs.append(estimate_gradient(est, score, model, family, phi, one, batch).grad)
            gs = np.asarray(gs)
            kept = np.all(np.isfinite(gs), axis=1)
            mean = gs[kept].mean(axis=0)
            se = gs[kept].std(axis=0, ddof=1) / math.sqrt(kept.sum())
            ok = bool(np.all(np.abs(mean - target) <= 3 * se))
            rep_ok &= ok
            rows.append({"M": M_rep, "replications": int(kept.sum()), "mean": mean.tolist(),
                         "se": se.tolist(), "analytic": target.tolist(), "pass": ok})
        report["replication"] = rows
    report["pass"] = bool(fd_ok and rep_ok)
    return report


def _oracle_available(model, family, score) -> bool:
    return model.name == "normal_location" and family.kind == "gaussian_diag" and score in ("log", "crps")


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    rc = validate(cfg, args.seed)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    report = gradcheck(rc, cfg.get("gradcheck", {}))
    write_json(report, out / "gradcheck.json")
    fd = report["fd"]
    if not report["pass"]:
        print(json.dumps({"status": "tolerance", "offending": fd.get("offending", [])}), file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "out": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    rc = validate(cfg, args.seed)
    ev = cfg.get("eval", {})
    phi_path = args.phi or ev.get("phi")
    if phi_path is None:
        raise ValidationError("eval needs a phi snapshot (--phi)")
    phi = _load_phi(phi_path if args.phi else _resolve(cfg, phi_path), rc.family)
    test = rc.test_data
    if args.test_data:
        test = build_data({"csv": str(Path(args.test_data).resolve())}, cfg, rc.seed)
    if test is None:
        raise ValidationError("eval needs test data (--test-data or a test_data section)")
    try:
        rc.model.check_data(test)
    except (ValueError, ContractViolation) as exc:
        raise ValidationError(f"test data: {exc}") from None
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    table = heldout_scores(rc.model, rc.family, phi, test, ev.get("M", 10_000), ev.get("seed", rc.seed))
    report = {"n_test": test.n, "scores": table.to_dict(), "heterogeneity": None}
    table.to_csv(out / "scores.csv")
    ref = ev.get("reference")
    if ref is not None:
        if isinstance(ref, str):
            ref_phi = _load_phi(_resolve(cfg, ref), rc.family)
            reference = (rc.family, ref_phi)
        else:
            reference = np.asarray(ref, dtype=float)
        try:
            het = heterogeneity_report(rc.family, phi, reference, ev.get("threshold", 3.0), rc.model.param_names)
        except ContractViolation as exc:
            raise ValidationError(f"heterogeneity reference: {exc}") from None
        report["heterogeneity"] = het.to_dict()
        het.to_csv(out / "heterogeneity.csv")
    write_json(report, out / "report.json")
    print(json.dumps({"status": "ok", "out": str(out)}))
    return EXIT_OK


def _load_phi(path, family):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"phi snapshot not found: {path}")
    try:
        blob = json.loads(path.read_text())
        phi = np.asarray(blob["phi"] if isinstance(blob, dict) else blob, dtype=float)
        return family.check_phi(phi)
    except (json.JSONDecodeError, KeyError, ValueError, ContractViolation) as exc:
        raise ValidationError(f"phi snapshot {path}: {exc}") from None


# -- sweep -----------------------------------------------------------------


def _set_path(cfg, dotted, value):
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def sweep_cells(cfg: dict) -> tuple[list[str], list[tuple]]:
    axes = cfg.get("sweep", {}).get("axes")
    if not axes or not isinstance(axes, dict):
        raise ValidationError("sweep needs a non-empty 'sweep.axes' mapping")
    names = list(axes)
    for name in names:
        if not isinstance(axes[name], list) or not axes[name]:
            raise ValidationError(f"sweep axis {name!r} must be a nonempty list")
    return names, list(itertools.product(*(axes[n] for n in names)))


def _cell_config(cfg, names, values):
    cell = copy.deepcopy({k: v for k, v in cfg.items() if k != "sweep"})
    for name, value in zip(names, values):
        _set_path(cell, name, value)
    return cell


def _run_cell(job):
    index, cell, out = job
    row = {"cell": index, "status": "ok", "error": ""}
    try:
        summary = execute_run(cell, Path(out))
        row.update(
            seed=summary["seed"],
            final_mean=summary["final_mean"],
            final_std=summary["final_std"],
            final_objective=summary["final_objective"],
            flagged=summary["flagged"],
        )
        if summary["failed"]:
            row.update(status="failed", error="more than half the iterations were flagged")
    except (ValidationError, ConfigurationError, ContractViolation) as exc:
        row.update(status="invalid", error=str(exc))
    except Exception as exc:  # noqa: BLE001 - cell failures are recorded, the sweep goes on
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    names, combos = sweep_cells(cfg)
    base = dict(cfg)
    if args.seed is not None:
        base["seed"] = args.seed
    cells = [_cell_config(base, names, v) for v in combos]
    validate(cells[0])  # catch config-wide mistakes before spawning anything
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, c, str(out / "cells" / f"{i:04d}")) for i, c in enumerate(cells)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    _write_sweep_csv(out / "sweep.csv", names, combos, rows)
    bad = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"status": "ok" if not bad else "cell_failures", "cells": len(rows), "failed": bad}))
    return EXIT_RUNTIME if bad else EXIT_OK


def _write_sweep_csv(path, names, combos, rows):
    dim = max((len(r.get("final_std", [])) for r in rows), default=0)
    header = ["cell", *names, "status", "seed", "flagged", "final_objective"]
    header += [f"final_mean{j}" for j in range(dim)] + [f"final_std{j}" for j in range(dim)] + ["error"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for values, r in zip(combos, rows):
            means = r.get("final_mean", [])
            stds = r.get("final_std", [])
            w.writerow(
                [r["cell"], *(json.dumps(v) for v in values), r["status"], r.get("seed", ""),
                 r.get("flagged", ""), _cell_float(r.get("final_objective"))]
                + [_cell_float(means[j]) if j < len(means) else "" for j in range(dim)]
                + [_cell_float(stds[j]) if j < len(stds) else "" for j in range(dim)]
                + [r["error"]]
            )


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cell_float(v):
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# entry point


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if "output" in cfg:
        return _resolve(cfg, cfg["output"])
    return Path("pvi_out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvi", description="Predictive variational inference driver.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "fit one configuration"),
        ("gradcheck", "check gradient estimators against oracles"),
        ("eval", "held-out scores and heterogeneity report for a fitted phi"),
        ("sweep", "run the cross product of the configured sweep axes"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        if name == "eval":
            p.add_argument("--phi", help="phi snapshot (phi.json from a run)")
            p.add_argument("--test-data", help="held-out data CSV")
    return parser


COMMANDS = {"run": cmd_run, "gradcheck": cmd_gradcheck, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        return _fail(args, EXIT_INVALID, "validation", "--jobs must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        return _fail(args, EXIT_INVALID, "validation", str(exc))
    except (ConfigurationError, ContractViolation) as exc:
        return _fail(args, EXIT_INVALID, "validation", str(exc))
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as JSON
        return _fail(args, EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")


def _fail(args, code, kind, message) -> int:
    err = {"status": "error", "kind": kind, "exit_code": code, "command": args.command, "message": message}
    print(json.dumps(err), file=sys.stderr)
    if args.out:
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_json(err, Path(args.out) / "error.json")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
