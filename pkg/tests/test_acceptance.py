"""End-to-end acceptance criteria.

Each test records one ``CRITERION k: PASS|FAIL`` line; the lines are echoed
in the pytest terminal summary and printed when the module is run directly
(``python tests/test_acceptance.py``).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from pvi import models
from pvi.cli import main as cli_main
from pvi.diagnostics import heterogeneity_report, paired_difference, two_sample_ks
from pvi.families import GaussianDense, GaussianDiag, Spline1D
from pvi.gradients import estimate_gradient, finite_difference_gradient, normal_toy_gradient
from pvi.models import Dataset, NormalLocationModel
from pvi.optimizer import OptimizerSpec, PVIProblem, WarmupCosine, run_pvi
from pvi.regularizers import RegularizerSpec
from pvi.scores import draw_batch, score_objective

from test_gradients import PointSimulator2
from test_scores import Categorical2

pytestmark = pytest.mark.slow

SEEDS = range(5)
RESULTS: dict[int, str] = {}


def record(k, title, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    RESULTS[k] = line
    print(line)
    return ok


def toy_spec(seed, iters=3000, lr=0.02):
    return OptimizerSpec("rmsprop", WarmupCosine(lr, 1e-4, 100, iters), iters, 100, 256, seed=seed)


def fit_toy(n, sigma, seed, score="log", estimator="log_reparam", reg=None, iters=3000):
    data = models.generate_normal_data(n, sigma, seed)
    problem = PVIProblem(NormalLocationModel(), GaussianDiag(1), data, score, estimator, reg or RegularizerSpec())
    return data, run_pvi(problem, toy_spec(seed, iters)).final_phi


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_misspecified_optimum():
    stds, times = [], []
    for seed in SEEDS:
        t0 = time.perf_counter()
        _, phi = fit_toy(10_000, 2.0, seed)
        times.append(time.perf_counter() - t0)
        stds.append(math.exp(phi[1]))
    hits = sum(1.63 <= s <= 1.83 for s in stds)
    ok = hits >= 4 and max(times) < 120
    detail = f"stds {np.round(stds, 3).tolist()}, {hits}/5 in [1.63, 1.83], max {max(times):.1f}s per seed"
    assert record(1, "log-score PVI on the misspecified normal toy", ok, detail)


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_well_specified_concentration():
    # prior KL with lam = 1 enters as (1/n) KL; see the notes on why the
    # unregularized objective cannot order n = 1e2 against 1e4 reliably
    reg = RegularizerSpec("prior_kl", 1.0)
    small, large = [], []
    for seed in SEEDS:
        small.append(math.exp(fit_toy(100, 1.0, seed, reg=reg)[1][1]))
        large.append(math.exp(fit_toy(10_000, 1.0, seed, reg=reg)[1][1]))
    good = [b < 0.15 and b < a for a, b in zip(small, large)]
    detail = f"n=1e2 stds {np.round(small, 3).tolist()}, n=1e4 stds {np.round(large, 3).tolist()}, {sum(good)}/5 seeds"
    assert record(2, "well-specified toy concentrates as n grows", sum(good) >= 4, detail)


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_crps_optimum():
    stds = [math.exp(fit_toy(10_000, 2.0, seed, "crps", "crps", iters=5000)[1][1]) for seed in SEEDS]
    hits = sum(1.58 <= s <= 1.88 for s in stds)
    detail = f"stds {np.round(stds, 3).tolist()}, {hits}/5 in [1.58, 1.88]"
    assert record(3, "CRPS-PVI reaches the same toy optimum", hits >= 4, detail)


# -- 4 -----------------------------------------------------------------------


def _fd_cases():
    rng = np.random.default_rng(0)
    toy = models.generate_normal_data(50, 2.0, 0)
    grid = models.make_misspec_grid(2, 5, 1.0, 0)
    reg = models.generate_misspec_regression(40, grid, 0)
    return [
        ("log_reparam", "log", NormalLocationModel(), GaussianDiag(1), toy),
        ("log_reparam", "log", models.LinearRegressionModel(2), GaussianDense(2), reg),
        ("quadratic", "quadratic", Categorical2(), GaussianDiag(1), Dataset(rng.integers(0, 2, 30).astype(float))),
        ("crps", "crps", NormalLocationModel(), GaussianDiag(1), toy),
        ("crps", "crps", models.SumOfSquaresSimulator(5), Spline1D(n_bins=8, bound=4.0),
         models.generate_sum_of_squares_data(30, 5, models.BIMODAL_POPULATION, 0)),
        ("crps", "energy", PointSimulator2(), GaussianDense(2), Dataset(rng.standard_normal((20, 2)))),
    ]


def _replicate(est, score, phi, y, M, reps, rng):
    m, f = NormalLocationModel(), GaussianDiag(1)
    data = Dataset(np.array([y]))
    gs = []
    for _ in range(reps):
        batch = draw_batch(f, m, score, M, rng, uniforms=est == "log_rejection")
        gs.append(estimate_gradient(est, score, m, f, phi, data, batch).grad)
    gs = np.asarray(gs)
    gs = gs[np.all(np.isfinite(gs), axis=1)]
    return gs.mean(axis=0), gs.std(axis=0, ddof=1) / math.sqrt(len(gs))


def test_criterion_4_gradient_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {}
    for est, score, m, f, data in _fd_cases():
        tol = 1e-3 if est == "crps" else 1e-4
        key = f"{est}/{score}/{m.name}"
        for _ in range(20):
            phi = f.init_params() + 0.4 * rng.standard_normal(f.n_params)
            batch = draw_batch(f, m, score, 30, rng)
            g = estimate_gradient(est, score, m, f, phi, data, batch).grad
            fd = finite_difference_gradient(lambda p: score_objective(score, m, f, p, data, batch), phi).grad
            rel = np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6))
            worst[key] = max(worst.get(key, 0.0), rel / tol)
    fd_ok = all(v < 1 for v in worst.values())

    # replication against the closed-form oracle (itself FD-checked in the unit tests)
    phi0 = np.zeros(2)
    reps_ok = []
    for est, score, Ms in (("log_rejection", "log", (1, 10, 100)), ("crps", "crps", (10, 100))):
        target = normal_toy_gradient(score, phi0, [1.0])
        for M in Ms:
            mean, se = _replicate(est, score, phi0, 1.0, M, 500, rng)
            reps_ok.append(bool(np.all(np.abs(mean - target) < 3 * se)))
    assert normal_toy_gradient("log", phi0, [1.0])[0] == pytest.approx(0.5)
    assert normal_toy_gradient("crps", phi0, [1.0])[0] == pytest.approx(2 * norm.cdf(1 / math.sqrt(2)) - 1)
    elapsed = time.perf_counter() - t0
    ok = fd_ok and all(reps_ok) and elapsed < 300
    detail = (f"worst FD error / tolerance {max(worst.values()):.2g}, "
              f"replication {sum(reps_ok)}/{len(reps_ok)} within 3 SE, {elapsed:.1f}s")
    assert record(4, "gradient estimators against finite differences and oracles", ok, detail)


# -- 5 -----------------------------------------------------------------------


def _voting_fit(level, data, seed, interpolate):
    m = models.BinomialLogitModel(level, 10, 1)
    fam = GaussianDense(m.dim)
    reg = RegularizerSpec("none", 0.0, "interpolate") if interpolate else RegularizerSpec()
    spec = OptimizerSpec("rmsprop", WarmupCosine(0.02, 1e-4, 100, 15_000), 15_000, 100, None, seed=seed)
    phi = run_pvi(PVIProblem(m, fam, data, "log", "log_reparam", reg), spec, fam.init_params(0.0, -3.0)).final_phi
    return m, fam, phi


def test_criterion_5_heterogeneity_detection():
    cells, trials = models.voting_cells(10, 1, 3, 500)
    slope_flagged, clean = [], []
    ratios = []
    for seed in SEEDS:
        truth = models.make_voting_truth(10, 1, seed, slope_scale=0.5)
        data = models.generate_voting_data(truth, cells, trials, seed)
        for level in ("shared_slope", "state_slope"):
            m, fam, pvi = _voting_fit(level, data, seed, False)
            _, _, vi = _voting_fit(level, data, seed, True)
            rep = heterogeneity_report(fam, pvi, (fam, vi), 3.0, m.param_names)
            if level == "shared_slope":
                slope_flagged.append("slope" in rep.flagged)
                ratios.append(rep.row("slope").ratio)
            else:
                clean.append(not rep.flagged)
    ok = sum(slope_flagged) >= 4 and all(clean)
    detail = (f"shared-slope slope ratios {np.round(ratios, 2).tolist()}, flagged {sum(slope_flagged)}/5; "
              f"per-state model flag-free {sum(clean)}/5")
    assert record(5, "constant-slope voting fit flags the slope", ok, detail)


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_interpolation_endpoints():
    n, seed = 10_000, 0
    data, vi = fit_toy(n, 2.0, seed, reg=RegularizerSpec("none", 0.0, "interpolate"))
    post_mean, post_sd = data.y.sum() / (n + 1), 1 / math.sqrt(n + 1)
    vi_ok = abs(vi[0] - post_mean) < 0.05 and abs(math.exp(vi[1]) - post_sd) < 0.05
    _, pvi = fit_toy(n, 2.0, seed, reg=RegularizerSpec("none", 1.0, "interpolate"))
    pvi_ok = 1.63 <= math.exp(pvi[1]) <= 1.83
    detail = (f"lambda=0 mu {vi[0]:.4f} vs {post_mean:.4f}, sigma {math.exp(vi[1]):.4f} vs {post_sd:.4f}; "
              f"lambda=1 sigma {math.exp(pvi[1]):.3f}")
    assert record(6, "VI/PVI interpolation endpoints", vi_ok and pvi_ok, detail)


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_likelihood_free_ks_trend():
    m_rows = 10
    truth = np.abs(models.BIMODAL_POPULATION.sample(np.random.default_rng(999), 10_000)[:, 0])
    medians = []
    for n in (100, 1000, 10_000):
        ks = []
        for seed in SEEDS:
            data = models.generate_sum_of_squares_data(n, m_rows, models.BIMODAL_POPULATION, seed)
            fam = Spline1D(n_bins=16, bound=5.0)
            spec = OptimizerSpec("adam", WarmupCosine(0.01, 1e-4, 100, 4000), 4000, 100,
                                 256 if n > 256 else None, seed=seed)
            problem = PVIProblem(models.SumOfSquaresSimulator(m_rows, 1), fam, data, "crps", "crps")
            phi = run_pvi(problem, spec).final_phi
            draws = fam.sample(phi, fam.base_noise(np.random.default_rng(seed + 7), 10_000))[:, 0]
            # only |beta| is identified by the squared norm
            ks.append(two_sample_ks(np.abs(draws), truth))
        medians.append(float(np.median(ks)))
    ok = medians[0] > medians[1] > medians[2] and medians[2] < 0.15
    detail = f"median KS at n=1e2,1e3,1e4: {np.round(medians, 4).tolist()}"
    assert record(7, "likelihood-free KS distance shrinks with n", ok, detail)


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_heldout_directionality():
    d = 2
    rows = []
    for seed in SEEDS:
        grid = models.make_misspec_grid(d, 5, 1.0, seed)
        train = models.generate_misspec_regression(1000, grid, seed)
        test = models.generate_misspec_regression(1000, grid, seed + 1_000_003)
        m, fam = models.LinearRegressionModel(d), GaussianDense(d)

        def fit(score, est, reg):
            problem = PVIProblem(m, fam, train, score, est, reg)
            return run_pvi(problem, toy_spec(seed)).final_phi

        vi = fit("log", "log_reparam", RegularizerSpec("none", 0.0, "interpolate"))
        pvi_log = fit("log", "log_reparam", RegularizerSpec())
        pvi_crps = fit("crps", "crps", RegularizerSpec())
        dl, sl = paired_difference(m, fam, pvi_log, fam, vi, test, "log", 10_000, seed)
        dc, sc = paired_difference(m, fam, pvi_crps, fam, vi, test, "crps", 10_000, seed)
        rows.append((dl / sl, dc / sc))
    z = np.array(rows)
    ok = bool(np.all(z > 2))
    detail = f"log-score z {np.round(z[:, 0], 1).tolist()}, CRPS z {np.round(z[:, 1], 1).tolist()}"
    assert record(8, "PVI beats VI on held-out scores", ok, detail)


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    cfg = {
        "model": {"name": "normal_location"},
        "data": {"generator": "normal", "n": 500, "sigma_true": 2.0},
        "test_data": {"generator": "normal", "n": 50, "sigma_true": 2.0},
        "heldout": {"M": 200},
        "optimizer": {"iterations": 300, "minibatch": 64, "mc_size": 50, "log_stride": 5,
                      "schedule": {"kind": "warmup_cosine", "peak_lr": 0.02, "floor_lr": 1e-4,
                                   "warmup_iters": 30, "total_iters": 300}},
        "seed": 3,
        "sweep": {"axes": {"score": ["log", "crps"], "seed": [3, 4]}},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [cli_main(["run", "--config", str(path), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    codes += [cli_main(["sweep", "--config", str(path), "--out", str(tmp_path / f"s{j}"), "--jobs", str(j)])
              for j in (1, 2)]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("trace.csv", "summary.json"))
    cells = all(
        (tmp_path / "s1" / "cells" / f"{i:04d}" / f).read_bytes() == (tmp_path / "s2" / "cells" / f"{i:04d}" / f).read_bytes()
        for i in range(4) for f in ("trace.csv", "summary.json")
    )
    sweep = (tmp_path / "s1" / "sweep.csv").read_bytes() == (tmp_path / "s2" / "sweep.csv").read_bytes()
    ok = codes == [0, 0, 0, 0] and same and cells and sweep
    detail = f"exit codes {codes}, repeated run identical {same}, jobs 1 vs 2 identical {cells and sweep}"
    assert record(9, "bit-identical outputs across reruns and --jobs", ok, detail)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
