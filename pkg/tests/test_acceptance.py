"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the long criteria
(E1, E2 and E5 experiment runs) take a few minutes each.
"""

import os
import time

import numpy as np
import pytest
from scipy import integrate, stats

from scorelab import builders, lab
from scorelab.dsm import RiskConfig, risk_decomposition, train
from scorelab.errors import NumericalError
from scorelab.metrics import empirical_rademacher, kl_divergence_to_p0, kl_short_time_check, score_l2_error
from scorelab.ou import log_marginal_density
from scorelab.score import ScoreQuadrature, mixture_score_oracle, true_score
from scorelab.targets import TargetSpec, sample_p0

from conftest import mixture_2d

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.fixture
def verdict(capsys):
    start = time.time()

    def emit(number, name, passed, detail, budget_s):
        elapsed = time.time() - start
        status = "PASS" if passed and elapsed <= budget_s else "FAIL"
        with capsys.disabled():
            print(f"\n[criterion {number}] {status} {name}: {detail} ({elapsed:.1f}s, budget {budget_s}s)")
        assert passed, detail
        assert elapsed <= budget_s, f"runtime {elapsed:.1f}s over budget {budget_s}s"

    return emit


def test_criterion_1_oracle_consistency(verdict, mixture):
    specs = {"gauss1": TargetSpec.standard_gaussian(1), "gauss2": TargetSpec.standard_gaussian(2),
             "mixture1": mixture, "mixture2": mixture_2d()}
    rng = np.random.default_rng(2024)
    worst_fd, worst_oracle = 0.0, 0.0
    for name, spec in specs.items():
        q = ScoreQuadrature(spec)
        d = spec.dim
        for t in (0.05, 0.5, 2.0):
            x = rng.uniform(-4, 4, (100, d))
            h = 1e-4
            fd = np.stack([(log_marginal_density(spec, t, x + h * e) - log_marginal_density(spec, t, x - h * e))
                           / (2 * h) for e in np.eye(d)], axis=1)
            s = true_score(q, t, x)
            worst_fd = max(worst_fd, float((np.linalg.norm(s - fd, axis=1) / np.linalg.norm(fd, axis=1)).max()))
            exact = mixture_score_oracle(spec, t, x) if name.startswith("mixture") else -x
            worst_oracle = max(worst_oracle, float(np.abs(s - exact).max()))
    verdict(1, "oracle consistency", worst_fd <= 1e-5 and worst_oracle <= 1e-6,
            f"max relative FD gap {worst_fd:.2e} <= 1e-5, max quadrature-vs-closed-form gap {worst_oracle:.2e} <= 1e-6",
            60)


def test_criterion_2_builder_certifications(verdict):
    # path-norm orders written out independently of the builders
    jobs = {"exp": (lambda: builders.build_exp(-1.0, 1.0, 1e-2), np.e),
            "prod": (lambda: builders.build_prod(2.0, 1e-2), 4.0),
            "inv": (lambda: builders.build_inv(0.5, 2.0, 1e-2), 2.0 / 0.25),
            "quot": (lambda: builders.build_quot(2.0, 0.5, 2.0, 1e-2), max(2.0, 2.0 / 0.25) ** 2 * 2.0 / 0.25)}
    boxes = {"exp": ([-1.0], [1.0]), "prod": ([-2.0, -2.0], [2.0, 2.0]), "inv": ([0.5], [2.0]),
             "quot": ([-2.0, 0.5], [2.0, 2.0])}
    fns = {"exp": lambda X: np.exp(X[:, 0]), "prod": lambda X: X[:, 0] * X[:, 1],
           "inv": lambda X: 1 / X[:, 0], "quot": lambda X: X[:, 0] / X[:, 1]}
    ok, parts = True, []
    for name, (make, order) in jobs.items():
        net = make()
        cert = net.meta["certificate"]
        lo, hi = boxes[name]
        # re-check the sup error on an independent random grid
        X = np.random.default_rng(7).uniform(lo, hi, (10**5, len(lo)))
        err = float(np.abs(net(X)[:, 0] - fns[name](X)).max())
        passed = cert.grid_error <= 1e-2 and err <= 1e-2 and net.path_norm() <= 10 * order
        ok &= passed
        parts.append(f"{name} err={max(cert.grid_error, err):.2e} path_norm={net.path_norm():.4g}<=10x{order:.4g}")
    verdict(2, "builder certifications", ok, "; ".join(parts), 300)


def test_criterion_3_monte_carlo_rate(verdict):
    ms = [2**k for k in range(8, 15)]
    med, slope = lab.rate_experiment(ms, 20, seed=0)
    verdict(3, "Monte Carlo discretization rate", -0.7 <= slope <= -0.3,
            f"log-log slope {slope:.3f} in [-0.7, -0.3] (median sup errors {med[0]:.3g} .. {med[-1]:.3g})", 300)


def test_criterion_4_constructed_score(verdict, tmp_path):
    cfg = lab.load_config(os.path.join(CONFIGS, "e1_score_approx.yaml"))
    res = lab.run(cfg, str(tmp_path))
    checks = {c["check"]: c for c in res.checks}
    ok = checks["final_relative_l2"]["passed"] and checks["monotone_in_budget"]["passed"]
    verdict(4, "constructed score net", ok,
            f"relative L2 over levels {checks['monotone_in_budget']['detail']}; final {checks['final_relative_l2']['detail']}",
            600)


def test_criterion_5_dsm_identity(verdict, mixture):
    t = 0.5
    data = sample_p0(mixture, 10**4, 1)
    model = lambda t, x: -0.7 * np.asarray(x) + 0.1
    oracle = lambda t, x: mixture_score_oracle(mixture, t, x)
    dec = risk_decomposition(model, oracle, t, data, RiskConfig(t, n_inner=4, seed=2))
    residual = abs(dec.algebraic_residual)
    gauss = TargetSpec.standard_gaussian(1)
    train_data = sample_p0(gauss, 5 * 10**4, 3)
    times = [0.1, 0.5, 1.0]
    trained = train(gauss, times, train_data, {"L": 2, "width": 32}, {"steps": 5000}, seed=4)
    rel = [score_l2_error(trained, gauss, s, 20000, 5).extra["relative_rms"] for s in times]
    ok = residual <= 1e-8 and max(rel) <= 0.1
    verdict(5, "denoising score matching", ok,
            f"risk gap minus score error minus cross term {residual:.1e} <= 1e-8; trained Gaussian relative L2 "
            + ", ".join(f"t={s}: {r:.4f}" for s, r in zip(times, rel)) + " <= 0.1", 600)


def test_criterion_6_end_to_end_sampling(verdict, tmp_path):
    cfg = lab.load_config(os.path.join(CONFIGS, "e2_train_sample.yaml"))
    res = lab.run(cfg, str(tmp_path))
    checks = {c["check"]: c for c in res.checks}
    ok = checks["tv_oracle"]["passed"] and checks["tv_trained"]["passed"]
    verdict(6, "end-to-end sampling", ok,
            f"oracle TV {checks['tv_oracle']['detail']}; trained TV {checks['tv_trained']['detail']}", 1200)


def test_criterion_7_short_time_kl(verdict, mixture, shifted):
    grid = [0.01, 0.05, 0.1, 0.2]
    rep_s = kl_short_time_check(shifted, grid, C=10.0)
    rep_m = kl_short_time_check(mixture, grid, C=10.0)
    # closed form for N(2 e^{-t}, 1) against N(2, 1), itself checked by direct integration at t = 0.2
    closed = [2 * (1 - np.exp(-t)) ** 2 for t in grid]
    m = 2 * np.exp(-0.2)
    direct, _ = integrate.quad(lambda x: stats.norm.pdf(x, m) * (stats.norm.logpdf(x, m) - stats.norm.logpdf(x, 2.0)),
                               -10, 14, epsabs=1e-14)
    cross = max(abs(r["kl"] - c) / c for r, c in zip(rep_s.rows, closed))
    ok = rep_s.passed and rep_m.passed and cross <= 1e-6 and abs(direct - closed[-1]) <= 1e-10
    worst = max(r["kl"] / r["bound"] for r in rep_s.rows + rep_m.rows)
    verdict(7, "short-time KL", ok,
            f"KL <= 10 M_beta t on both targets (largest KL/bound {worst:.3g}); shifted closed-form gap {cross:.1e}",
            120)


def test_criterion_8_generalization_trend(verdict, tmp_path):
    cfg = lab.load_config(os.path.join(CONFIGS, "e5_generalization_trend.yaml"))
    res = lab.run(cfg, str(tmp_path), parallel_seeds=True)
    trend = [c for c in res.checks if c["check"] == "median_error_nonincreasing_in_N"][0]
    gaps = [c for c in res.checks if c["check"] == "truncation_gap"]
    ok = trend["passed"] and all(c["passed"] for c in gaps)
    verdict(8, "generalization trend", ok,
            f"median MSE {trend['detail']}; truncation gaps " + ", ".join(c["detail"] for c in gaps), 1800)


def test_criterion_9_rademacher_bound(verdict):
    rng = np.random.default_rng(99)
    ok, worst = True, 0.0
    for k in range(20):
        L = int(rng.integers(2, 5))
        K = float(rng.uniform(0.1, 5.0))
        N = int(rng.integers(50, 2001))
        d = int(rng.integers(1, 4))
        pts = rng.uniform(-1, 1, (N, d)) * rng.uniform(0.5, 3.0)
        try:
            rep = empirical_rademacher({"L": L, "K": K, "width": 16}, pts, n_draws=5, seed=k,
                                       restarts=10, steps=40)
        except NumericalError as exc:
            ok = False
            worst = max(worst, exc.diagnostics["estimate"] / exc.diagnostics["bound"])
            continue
        ok &= rep.value <= rep.extra["bound"]
        worst = max(worst, rep.value / rep.extra["bound"])
    verdict(9, "Rademacher bound", ok, f"largest estimate/bound ratio over 20 configurations {worst:.3g} <= 1", 300)
