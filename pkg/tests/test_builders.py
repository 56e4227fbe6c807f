import numpy as np
import pytest

from scorelab import builders
from scorelab.builders import (
    ApproxBudget, HingePiece, build_exp, build_f_exp, build_inv, build_prod, build_quot,
    build_score_net, build_square, budget_schedule, mc_discretize,
)
from scorelab.errors import CertificationError, ConfigError, DomainError
from scorelab.relu import ReluNet
from scorelab.score import ScoreQuadrature, mixture_score_oracle, true_score
from scorelab.targets import TargetSpec


def exp_rebuild_error(m, seed, grid=np.linspace(0, 1, 2001)[:, None]):
    net = mc_discretize([HingePiece("exp", 0.0, 1.0)], m, seed=seed)
    return float(np.abs(net(grid)[:, 0] - (np.exp(grid[:, 0]) - 1 - grid[:, 0])).max())


class TestDiscretize:
    def test_hinge_identities(self):
        # e^x - e^a (x - a + 1) = int_a^b (x - t)^+ e^t dt on [a, b], checked with exact quadrature nodes
        x = np.linspace(-1, 1, 11)[:, None]
        net = mc_discretize([HingePiece("exp", -1.0, 1.0)], 20000, nodes="quantile")
        assert np.allclose(net(x)[:, 0], np.exp(x[:, 0]) - np.exp(-1) * (x[:, 0] + 2), atol=1e-6)
        net = mc_discretize([HingePiece("inv_cube", 0.5, 2.0)], 20000, nodes="quantile")
        xs = np.linspace(0.5, 2, 7)
        want = 1 / xs - 2 / 0.5 + xs / 0.25
        assert np.allclose(net(xs[:, None])[:, 0], want, atol=1e-5)

    def test_rate_fit_extrapolates(self):
        e256, e1024 = exp_rebuild_error(256, 0), exp_rebuild_error(1024, 0)
        # least-squares fit of c m^{-1/2} through the two points
        m = np.array([256.0, 1024.0])
        c = float(np.dot([e256, e1024], m**-0.5) / np.dot(m**-0.5, m**-0.5))
        assert exp_rebuild_error(4096, 0) <= 5 * c / 64

    def test_zero_measure(self):
        net = mc_discretize([HingePiece("exp", 0.0, 1.0, coef=0.0)], 50, seed=1)
        assert np.all(net(np.linspace(-2, 2, 9)[:, None]) == 0.0)

    def test_quadrupling_halves_error(self):
        med1 = np.median([exp_rebuild_error(1000, 100 + k) for k in range(20)])
        med4 = np.median([exp_rebuild_error(4000, 200 + k) for k in range(20)])
        assert 1.4 <= med1 / med4 <= 2.8

    def test_needs_a_node(self):
        with pytest.raises(DomainError):
            mc_discretize([HingePiece("exp", 0.0, 1.0)], [0], seed=0)
        with pytest.raises(ConfigError):
            mc_discretize([HingePiece("exp", 0.0, 1.0)], 10)


class TestScalarBuilders:
    def test_exp_unit_interval(self):
        net = build_exp(-1.0, 1.0, 1e-2)
        x = np.linspace(-1, 1, 10**4)[:, None]
        assert np.abs(net(x)[:, 0] - np.exp(x[:, 0])).max() <= 1e-2
        assert 0.99 <= net([0.0])[0] <= 1.01
        assert net.path_norm() <= 10 * np.e

    def test_exp_loose_tolerance_single_node(self):
        net = build_exp(-1.0, 1.0, 1e3)
        assert net.meta["certificate"].m == 1

    def test_exp_bad_interval(self):
        with pytest.raises(DomainError):
            build_exp(1.0, 1.0, 0.1)

    def test_square(self):
        net = build_square(3.0, 1e-2)
        x = np.linspace(-3, 3, 3001)[:, None]
        assert np.abs(net(x)[:, 0] - x[:, 0] ** 2).max() <= 2e-2
        assert net.path_norm() <= 10 * 9

    def test_prod_vanishes_on_axis(self):
        net = build_prod(2.0, 1e-2)
        x = np.linspace(-2, 2, 1001)
        assert np.abs(net(np.stack([x, np.zeros_like(x)], axis=1))[:, 0]).max() <= 1e-2

    def test_quot_at_one(self):
        net = build_quot(2.0, 0.5, 2.0, 0.02)
        assert abs(net([1.0, 1.0])[0] - 1.0) <= 0.02

    def test_inv_endpoints(self):
        net = build_inv(1.0, 2.0, 0.01)
        assert abs(net([1.0])[0] - 1.0) <= 0.01
        assert abs(net([2.0])[0] - 0.5) <= 0.01

    def test_relative_modes(self):
        net = build_exp(-2.0, 6.0, 1e-2, relative=True)
        x = np.linspace(-2, 6, 4001)[:, None]
        assert (np.abs(net(x)[:, 0] - np.exp(x[:, 0])) / np.exp(x[:, 0])).max() <= 2e-2
        net = build_inv(0.01, 3.0, 1e-2, relative=True, nodes="quantile")
        x = np.linspace(0.01, 3, 4001)[:, None]
        assert (np.abs(net(x)[:, 0] * x[:, 0] - 1)).max() <= 2e-2

    @pytest.mark.parametrize("name", ["exp", "prod", "inv", "quot"])
    def test_fine_grid_recertification(self, name):
        net = {"exp": lambda: build_exp(-1.0, 1.0, 1e-2),
               "prod": lambda: build_prod(2.0, 1e-2),
               "inv": lambda: build_inv(0.5, 2.0, 1e-2),
               "quot": lambda: build_quot(2.0, 0.5, 2.0, 1e-2)}[name]()
        cert = net.meta["certificate"]
        assert cert.grid_error <= cert.eps
        assert cert.n_fine == 10 * cert.n_grid
        assert cert.fine_grid_error <= 2 * cert.eps
        assert cert.path_norm <= cert.C * cert.path_norm_order

    def test_path_norm_cap_enforced(self):
        with pytest.raises(CertificationError):
            build_exp(-1.0, 1.0, 1e-2, C=0.1)

    def test_rigorous_bound_reported(self):
        cert = build_inv(0.5, 2.0, 1e-2).meta["certificate"]
        assert cert.rigorous_bound is not None and cert.rigorous_bound >= cert.fine_grid_error


class TestComposite:
    def test_f_exp_flat(self):
        budget = ApproxBudget(1e-2, 3.0, 100)
        net = build_f_exp(ReluNet.zero(1), budget)
        x = np.linspace(-3, 3, 101)[:, None]
        assert np.abs(net(x)[:, 0] - 1).max() <= 1e-2

    def test_f_exp_absolute_kink(self):
        phi_f = ReluNet.shallow([[1.0], [-1.0]], [0.0, 0.0], [[0.1, 0.1]], [-0.1])
        f = lambda X: 0.1 * (np.abs(X[:, 0]) - 1)
        eps = 1e-2
        beta, R = 0.1, 2.0
        budget = ApproxBudget(eps, R, 100)
        net = build_f_exp(phi_f, budget, f=f, alpha=0.1, beta=beta)
        x = np.arange(-2, 2 + 5e-4, 1e-3)[:, None]
        assert np.abs(net(x)[:, 0] - np.exp(f(x))).max() <= 2 * eps
        exp_constant = net.meta["exp"].path_norm
        assert net.path_norm() <= 10 * np.exp(beta * R**2) * phi_f.path_norm() * exp_constant
        assert budget.eta == phi_f.path_norm()
        assert budget.L_f == phi_f.depth

    def test_schedule(self):
        levels = budget_schedule(0.1, 3, 1)
        assert [b.eps for b in levels] == [0.1, 0.05, 0.025]
        assert levels[0].R < levels[1].R < levels[2].R
        assert [b.m_neurons for b in levels] == [2500, 10000, 40000]
        with pytest.raises(ConfigError):
            ApproxBudget(0.0, 1.0, 1)


class TestScoreNet:
    def test_flat_target(self, rng):
        spec = TargetSpec.standard_gaussian(1)
        budget = ApproxBudget(0.05, 4.0, 500)
        net = build_score_net(spec, ReluNet.zero(1), 0.5, budget, seed=0)
        x = rng.uniform(-3, 3, (50, 1))
        assert np.abs(net.score(x) + x).max() <= 0.05

    def test_flat_target_improves_with_budget(self, rng):
        spec = TargetSpec.standard_gaussian(1)
        x = rng.uniform(-3, 3, (400, 1))
        errs = []
        for budget in budget_schedule(0.2, 3, 1, m0=100):
            net = build_score_net(spec, ReluNet.zero(1), 0.5, budget, seed=0)
            errs.append(float(np.sqrt(np.mean((net.score(x) + x) ** 2))))
        assert errs[0] > errs[1] > errs[2]

    def test_mixture_budget(self, mixture):
        t = 0.5
        budget = ApproxBudget(0.05, 5.0, 10**4)
        phi_f = builders.log_density_net(mixture, (np.exp(-t) + np.sqrt(1 - np.exp(-2 * t))) * 5.0, 0.0125)
        net = build_score_net(mixture, phi_f, t, budget, seed=0)
        from scorelab.ou import forward_sample

        _, xt = forward_sample(mixture, t, 4000, 1)
        exact = mixture_score_oracle(mixture, t, xt)
        rel = np.sqrt(np.mean((net.score(xt) - exact) ** 2) / np.mean(exact**2))
        assert rel <= 0.1
        assert np.isfinite(budget.eta) and budget.L_f == phi_f.depth

    def test_materialized_network_matches(self, mixture):
        t = 0.5
        budget = ApproxBudget(0.1, 3.0, 40)
        phi_f = builders.log_density_net(mixture, 3.0 * 1.5, 0.025)
        net = build_score_net(mixture, phi_f, t, budget, seed=0)
        dense = net.to_relunet()
        x = np.linspace(-3, 3, 61)[:, None]
        assert np.allclose(dense(x), net(x), atol=1e-9)
        # the dense net splits the quotient into two blocks, so its product of block
        # norms is a different factorization of the same bound; they agree closely
        assert dense.path_norm() == pytest.approx(net.path_norm(), rel=0.1)

    def test_denominator_floor_violation(self):
        # a tilt far below the declared alpha makes Phi_G dip under the quotient's floor
        phi_f = ReluNet.shallow([[0.0]], [0.0], [[0.0]], [-40.0])
        spec = TargetSpec.standard_gaussian(1)
        with pytest.raises(CertificationError) as info:
            build_score_net(spec, phi_f, 0.5, ApproxBudget(0.1, 3.0, 50), seed=0)
        assert "witness" in info.value.diagnostics

    def test_time_must_be_positive(self):
        with pytest.raises(DomainError):
            build_score_net(TargetSpec.standard_gaussian(1), ReluNet.zero(1), 0.0,
                            ApproxBudget(0.1, 3.0, 50), seed=0)
