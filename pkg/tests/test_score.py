import numpy as np
import pytest
from scipy import integrate

from scorelab.errors import ConfigError, DomainError
from scorelab.ou import log_marginal_density
from scorelab.score import (
    MONTE_CARLO, ScoreQuadrature, eval_FG, fg_growth_check, gauss_hermite_nodes,
    mixture_score_oracle, true_score,
)
from scorelab.targets import TargetSpec

from conftest import mixture_2d


def quadratic_spec():
    """Centered single component with variance 1.25: f(y) = 0.1 y^2 - log(1.25)/2."""
    return TargetSpec.gaussian_mixture([1.0], [[0.0]], [1.25], 0.0, 0.1)


class TestEvalFG:
    def test_flat_tilt(self):
        q = ScoreQuadrature(TargetSpec.standard_gaussian(2))
        x = np.array([0.4, -1.3])
        F, G = eval_FG(q, 0.7, x)
        assert G == pytest.approx(1.0, abs=1e-13)
        assert np.allclose(F, np.exp(-0.7) * x, atol=1e-13)

    def test_quadratic_tilt_closed_form(self):
        beta, t, x = 0.1, 1.0, 1.0
        s2 = 1 - np.exp(-2 * t)
        closed = (1 - 2 * beta * s2) ** -0.5 * np.exp(beta * np.exp(-2 * t) * x**2 / (1 - 2 * beta * s2))
        # independent check of the closed form
        direct, _ = integrate.quad(
            lambda u: np.exp(beta * (np.exp(-t) * x + np.sqrt(s2) * u) ** 2 - u * u / 2) / np.sqrt(2 * np.pi),
            -np.inf, np.inf, epsabs=1e-14)
        assert direct == pytest.approx(closed, rel=1e-10)
        spec = quadratic_spec()
        _, G = eval_FG(ScoreQuadrature(spec), t, [x])
        assert G * np.sqrt(1.25) == pytest.approx(closed, rel=1e-10)

    def test_mixture_score_from_FG(self, mixture):
        q = ScoreQuadrature(mixture, order=64)
        F, G = eval_FG(q, 0.5, [0.3])
        s = (-0.3 + np.exp(-0.5) * F[0] / G) / (1 - np.exp(-1.0))
        assert s == pytest.approx(mixture_score_oracle(mixture, 0.5, [0.3])[0], abs=1e-6)

    def test_G_positive(self, mixture, rng):
        q = ScoreQuadrature(mixture)
        _, G = eval_FG(q, 0.2, rng.uniform(-8, 8, (200, 1)))
        assert np.all(G > 0)

    def test_quadrature_weights_normalized(self):
        for d in (1, 2, 3):
            _, w = gauss_hermite_nodes(12, d)
            assert abs(w.sum() - 1) <= 1e-12

    def test_configuration_checks(self, mixture):
        with pytest.raises(ConfigError):
            ScoreQuadrature(mixture, order=4)
        with pytest.raises(ConfigError):
            ScoreQuadrature(mixture, MONTE_CARLO, m=100, seed=0)
        with pytest.raises(DomainError):
            eval_FG(ScoreQuadrature(mixture), 0.0, [0.0])


class TestTrueScore:
    @pytest.mark.parametrize("t", [0.05, 0.5, 2.0])
    def test_gaussian_is_minus_x(self, t, rng):
        q = ScoreQuadrature(TargetSpec.standard_gaussian(2))
        x = rng.standard_normal((50, 2)) * 3
        assert np.max(np.abs(true_score(q, t, x) + x)) <= 1e-12

    def test_shifted_gaussian_zero_at_evolved_mean(self, shifted):
        q = ScoreQuadrature(shifted)
        assert abs(true_score(q, np.log(2.0), [1.0])[0]) <= 1e-12

    @pytest.mark.parametrize("t", [0.05, 0.5, 2.0])
    @pytest.mark.parametrize("which", ["gauss", "mixture", "mixture2d", "gauss2d"])
    def test_matches_finite_differences(self, which, t, mixture, rng):
        spec = {"gauss": TargetSpec.standard_gaussian(1), "mixture": mixture,
                "mixture2d": mixture_2d(), "gauss2d": TargetSpec.standard_gaussian(2)}[which]
        d = spec.dim
        q = ScoreQuadrature(spec)
        x = rng.uniform(-4, 4, (20, d))
        h = 1e-4
        fd = np.stack([(log_marginal_density(spec, t, x + h * e) - log_marginal_density(spec, t, x - h * e)) / (2 * h)
                       for e in np.eye(d)], axis=1)
        s = true_score(q, t, x)
        rel = np.linalg.norm(s - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1.0)
        assert rel.max() <= 1e-5

    def test_monte_carlo_agrees_with_quadrature(self, mixture):
        gh = ScoreQuadrature(mixture)
        mc = ScoreQuadrature(mixture, MONTE_CARLO, m=10**5, seed=3)
        x = np.array([[-2.0], [0.0], [0.7], [3.0]])
        z = (true_score(mc, 0.5, x) - true_score(gh, 0.5, x)) / mc.score_stderr(0.5, x)
        assert np.all(np.abs(z) <= 3)


class TestMixtureOracle:
    def test_single_centered_component(self, rng):
        spec = TargetSpec.gaussian_mixture([1.0], [[0.0, 0.0]], [1.0], 0.05, 0.05)
        x = rng.standard_normal((10, 2))
        for t in (0.0, 0.3, 4.0):
            assert np.allclose(mixture_score_oracle(spec, t, x), -x, atol=1e-14)

    def test_time_zero_is_data_score(self, mixture, rng):
        x = rng.uniform(-5, 5, (50, 1))
        assert np.allclose(mixture_score_oracle(mixture, 0.0, x), mixture.grad_f(x) - x, atol=1e-10)

    def test_long_time_gaussian(self, mixture):
        x = np.linspace(-3, 3, 13)[:, None]
        assert np.max(np.abs(mixture_score_oracle(mixture, 20.0, x) + x)) <= 1e-6

    def test_requires_mixture(self):
        with pytest.raises(ConfigError):
            mixture_score_oracle(TargetSpec.standard_gaussian(1), 0.1, [0.0])


class TestGrowthCheck:
    def test_flat_tilt_bounds_are_tight(self):
        q = ScoreQuadrature(TargetSpec.standard_gaussian(1))
        rep = fg_growth_check(q, 3.0, [0.1, 1.0])
        assert rep.passed
        assert rep.worst_lower_ratio == pytest.approx(1.0, abs=1e-12)
        assert rep.worst_upper_ratio == pytest.approx(1.0, abs=1e-12)

    def test_mixture_small_radius_is_outside_precondition(self, mixture):
        # R = 4 is far below max(r_f, sqrt(sup|f| / beta)) for this mixture
        rep = fg_growth_check(ScoreQuadrature(mixture), 4.0, [0.05, 0.5, 2.0])
        assert not rep.radius_condition_met
        assert not rep.passed

    def test_mixture_valid_radius_passes(self, mixture):
        rep = fg_growth_check(ScoreQuadrature(mixture), 40.0, [0.05, 0.5, 2.0])
        assert rep.radius_condition_met and rep.passed

    def test_understated_alpha_breaks_lower_bound(self, mixture):
        rep = fg_growth_check(ScoreQuadrature(mixture), 40.0, [0.05, 0.5, 2.0], alpha=0.0)
        assert not rep.passed
        assert rep.worst_lower_ratio > 1.0
        assert rep.worst_upper_ratio <= 1.0
