import numpy as np
import pytest

from scorelab.errors import ConfigError, DomainError, NumericalError
from scorelab.metrics import tv_histogram
from scorelab.ou import marginal_density
from scorelab.sampler import (
    SamplerSchedule, default_schedule, ei_step, format_samples, oracle_source, read_samples, sample,
    write_samples,
)
from scorelab.targets import TargetSpec


def euler_maruyama(y, s_val, dt, n_sub, rng):
    """Fine reference for dY = (Y + 2 s) dt + sqrt(2) dB with s frozen."""
    h = dt / n_sub
    for _ in range(n_sub):
        y = y + (y + 2 * s_val) * h + np.sqrt(2 * h) * rng.standard_normal(y.shape)
    return y


class TestStep:
    def test_zero_score_zero_noise(self):
        y = np.array([0.3, -1.2])
        assert np.array_equal(ei_step(y, np.zeros(2), 0.37, np.zeros(2)), np.exp(0.37) * y)

    def test_small_step_taylor(self):
        y = np.array([1.3])
        s = -y / 2 + 0.4
        dt = 1e-4
        drift = y + 2 * s
        # second-order expansion of the exact update with noise switched off
        taylor = y + drift * dt + drift * dt**2 / 2
        out = ei_step(y, s, dt, np.zeros(1))
        assert np.allclose(out, taylor, atol=1e-13)
        assert np.allclose(out, y + drift * dt, atol=1e-7)

    def test_noise_variance(self, rng):
        dt = 0.3
        out = ei_step(np.zeros((10**5, 1)), np.zeros((10**5, 1)), dt, rng.standard_normal((10**5, 1)))
        assert out.var() == pytest.approx(np.expm1(2 * dt), rel=0.01)

    def test_matches_fine_euler_maruyama(self, rng):
        y0, s, dt, n = 0.8, -0.5, 0.5, 10**5
        ref = euler_maruyama(np.full(n, y0), s, dt, 500, rng)
        out = ei_step(np.full(n, y0), s, dt, rng.standard_normal(n))
        mean = np.exp(dt) * y0 + 2 * np.expm1(dt) * s
        var = np.expm1(2 * dt)
        se = np.sqrt(var / n)
        assert abs(out.mean() - mean) <= 4 * se
        # Euler-Maruyama carries an O(h) bias on top of Monte Carlo noise
        assert abs(ref.mean() - mean) <= 4 * se + 0.01
        assert ref.var() == pytest.approx(var, rel=0.03)
        assert out.var() == pytest.approx(var, rel=0.02)

    def test_semigroup_moments(self, rng):
        n, y0, s, a, b = 2 * 10**5, 0.4, 0.7, 0.2, 0.35
        two = ei_step(ei_step(np.full(n, y0), s, a, rng.standard_normal(n)), s, b, rng.standard_normal(n))
        one = ei_step(np.full(n, y0), s, a + b, rng.standard_normal(n))
        var = np.expm1(2 * (a + b))
        mean = np.exp(a + b) * y0 + 2 * np.expm1(a + b) * s
        for out in (two, one):
            assert abs(out.mean() - mean) <= 4 * np.sqrt(var / n)
            assert out.var() == pytest.approx(var, rel=0.02)

    def test_bad_step(self):
        with pytest.raises(DomainError):
            ei_step(np.zeros(1), np.zeros(1), 0.0, np.zeros(1))


class TestSchedule:
    def test_uniform(self):
        sched = SamplerSchedule.uniform(5.0, 0.01, 200)
        assert sched.M == 200
        assert sched.kappa == pytest.approx(4.99 / 200)
        assert sched.T - sched.steps[-1] == pytest.approx(0.01)

    def test_geometric_refines_toward_end(self):
        sched = SamplerSchedule.geometric(5.0, 0.01, 50)
        gaps = np.diff(sched.steps)
        assert np.all(np.diff(gaps) < 0)
        assert sched.steps[-1] == pytest.approx(4.99, abs=1e-12)

    @pytest.mark.parametrize("steps", [(0.0,), (0.0, 1.0, 0.5), (0.1, 1.0)])
    def test_invalid_grid(self, steps):
        with pytest.raises(ConfigError):
            SamplerSchedule(2.0, 1.0, steps)

    def test_default_schedule_substitution(self):
        sched = default_schedule(0.1, 1, 0.0, 0.0, 1.0)
        assert sched.T == pytest.approx(np.log(10.0), abs=1e-12)
        assert sched.t0 == pytest.approx(0.01, abs=1e-15)
        assert sched.M == int(np.ceil(np.log(10.0) / 0.1))

    def test_default_schedule_floors(self):
        sched = default_schedule(1.0, 1, 0.0, 0.0, 1e3)
        assert sched.T == 1.0
        assert sched.t0 == 1e-4

    def test_default_schedule_monotone(self):
        scheds = [default_schedule(eps, 1, 0.05, 0.05, 2.0) for eps in (0.5, 0.2, 0.1, 0.05, 0.02)]
        T = [s.T for s in scheds]
        t0 = [s.t0 for s in scheds]
        M = [s.M for s in scheds]
        assert T == sorted(T) and len(set(T)) == len(T)
        assert t0 == sorted(t0, reverse=True) and len(set(t0)) == len(t0)
        assert M == sorted(M) and len(set(M)) == len(M)

    def test_default_schedule_eps_range(self):
        with pytest.raises(ConfigError):
            default_schedule(0.0, 1, 0.0, 0.0, 1.0)


class TestSample:
    def test_gaussian_oracle_is_stationary(self):
        # with s = -x each step maps variance v to (2 - e^h)^2 v + e^{2h} - 1, which
        # keeps N(0, I) up to O(h); h = 2.95 / 800 here
        spec = TargetSpec.standard_gaussian(2)
        out = sample(oracle_source(spec), SamplerSchedule.uniform(3.0, 0.05, 800), 10**5, 0, 2)
        assert np.all(np.abs(out.mean(axis=0)) <= 0.015)
        assert np.all(np.abs(np.cov(out.T) - np.eye(2)) <= 0.02)

    def test_gaussian_oracle_every_step(self, rng):
        n, h = 10**5, 0.005
        y = rng.standard_normal((n, 1))
        v = 1.0
        for _ in range(200):
            y = ei_step(y, -y, h, rng.standard_normal(y.shape))
            v = (2 - np.exp(h)) ** 2 * v + np.expm1(2 * h)
            assert abs(y.mean()) <= 4 / np.sqrt(n)
            assert abs(y.var() - v) <= 4 * v * np.sqrt(2 / n)
            assert abs(v - 1) <= 0.01

    def test_deterministic(self, mixture):
        sched = SamplerSchedule.uniform(2.0, 0.05, 10)
        a = sample(oracle_source(mixture), sched, 100, 4, 1)
        b = sample(oracle_source(mixture), sched, 100, 4, 1)
        assert np.array_equal(a, b)

    def test_non_finite_state(self):
        bad = lambda t, x: np.full_like(x, np.inf)
        with pytest.raises(NumericalError) as info:
            sample(bad, SamplerSchedule.uniform(1.0, 0.1, 5), 10, 0, 1)
        assert info.value.diagnostics["step"] == 0


@pytest.fixture(scope="module")
def mixture_runs(mixture):
    """Oracle-score samples for several step counts, 5 seeds each, n = 1e5."""
    src = oracle_source(mixture)
    return {M: [sample(src, SamplerSchedule.uniform(5.0, 0.01, M), 10**5, seed, 1) for seed in range(5)]
            for M in (20, 25, 50, 100, 200)}


class TestMixtureSampling:
    def test_tv_to_data_distribution(self, mixture, mixture_runs):
        pdf = lambda X: np.exp(mixture.log_density(X))
        rep = tv_histogram(mixture_runs[200][0], pdf, bins=64, range_=(-6.0, 6.0))
        assert rep.value <= 0.05

    def test_coarse_grid_is_worse(self, mixture, mixture_runs):
        pdf = lambda X: np.exp(mixture.log_density(X))
        med = {M: np.median([tv_histogram(y, pdf, n_boot=20).value for y in mixture_runs[M]])
               for M in (20, 200)}
        assert med[20] > med[200]

    def test_converges_in_step_count(self, mixture, mixture_runs):
        pdf = lambda X: marginal_density(mixture, 0.01, X)
        med = [np.median([tv_histogram(y, pdf, n_boot=20).value for y in mixture_runs[M]])
               for M in (25, 50, 100, 200)]
        assert all(a > b for a, b in zip(med, med[1:]))


class TestSamplesFile:
    def test_round_trip(self, tmp_path, rng):
        sched = SamplerSchedule.uniform(5.0, 0.01, 7)
        samples = rng.standard_normal((13, 2))
        path = tmp_path / "s.csv"
        write_samples(path, samples, sched, 42, "oracle:gaussian_mixture")
        back, meta = read_samples(path)
        assert np.array_equal(back, samples)
        assert meta["seed"] == "42" and meta["M"] == "7"
        assert meta["score_source"] == "oracle:gaussian_mixture"
        assert float(meta["T"]) == 5.0 and float(meta["t0"]) == 0.01

    def test_header_lines(self):
        text = format_samples(np.zeros((2, 1)), SamplerSchedule.uniform(1.0, 0.1, 2), 3, "zero")
        lines = text.splitlines()
        assert lines[0].startswith("# schedule T=1.0 t0=0.1 M=2 kappa=")
        assert lines[1:4] == ["# seed=3", "# score_source=zero", "x0"]
