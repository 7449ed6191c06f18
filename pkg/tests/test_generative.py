import math

import numpy as np
import pytest
from scipy import stats

from amortflow.errors import ConfigError, DomainError, ShapeError, SimulationError
from amortflow.generative import (
    Configurator,
    GenerativeModel,
    SimulationBatch,
    builtin_model,
    conjugate_gaussian,
    conjugate_log_evidence,
    conjugate_posterior,
    fit_configurator,
    grid_posterior,
    read_batch_csv,
    write_batch_csv,
)
from amortflow.rng import Rng


def _batch(params, data=None):
    params = np.asarray(params, dtype=np.float64)
    data = np.zeros((len(params), 3, 2)) if data is None else data
    return SimulationBatch(params, data, np.full((len(params), 1), 3.0))


class TestSampleBatch:
    def test_deterministic(self):
        m = conjugate_gaussian()
        a, b = m.sample_batch(16, Rng(3)), m.sample_batch(16, Rng(3))
        for x, y in [(a.params, b.params), (a.data, b.data), (a.context, b.context)]:
            np.testing.assert_array_equal(x, y)

    def test_shapes_and_shared_set_size(self):
        b = conjugate_gaussian().sample_batch(10, Rng(0))
        n = b.n_obs
        assert 4 <= n <= 64
        assert b.data.shape == (10, n, 2) and b.params.shape == (10, 2)
        np.testing.assert_array_equal(b.context, n)

    def test_prior_mean_clt(self):
        b = conjugate_gaussian().sample_batch(10_000, Rng(1), n_obs=1)
        assert np.all(np.abs(b.params.mean(axis=0)) < 4 / math.sqrt(10_000))

    def test_zero_batch_rejected(self):
        with pytest.raises(DomainError):
            conjugate_gaussian().sample_batch(0, Rng(0))

    def test_non_finite_simulation_carries_theta(self):
        m = conjugate_gaussian()
        m.simulator = lambda theta, ctx, n, rng: np.full((len(theta), n, 2), np.nan)
        with pytest.raises(SimulationError) as info:
            m.sample_batch(4, Rng(0), n_obs=3)
        assert info.value.theta.shape == (2,)

    def test_set_size_range(self):
        m = conjugate_gaussian()
        r = Rng(0)
        sizes = {m.sample_batch(1, r).n_obs for _ in range(2000)}
        assert min(sizes) == 4 and max(sizes) == 64


class TestBuiltins:
    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="nope"):
            builtin_model("nope")

    def test_conjugate_posterior_example(self):
        data = np.ones((4, 2))  # sum 4 per dim, N = 4
        mean, var = conjugate_posterior(data)
        np.testing.assert_allclose(mean, [0.8, 0.8])
        np.testing.assert_allclose(var, [0.2, 0.2])

    def test_conjugate_evidence_matches_multivariate_normal(self):
        r = Rng(2)
        for n in (1, 4, 8):
            data = conjugate_gaussian().sample_batch(1, r, n_obs=n).data[0]
            cov = np.eye(n) + np.ones((n, n))
            ref = sum(stats.multivariate_normal(np.zeros(n), cov).logpdf(data[:, j]) for j in range(2))
            assert conjugate_log_evidence(data) == pytest.approx(ref, abs=1e-10)

    def test_grid_posterior_matches_analytic_at_mode(self):
        m = conjugate_gaussian()
        data = m.sample_batch(1, Rng(5), n_obs=6).data[0]
        axis, dens = grid_posterior(m, data)
        mean, var = conjugate_posterior(data)
        i, j = np.unravel_index(np.argmax(dens), dens.shape)
        analytic = stats.multivariate_normal(mean, np.diag(var)).pdf([axis[i], axis[j]])
        assert dens[i, j] == pytest.approx(analytic, rel=1e-3)

    def test_model_pair_is_balanced(self):
        mix = builtin_model("model_pair")
        b = mix.sample_batch(2 * 37, Rng(8))
        assert np.sum(b.model_indices == 0) == 37
        assert np.sum(b.model_indices == 1) == 37
        assert b.params.shape == (74, 0)

    def test_model_pair_distributions(self):
        mix = builtin_model("model_pair")
        b = mix.sample_batch(2000, Rng(1), n_obs=10)
        normal = b.data[b.model_indices == 0].ravel()
        student = b.data[b.model_indices == 1].ravel()
        assert stats.kstest(normal, "norm").pvalue > 0.001
        assert stats.kstest(student, stats.t(3).cdf).pvalue > 0.001

    def test_gaussian_meanvar_scale(self):
        m = builtin_model("gaussian_meanvar")
        theta = np.array([[1.0, math.log(2.0)]])
        x = m.simulator(theta, None, 20_000, Rng(0))
        assert x.mean() == pytest.approx(1.0, abs=0.05)
        assert x.std() == pytest.approx(2.0, rel=0.02)


class TestConfigurator:
    def test_degenerate_params(self):
        cfg = fit_configurator([_batch(np.full((5, 2), 2.5))])
        np.testing.assert_array_equal(cfg.param_mean, [2.5, 2.5])
        np.testing.assert_allclose(cfg.param_std, 1e-6, rtol=1e-6)

    def test_two_point_population_std(self):
        cfg = fit_configurator([_batch([[-1.0, 0.0], [1.0, 0.0]])])
        assert cfg.param_mean[0] == 0.0
        assert cfg.param_std[0] == 1.0

    def test_too_few_rows(self):
        with pytest.raises(DomainError):
            fit_configurator([])
        with pytest.raises(DomainError):
            fit_configurator([_batch([[1.0, 2.0]])])

    def test_roundtrip(self):
        batches = [conjugate_gaussian().sample_batch(200, Rng(i)) for i in range(3)]
        cfg = fit_configurator(batches)
        theta = batches[0].params
        back = cfg.deconfigure_params(cfg.configure_params(theta))
        assert np.abs(back - theta).max() < 1e-6

    def test_fitting_batch_is_standardised(self):
        b = conjugate_gaussian().sample_batch(5000, Rng(4), n_obs=5)
        cfg = fit_configurator([b])
        cb = cfg.configure(b)
        assert cb.targets.dtype == np.float32
        np.testing.assert_allclose(cb.targets.mean(axis=0), 0, atol=1e-5)
        np.testing.assert_allclose(cb.targets.std(axis=0), 1, atol=1e-5)

    def test_set_size_encoding(self):
        cfg = Configurator.identity(2, 2)
        np.testing.assert_allclose(cfg.direct_conditions(np.array([[16.0], [64.0]])), [[0.4], [0.8]])
        raw = Configurator.identity(2, 2, encode_n=False)
        np.testing.assert_array_equal(raw.direct_conditions(np.array([[16.0]])), [[16.0]])

    def test_empty_context(self):
        cfg = Configurator.identity(2, 2)
        b = SimulationBatch(np.zeros((3, 2)), np.zeros((3, 4, 2)), np.zeros((3, 0)))
        assert cfg.configure(b).direct_conditions.shape == (3, 0)

    def test_dim_mismatch(self):
        cfg = Configurator.identity(2, 2)
        with pytest.raises(ShapeError):
            cfg.configure(SimulationBatch(np.zeros((3, 3)), np.zeros((3, 4, 2)), np.zeros((3, 1))))
        with pytest.raises(ShapeError):
            cfg.configure_data(np.zeros((3, 4, 1)))

    def test_non_positive_std_rejected(self):
        with pytest.raises(DomainError):
            Configurator(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))


def test_leading_dims_must_agree():
    with pytest.raises(ShapeError):
        SimulationBatch(np.zeros((2, 1)), np.zeros((3, 4, 1)), np.zeros((3, 1)))


def test_batch_csv_roundtrip(tmp_path):
    b = conjugate_gaussian().sample_batch(5, Rng(0), n_obs=3)
    path = tmp_path / "batch.csv"
    write_batch_csv(b, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["param_0", "param_1", "data_0_0"]
    assert lines[0].split(",")[-1] == "context_0"
    assert "e" in lines[1].split(",")[0]
    back = read_batch_csv(path)
    np.testing.assert_allclose(back.params, b.params, rtol=1e-8)
    np.testing.assert_allclose(back.data, b.data, rtol=1e-8)
    np.testing.assert_array_equal(back.context, b.context)


def test_mixture_csv_keeps_labels(tmp_path):
    b = builtin_model("model_pair").sample_batch(6, Rng(0), n_obs=2)
    write_batch_csv(b, tmp_path / "m.csv")
    back = read_batch_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.model_indices, b.model_indices)


def test_custom_model_plugs_in():
    m = GenerativeModel("shift", ["a"], 1, lambda n, rng: rng.normal((n, 1)),
                        lambda t: np.zeros(len(t)), lambda t, c, n, rng: t[:, None, :] + np.zeros((1, n, 1)),
                        lambda rng: 3)
    b = m.sample_batch(4, Rng(0))
    np.testing.assert_array_equal(b.data[:, :, 0], np.repeat(b.params, 3, axis=1))
