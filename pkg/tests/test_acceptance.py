"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
also collected into an "acceptance criteria" section of the pytest summary.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from amortflow import tensor as T
from amortflow.amortizers import build_posterior_amortizer, log_evidence, posterior_sample
from amortflow.diagnostics import misspecification_test, recovery, sbc_ranks
from amortflow.generative import (
    ConjugatePosteriorSampler,
    builtin_model,
    conjugate_gaussian,
    conjugate_log_evidence,
    conjugate_posterior,
)
from amortflow.networks import ConditionalFlow
from amortflow.rng import Rng
from amortflow.tensor import Tensor, finite_difference_check
from amortflow.training import TrainConfig, load_checkpoint, save_checkpoint, train
from conftest import ACCEPTANCE_LINES, randomize


@contextmanager
def criterion(number: int, title: str):
    """Collect measurements in a dict; record PASS if the block's asserts hold."""
    detail: dict = {}
    try:
        yield detail
    except BaseException:
        _record(number, title, "FAIL", detail)
        raise
    _record(number, title, "PASS", detail)


def _record(number, title, verdict, detail):
    text = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())
    line = f"[{verdict}] criterion {number} ({title}): {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def test_1_amortized_speed(trained_posterior):
    am, model = trained_posterior.amortizer, conjugate_gaussian()
    sets = model.sample_batch(1000, Rng(101), n_obs=32).data
    with criterion(1, "amortized speed") as d:
        posterior_sample(am, sets[0], None, 1000, Rng(0))  # warm-up
        start = time.process_time()
        draws = posterior_sample(am, sets[1], None, 1000, Rng(1))
        d["single_set_s"] = time.process_time() - start
        rng = Rng(2)
        start = time.process_time()
        for x in sets:
            posterior_sample(am, x, None, 1000, rng)
        d["thousand_sets_s"] = time.process_time() - start
        assert draws.shape == (1000, 2)
        assert d["single_set_s"] < 1.0
        assert d["thousand_sets_s"] < 60.0


def test_2_posterior_accuracy(trained_posterior):
    am, model = trained_posterior.amortizer, conjugate_gaussian()
    rng = Rng(202)
    with criterion(2, "posterior accuracy") as d:
        d["train_cpu_s"] = trained_posterior.cpu_seconds
        worst = 0.0
        for n in (4, 16, 64):
            batch = model.sample_batch(100, rng, n_obs=n)
            draws = am.sample_batch(batch.data, 1000, rng)
            mean, var = conjugate_posterior(batch.data)
            d[f"mean_err_N{n}"] = float(np.abs(draws.mean(axis=1) - mean).mean())
            d[f"sd_err_N{n}"] = float(np.abs(draws.std(axis=1) - np.sqrt(var)).mean())
            worst = max(worst, d[f"mean_err_N{n}"], d[f"sd_err_N{n}"])
        # the worked example: N = 4 with each dimension summing to 4
        example = am.sample(np.array([[0.5, 1.5], [1.0, 0.0], [2.0, 1.0], [0.5, 1.5]]), 1000, rng)
        d["example_mean"] = float(np.abs(example.mean(axis=0) - 0.8).max())
        d["example_sd"] = float(np.abs(example.std(axis=0) - math.sqrt(0.2)).max())
        assert worst < 0.1
        assert d["example_mean"] < 0.1 and d["example_sd"] < 0.1
        assert d["train_cpu_s"] <= 600


def test_3_calibration(trained_posterior):
    model = conjugate_gaussian()
    with criterion(3, "calibration") as d:
        res = sbc_ranks(trained_posterior.amortizer, model, 500, 100, Rng(303))
        d["trained_p_min"] = float(res.p_values.min())
        passes = 0
        for seed in range(100):
            control = sbc_ranks(ConjugatePosteriorSampler(), model, 500, 100, Rng(10_000 + seed))
            passes += bool(np.all(control.p_values > 0.01))
        d["control_passes"] = passes
        assert np.all(res.p_values > 0.01)
        assert passes >= 98


def test_4_recovery(trained_posterior):
    n = 32
    reference = math.sqrt(n / (n + 1))
    with criterion(4, "recovery") as d:
        rep = recovery(trained_posterior.amortizer, conjugate_gaussian(), 200, 100, Rng(404), n_obs=n)
        d["corr_min"] = float(rep.correlation.min())
        d["reference"] = reference
        d["max_gap"] = float(np.abs(rep.correlation - reference).max())
        assert np.all(rep.correlation > 0.9)
        assert d["max_gap"] < 0.05


def test_5_model_comparison(trained_comparison):
    am, mixture = trained_comparison.amortizer, builtin_model("model_pair")
    with criterion(5, "model comparison") as d:
        batch = mixture.sample_batch(200, Rng(505), n_obs=64)
        probs = am.predict_pmp(batch.data)
        d["accuracy"] = float(np.mean(probs.argmax(axis=1) == batch.model_indices))
        sums = [probs.sum(axis=1)]
        rng = Rng(506)
        for _ in range(10):
            sums.append(am.predict_pmp(mixture.sample_batch(50, rng).data).sum(axis=1))
        d["max_sum_err"] = float(np.abs(np.concatenate(sums) - 1.0).max())
        assert d["accuracy"] > 0.9
        assert d["max_sum_err"] <= 1e-6


def test_6_evidence(trained_posterior, trained_likelihood):
    post, lik, model = trained_posterior.amortizer, trained_likelihood.amortizer, conjugate_gaussian()
    rng = Rng(606)
    with criterion(6, "evidence") as d:
        sets = model.sample_batch(20, rng, n_obs=8).data
        errors = np.array([log_evidence(post, lik, model, x, rng=rng) - conjugate_log_evidence(x) for x in sets])
        d["max_abs_err_nats"] = float(np.abs(errors).max())
        d["mean_err_nats"] = float(errors.mean())
        assert np.all(np.abs(errors) < 0.5)


def test_7_misspecification(trained_posterior):
    am, model = trained_posterior.amortizer, conjugate_gaussian()
    with criterion(7, "misspecification") as d:
        rng = Rng(707)
        shifted = model.sample_batch(20, rng, n_obs=32).data + 3.0
        d["shift_p"] = misspecification_test(am, model, shifted, n_null=99, rng=rng).p_value
        p = np.empty(100)
        for seed in range(100):
            r = Rng(70_000 + seed)
            p[seed] = misspecification_test(am, model, model.sample_batch(20, r, n_obs=32).data,
                                            n_null=99, rng=r).p_value
        d["null_rejection"] = float(np.mean(p <= 0.05))
        d["limit"] = 0.05 + 2 * math.sqrt(0.05 * 0.95 / 100)
        assert d["shift_p"] <= 0.05
        assert d["null_rejection"] <= d["limit"]


_FD_CASES = {
    "exp": lambda v: T.exp(v * 0.5).sum(),
    "log": lambda v: T.log(T.square(v) + 1.0).sum(),
    "tanh": lambda v: T.tanh(v).sum(),
    "relu": lambda v: (T.relu(v) * v).sum(),
    "softplus": lambda v: T.softplus(v).sum(),
    "mul_div": lambda v: (v * v / (T.square(v) + 2.0)).sum(),
    "matmul": lambda v: T.square(v.reshape(2, 3) @ Tensor(np.arange(6.0).reshape(3, 2))).sum(),
    "reductions": lambda v: T.logsumexp(v.reshape(3, 2), axis=1).sum() + T.amax(v.reshape(2, 3), axis=1).mean(),
}


def test_8_numerical_core(tmp_path):
    rng = Rng(808)
    with criterion(8, "numerical core") as d:
        worst = 0.0
        for f in _FD_CASES.values():
            for _ in range(20):
                x = rng.normal(6)
                x[np.abs(x) < 0.05] += 0.2
                worst = max(worst, finite_difference_check(f, Tensor(x), h=1e-5))
        flow = randomize(ConditionalFlow(2, 3, n_coupling=4, hidden=(16,), rng=rng), rng, 0.3)
        fd_theta, fd_cond = Tensor(Rng(1).normal((5, 2))), Tensor(Rng(2).normal((5, 3)))
        worst = max(worst, finite_difference_check(lambda *p: flow.log_prob(fd_theta, fd_cond).mean(),
                                                   flow.parameters(), h=1e-4))
        d["fd_rel_err"] = worst

        theta, cond = rng.normal((500, 2)), rng.normal((500, 3))
        z, _ = flow.forward(theta, cond)
        d["roundtrip_err"] = float(np.abs(flow.inverse(z, cond).data - theta).max())

        axis = np.linspace(-12, 12, 601)
        g0, g1 = np.meshgrid(axis, axis, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
        c = np.repeat(rng.normal((1, 3)), len(pts), axis=0)
        dens = np.exp(flow.log_prob(pts, c).data.astype(np.float64))
        d["density_mass"] = float(dens.sum() * (axis[1] - axis[0]) ** 2)

        state = flow.state_dict()
        save_checkpoint(tmp_path / "f.bfc", state)
        back = load_checkpoint(tmp_path / "f.bfc")
        d["checkpoint_bit_exact"] = all(back[k].tobytes() == v.tobytes() for k, v in state.items())

        d["pipeline_deterministic"] = _pipeline_bytes() == _pipeline_bytes()

        assert worst < 1e-4
        assert d["roundtrip_err"] < 1e-5
        assert abs(d["density_mass"] - 1.0) < 1e-2
        assert d["checkpoint_bit_exact"] and d["pipeline_deterministic"]


def _pipeline_bytes() -> bytes:
    """Train, sample and run a diagnostic from one seed; return every output as bytes."""
    model = conjugate_gaussian()
    am = build_posterior_amortizer(model, embedding_dim=4, summary_hidden=(16,), n_coupling=2,
                                   coupling_hidden=(16,), rng=Rng(5))
    history = train(am, model, TrainConfig(epochs=2, batches_per_epoch=5, batch_size=16, seed=5,
                                           calibration_sims=300, validation_sims=50))
    data = model.sample_batch(3, Rng(6), n_obs=7).data
    draws = am.sample_batch(data, 50, Rng(7))
    ranks = sbc_ranks(am, model, 20, 9, Rng(8), n_bins=5).ranks
    params = b"".join(v.tobytes() for v in am.state_dict().values())
    return params + np.array(history.step_losses).tobytes() + draws.tobytes() + ranks.tobytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
