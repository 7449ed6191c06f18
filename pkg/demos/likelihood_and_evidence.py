"""
Emulating a simulator and estimating the evidence
==================================================

A likelihood amortizer learns the density of single observations given
parameters. Combined with a posterior amortizer it gives the log marginal
likelihood through p(x) = p(x | theta) p(theta) / p(theta | x).
"""

import numpy as np

from amortflow import (
    Rng,
    TrainConfig,
    build_likelihood_amortizer,
    build_posterior_amortizer,
    builtin_model,
    expected_log_predictive_density,
    log_evidence,
    train,
)
from amortflow.generative import conjugate_log_evidence

model = builtin_model("conjugate_gaussian")
settings = dict(epochs=16, initial_lr=1e-3)

posterior = build_posterior_amortizer(model, rng=Rng(1))
train(posterior, model, TrainConfig(seed=1, **settings))

# each observation in a set is one training row for the likelihood flow
likelihood = build_likelihood_amortizer(model, rng=Rng(2))
train(likelihood, model, TrainConfig(seed=3, **settings))

# emulated data looks like simulated data
theta = np.array([1.0, -0.5])
fake = likelihood.sample(theta, 2000, Rng(4))
print("emulated mean:", np.round(fake.mean(axis=0), 3), " sd:", np.round(fake.std(axis=0), 3))

# evidence: network estimate against the closed form
rng = Rng(5)
for x in model.sample_batch(5, rng, n_obs=8).data:
    est = log_evidence(posterior, likelihood, model, x, rng=rng)
    print(f"log p(x): network {est:8.3f}   exact {conjugate_log_evidence(x):8.3f}")

# out-of-sample predictive performance of held-out observations
data = model.sample_batch(1, rng, n_obs=20).data[0]
elpd = expected_log_predictive_density(posterior, likelihood, data[:16], data[16:], rng=rng)
print(f"expected log predictive density of 4 held-out points: {elpd:.3f}")
