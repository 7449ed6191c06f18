"""
Criticising a trained posterior network
=======================================

Before trusting a network, run the diagnostics on it. The last one asks
whether observed data look like the simulations it was trained on.
"""

import numpy as np

from amortflow import Rng, TrainConfig, build_posterior_amortizer, builtin_model, train
from amortflow.diagnostics import misspecification_test, posterior_contraction, recovery, sbc_ranks

model = builtin_model("conjugate_gaussian")
amortizer = build_posterior_amortizer(model, rng=Rng(1))
train(amortizer, model, TrainConfig(epochs=16, initial_lr=1e-3, seed=1))
rng = Rng(2)

# recovery: posterior means against the true parameters
rep = recovery(amortizer, model, n_sims=200, n_draws=100, rng=rng, n_obs=32)
print("recovery correlation:", np.round(rep.correlation, 3), " (exact posterior: 0.985)")

# calibration: ranks of the truth among posterior draws should be uniform
sbc = sbc_ranks(amortizer, model, n_sims=500, n_draws=100, rng=rng)
print("SBC chi-square p-values:", np.round(sbc.p_values, 3))

# contraction: 1 - posterior variance / prior variance
for n in (4, 64):
    c = posterior_contraction(amortizer, model, 200, 200, rng, n_obs=n)
    print(f"contraction at N={n}:", np.round(c, 3), f" (exact {1 - 1 / (n + 1):.3f})")

# misspecification: compare summary embeddings of observed and simulated sets
good = model.sample_batch(20, rng, n_obs=32).data
shifted = good + 3.0
for label, observed in (("well specified", good), ("shifted by 3 sd", shifted)):
    res = misspecification_test(amortizer, model, observed, n_null=99, rng=rng)
    print(f"{label:16s} MMD^2 {res.observed_mmd2:8.4f}  p = {res.p_value:.2f}")
