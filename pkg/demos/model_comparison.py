"""
Which model generated the data?
===============================

A classifier on top of a summary network approximates posterior model
probabilities. Here the candidates are standard normal data and
Student-t data with 3 degrees of freedom.
"""

import numpy as np

from amortflow import Rng, TrainConfig, build_comparison_amortizer, builtin_model, train

mixture = builtin_model("model_pair")
print("candidates:", mixture.model_names)

amortizer = build_comparison_amortizer(mixture, rng=Rng(1))
train(amortizer, mixture, TrainConfig(epochs=8, initial_lr=1e-3, seed=4))

# heavier tails are easier to spot in larger data sets
for n in (8, 16, 64):
    test = mixture.sample_batch(200, Rng(n), n_obs=n)
    pmp = amortizer.predict_pmp(test.data)
    acc = np.mean(pmp.argmax(axis=1) == test.model_indices)
    print(f"N={n:3d}: accuracy {acc:.3f}")

# probabilities for a single data set
x = Rng(0).student_t(3, (64, 1))
for name, p in zip(mixture.model_names, amortizer.predict_pmp(x)):
    print(f"  p({name} | x) = {p:.3f}")
