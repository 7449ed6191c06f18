"""
Amortized posterior inference for a conjugate Gaussian model
=============================================================

Train once on simulations, then infer posteriors for new data sets in
milliseconds. The conjugate model has a closed-form posterior, so we can
see how close the network gets.
"""

import time

import numpy as np

from amortflow import Rng, TrainConfig, build_posterior_amortizer, builtin_model, train
from amortflow.generative import conjugate_posterior
from amortflow.training import load_checkpoint, save_checkpoint

# theta ~ N(0, I_2), x_i ~ N(theta, I_2), set size N uniform on 4..64
model = builtin_model("conjugate_gaussian")

# a DeepSet compresses each data set, a coupling flow models theta given the summary
amortizer = build_posterior_amortizer(model, rng=Rng(1))
print("trainable parameters:", amortizer.n_parameters())

# online training: every step simulates a fresh batch
start = time.process_time()
history = train(amortizer, model, TrainConfig(epochs=16, initial_lr=1e-3, seed=1))
print(f"trained in {time.process_time() - start:.1f} s, "
      f"validation loss {history.initial_val_loss:.3f} -> {min(history.val_losses):.3f}")

# a new data set of any size in the training range
x = model.sample_batch(1, Rng(7), n_obs=10).data[0]
start = time.process_time()
draws = amortizer.sample(x, 1000, Rng(8))
print(f"1000 draws in {1000 * (time.process_time() - start):.1f} ms")

mean, var = conjugate_posterior(x)
print("posterior mean  network:", np.round(draws.mean(axis=0), 3), " exact:", np.round(mean, 3))
print("posterior sd    network:", np.round(draws.std(axis=0), 3), " exact:", np.round(np.sqrt(var), 3))

# the trained network is saved and reused later without retraining
save_checkpoint("posterior.bfc", amortizer.state_dict())
fresh = build_posterior_amortizer(model, rng=Rng(99))
fresh.load_state_dict(load_checkpoint("posterior.bfc"))
assert np.array_equal(fresh.sample(x, 1000, Rng(8)), draws)
print("reloaded checkpoint reproduces the draws exactly")
