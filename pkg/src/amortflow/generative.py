"""Priors, simulators, context generators and the configurator.

A :class:`GenerativeModel` couples a prior with a simulator. Batches share
one set size ``N`` (drawn per batch from the context generator), so data
tensors are rectangular ``(batch, N, obs_dim)`` arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, FormatError, ShapeError, SimulationError
from .rng import Rng

STD_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SimulationBatch:
    """Paired draws from a generative model.

    ``params`` has shape (B, d), ``data`` (B, N, obs_dim) and ``context``
    (B, k). ``model_indices`` is only set for batches drawn from a
    :class:`ModelMixture`.
    """

    params: np.ndarray
    data: np.ndarray
    context: np.ndarray
    model_indices: np.ndarray | None = None

    def __post_init__(self):
        b = self.data.shape[0]
        if self.params.shape[0] != b or self.context.shape[0] != b:
            raise ShapeError(
                f"leading dims disagree: params {self.params.shape}, data {self.data.shape}, "
                f"context {self.context.shape}")
        if self.model_indices is not None and len(self.model_indices) != b:
            raise ShapeError("model_indices length must equal batch size")

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_obs(self) -> int:
        return self.data.shape[1]


@dataclass
class GenerativeModel:
    """A prior plus a simulator, with an optional context generator.

    Parameters
    ----------
    name : str
    param_names : list of str
    obs_dim : int
    prior_sample : callable ``(n, rng) -> (n, d)``
    prior_log_prob : callable ``(theta (n, d)) -> (n,)``
    simulator : callable ``(theta (B, d), context (B, k), n_obs, rng) -> (B, n_obs, obs_dim)``
    context_generator : callable ``rng -> int``, the set size N for a batch
    prior_variance : per-parameter prior variances, if known in closed form
    """

    name: str
    param_names: list[str]
    obs_dim: int
    prior_sample: Callable[[int, Rng], np.ndarray]
    prior_log_prob: Callable[[np.ndarray], np.ndarray]
    simulator: Callable[[np.ndarray, np.ndarray, int, Rng], np.ndarray]
    context_generator: Callable[[Rng], int]
    context_names: list[str] = field(default_factory=lambda: ["N"])
    prior_variance: np.ndarray | None = None

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    @property
    def context_dim(self) -> int:
        return len(self.context_names)

    def sample_batch(self, batch_size: int, rng: Rng, n_obs: int | None = None) -> SimulationBatch:
        """Draw context, then parameters from the prior, then data."""
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        n = self.context_generator(rng) if n_obs is None else int(n_obs)
        if n < 1:
            raise DomainError(f"set size must be >= 1, got {n}")
        context = np.full((batch_size, 1), float(n))
        theta = np.asarray(self.prior_sample(batch_size, rng), dtype=np.float64)
        data = np.asarray(self.simulator(theta, context, n, rng), dtype=np.float64)
        bad = ~np.isfinite(data).reshape(batch_size, -1).all(axis=1)
        if bad.any():
            row = int(np.argmax(bad))
            raise SimulationError(f"simulator returned non-finite data for theta={theta[row]}",
                                  theta=theta[row])
        return SimulationBatch(theta, data, context)


@dataclass
class ModelMixture:
    """Competing models with equal prior probabilities, for comparison training.

    Batches are balanced: the first ``batch_size // 2`` rows come from the
    first model and so on, with any remainder assigned to the earliest models.
    """

    name: str
    models: list[GenerativeModel]

    @property
    def model_names(self) -> list[str]:
        return [m.name for m in self.models]

    @property
    def obs_dim(self) -> int:
        return self.models[0].obs_dim

    @property
    def param_dim(self) -> int:
        return 0

    @property
    def context_dim(self) -> int:
        return self.models[0].context_dim

    def context_generator(self, rng: Rng) -> int:
        return self.models[0].context_generator(rng)

    def sample_batch(self, batch_size: int, rng: Rng, n_obs: int | None = None) -> SimulationBatch:
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        m = len(self.models)
        n = self.context_generator(rng) if n_obs is None else int(n_obs)
        counts = [batch_size // m + (1 if i < batch_size % m else 0) for i in range(m)]
        parts, labels = [], []
        for i, (model, c) in enumerate(zip(self.models, counts)):
            if c == 0:
                continue
            parts.append(model.sample_batch(c, rng, n_obs=n))
            labels.append(np.full(c, i, dtype=np.int64))
        data = np.concatenate([p.data for p in parts])
        context = np.concatenate([p.context for p in parts])
        return SimulationBatch(np.zeros((batch_size, 0)), data, context, np.concatenate(labels))


def sample_batch(model, batch_size: int, rng: Rng, n_obs: int | None = None) -> SimulationBatch:
    return model.sample_batch(batch_size, rng, n_obs=n_obs)


# ------------------------------------------------------------------ built-ins


def _set_size(low: int = 4, high: int = 64) -> Callable[[Rng], int]:
    return lambda rng: int(rng.integers(low, high + 1))


def _std_normal_prior(d: int):
    def sample(n, rng):
        return rng.normal((n, d))

    def log_prob(theta):
        theta = np.atleast_2d(theta)
        return -0.5 * np.sum(theta**2, axis=1) - 0.5 * d * LOG_2PI

    return sample, log_prob


def conjugate_gaussian() -> GenerativeModel:
    """mu ~ N(0, I_2); x_i ~ N(mu, I_2), i = 1..N."""
    sample, log_prob = _std_normal_prior(2)

    def simulate(theta, context, n, rng):
        return theta[:, None, :] + rng.normal((theta.shape[0], n, 2))

    return GenerativeModel("conjugate_gaussian", ["mu_0", "mu_1"], 2, sample, log_prob, simulate,
                           _set_size(), prior_variance=np.ones(2))


def gaussian_meanvar() -> GenerativeModel:
    """(mu, log sigma) ~ N(0, I_2); each observation is a pair of i.i.d. N(mu, sigma^2) draws."""
    sample, log_prob = _std_normal_prior(2)

    def simulate(theta, context, n, rng):
        mu, sigma = theta[:, 0], np.exp(theta[:, 1])
        return mu[:, None, None] + sigma[:, None, None] * rng.normal((theta.shape[0], n, 2))

    return GenerativeModel("gaussian_meanvar", ["mu", "log_sigma"], 2, sample, log_prob, simulate,
                           _set_size(), prior_variance=np.ones(2))


def _fixed_model(name: str, draw: Callable[[Rng, tuple], np.ndarray]) -> GenerativeModel:
    def simulate(theta, context, n, rng):
        return draw(rng, (theta.shape[0], n, 1))

    return GenerativeModel(name, [], 1, lambda n, rng: np.zeros((n, 0)),
                           lambda theta: np.zeros(np.atleast_2d(theta).shape[0]), simulate, _set_size())


def model_pair() -> ModelMixture:
    """Standard normal data versus Student-t (3 dof) data."""
    normal = _fixed_model("normal", lambda rng, shape: rng.normal(shape))
    student = _fixed_model("student_t3", lambda rng, shape: rng.student_t(3, shape))
    return ModelMixture("model_pair", [normal, student])


BUILTIN_MODELS = {
    "conjugate_gaussian": conjugate_gaussian,
    "gaussian_meanvar": gaussian_meanvar,
    "model_pair": model_pair,
}


def builtin_model(name: str):
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}",
                          key="model") from None


# ------------------------------------------------- conjugate model oracles


def conjugate_posterior(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior mean and per-dimension variance for ``conjugate_gaussian``.

    ``data`` is (N, 2) for one set or (L, N, 2) for several.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[-2]
    mean = data.sum(axis=-2) / (n + 1)
    return mean, np.full_like(mean, 1.0 / (n + 1))


def conjugate_log_evidence(data: np.ndarray) -> np.ndarray | float:
    """Closed-form log marginal likelihood of ``conjugate_gaussian``.

    Per dimension the N observations are jointly N(0, I_N + 11^T); its
    determinant is N + 1 and its inverse is I - 11^T / (N + 1).
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[-2]
    s = data.sum(axis=-2)
    quad = (data**2).sum(axis=-2) - s**2 / (n + 1)
    per_dim = -0.5 * n * LOG_2PI - 0.5 * math.log(n + 1) - 0.5 * quad
    return per_dim.sum(axis=-1)


class ConjugatePosteriorSampler:
    """Exact posterior sampler for ``conjugate_gaussian`` with the amortizer sampling interface."""

    def sample_batch(self, data, n_draws: int, rng: Rng, context=None) -> np.ndarray:
        mean, var = conjugate_posterior(data)
        mean, var = np.atleast_2d(mean), np.atleast_2d(var)
        z = rng.normal((mean.shape[0], n_draws, mean.shape[1]))
        return mean[:, None, :] + np.sqrt(var)[:, None, :] * z

    def sample(self, data, n_draws: int, rng: Rng, context=None) -> np.ndarray:
        return self.sample_batch(np.asarray(data)[None], n_draws, rng)[0]

    def log_prob(self, data, theta) -> np.ndarray:
        mean, var = conjugate_posterior(data)
        theta = np.atleast_2d(theta)
        return np.sum(-0.5 * (theta - mean) ** 2 / var - 0.5 * np.log(2 * np.pi * var), axis=1)


def grid_posterior(model: GenerativeModel, data: np.ndarray, lo: float = -5.0, hi: float = 5.0,
                   n_grid: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force normalised posterior density on a 2-D grid.

    Only valid for 2-parameter models whose likelihood is a unit-variance
    Gaussian around the parameters (``conjugate_gaussian``). Returns the grid
    axis and the density array indexed ``[i, j]`` for ``(axis[i], axis[j])``.
    """
    if model.param_dim != 2:
        raise DomainError("grid posterior is implemented for 2 parameters")
    axis = np.linspace(lo, hi, n_grid)
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
    data = np.asarray(data, dtype=np.float64)
    log_lik = np.zeros(len(pts))
    for x in data:
        log_lik += -0.5 * np.sum((x - pts) ** 2, axis=1) - LOG_2PI
    log_post = log_lik + model.prior_log_prob(pts)
    log_post -= log_post.max()
    dens = np.exp(log_post)
    cell = (axis[1] - axis[0]) ** 2
    dens /= dens.sum() * cell
    return axis, dens.reshape(n_grid, n_grid)


# --------------------------------------------------------------- configurator


@dataclass
class ConfiguredBatch:
    """Network-ready float32 view of a simulation batch."""

    targets: np.ndarray
    summary_conditions: np.ndarray
    direct_conditions: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return self.summary_conditions.shape[0]


@dataclass
class Configurator:
    """Z-scoring and condition routing between simulator output and networks.

    Data go to the summary network; context columns are direct conditions.
    With ``encode_n`` the set-size column is encoded as ``sqrt(N) / 10``.
    """

    param_mean: np.ndarray
    param_std: np.ndarray
    data_mean: np.ndarray
    data_std: np.ndarray
    encode_n: bool = True
    n_column: int = 0

    def __post_init__(self):
        # statistics are stored at float32 precision so checkpoints reproduce them exactly
        for name in ("param_mean", "param_std", "data_mean", "data_std"):
            value = np.asarray(getattr(self, name), dtype=np.float32).astype(np.float64).reshape(-1)
            setattr(self, name, value)
        if np.any(self.param_std <= 0) or np.any(self.data_std <= 0):
            raise DomainError("configurator standard deviations must be positive")

    @classmethod
    def identity(cls, param_dim: int, obs_dim: int, encode_n: bool = True) -> "Configurator":
        return cls(np.zeros(param_dim), np.ones(param_dim), np.zeros(obs_dim), np.ones(obs_dim),
                   encode_n=encode_n)

    @property
    def param_dim(self) -> int:
        return self.param_mean.size

    @property
    def obs_dim(self) -> int:
        return self.data_mean.size

    def configure_params(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.param_dim:
            raise ShapeError(f"expected {self.param_dim} parameters, got shape {theta.shape}")
        return ((theta - self.param_mean) / self.param_std).astype(np.float32)

    def deconfigure_params(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.param_dim:
            raise ShapeError(f"expected {self.param_dim} parameters, got shape {z.shape}")
        return z * self.param_std + self.param_mean

    def configure_data(self, data) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-1] != self.obs_dim:
            raise ShapeError(f"expected observation dim {self.obs_dim}, got shape {data.shape}")
        return ((data - self.data_mean) / self.data_std).astype(np.float32)

    def direct_conditions(self, context) -> np.ndarray:
        context = np.asarray(context, dtype=np.float64)
        if context.ndim != 2:
            raise ShapeError(f"context must be 2-D, got shape {context.shape}")
        out = context.copy()
        if self.encode_n and context.shape[1] > self.n_column:
            out[:, self.n_column] = np.sqrt(context[:, self.n_column]) / 10.0
        return out.astype(np.float32)

    def log_det_params(self) -> float:
        """log |d configured / d raw| for one parameter vector."""
        return float(-np.sum(np.log(self.param_std)))

    def log_det_data(self) -> float:
        return float(-np.sum(np.log(self.data_std)))

    def configure(self, batch: SimulationBatch) -> ConfiguredBatch:
        return ConfiguredBatch(self.configure_params(batch.params), self.configure_data(batch.data),
                               self.direct_conditions(batch.context), batch.model_indices)


def fit_configurator(batches: Sequence[SimulationBatch], encode_n: bool = True) -> Configurator:
    """Population mean and std of parameters and observations, std floored at 1e-6."""
    batches = list(batches)
    n_rows = sum(len(b) for b in batches)
    if n_rows < 2:
        raise DomainError(f"need at least 2 simulated rows to fit a configurator, got {n_rows}")
    params = np.concatenate([b.params for b in batches])
    obs = np.concatenate([b.data.reshape(-1, b.data.shape[-1]) for b in batches])
    p_std = np.maximum(params.std(axis=0), STD_FLOOR) if params.shape[1] else np.ones(0)
    return Configurator(params.mean(axis=0) if params.shape[1] else np.zeros(0), p_std,
                        obs.mean(axis=0), np.maximum(obs.std(axis=0), STD_FLOOR), encode_n=encode_n)


def configure(cfg: Configurator, batch: SimulationBatch) -> ConfiguredBatch:
    return cfg.configure(batch)


def calibration_batches(model, rng: Rng, n_sims: int = 10_000, batch_size: int = 100) -> list[SimulationBatch]:
    """Fresh simulations (varying N across batches) for fitting a configurator."""
    return [model.sample_batch(batch_size, rng) for _ in range(max(1, n_sims // batch_size))]


# ------------------------------------------------------------------- CSV I/O


def batch_header(batch: SimulationBatch) -> list[str]:
    d, (n, k), c = batch.params.shape[1], batch.data.shape[1:], batch.context.shape[1]
    header = [f"param_{i}" for i in range(d)]
    header += [f"data_{i}_{j}" for i in range(n) for j in range(k)]
    header += [f"context_{i}" for i in range(c)]
    if batch.model_indices is not None:
        header.append("model")
    return header


def write_batch_csv(batch: SimulationBatch, path) -> None:
    """One row per draw, ``%.8e`` floats; mixtures get a trailing ``model`` column."""
    b = len(batch)
    cols = [batch.params, batch.data.reshape(b, -1), batch.context]
    if batch.model_indices is not None:
        cols.append(batch.model_indices.reshape(b, 1).astype(np.float64))
    table = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(batch_header(batch))
        for row in table:
            w.writerow([f"{v:.8e}" for v in row])


def read_batch_csv(path) -> SimulationBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if any(len(r) != len(header) for r in body):
        raise FormatError(f"{path}: every row needs {len(header)} fields")
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    p_cols = [i for i, h in enumerate(header) if h.startswith("param_")]
    d_cols = [i for i, h in enumerate(header) if h.startswith("data_")]
    c_cols = [i for i, h in enumerate(header) if h.startswith("context_")]
    if not d_cols:
        raise FormatError(f"{path}: no data_<i>_<j> columns")
    idx = [tuple(int(p) for p in header[i].split("_")[1:3]) for i in d_cols]
    n, k = max(i for i, _ in idx) + 1, max(j for _, j in idx) + 1
    labels = None
    if "model" in header:
        labels = table[:, header.index("model")].astype(np.int64)
    return SimulationBatch(table[:, p_cols], table[:, d_cols].reshape(len(body), n, k),
                           table[:, c_cols], labels)
