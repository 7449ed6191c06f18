"""Model criticism: recovery, simulation-based calibration, contraction, MMD misspecification.

Every diagnostic takes a *sampler*: any object with
``sample_batch(data, n_draws, rng, context=None) -> (L, n_draws, d)``, which
covers trained posterior amortizers as well as exact reference samplers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DomainError, SimulationError
from .rng import Rng

CHUNK = 100


def _simulate(model, n_sims: int, rng: Rng, n_obs: int | None):
    """Simulate ``n_sims`` rows in chunks; failed chunks are skipped and counted."""
    batches, failed, done = [], 0, 0
    while done < n_sims:
        size = min(CHUNK, n_sims - done)
        done += size
        try:
            batches.append(model.sample_batch(size, rng, n_obs=n_obs))
        except SimulationError:
            failed += size
    return batches, failed


def _param_names(model, d: int) -> list[str]:
    names = list(getattr(model, "param_names", []) or [])
    return names if len(names) == d else [f"param_{i}" for i in range(d)]


# ------------------------------------------------------------------ recovery


def pearson(a, b) -> float:
    """Pearson correlation, or NaN when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return float("nan")
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


@dataclass
class RecoveryReport:
    param_names: list[str]
    true: np.ndarray
    post_mean: np.ndarray
    post_sd: np.ndarray
    correlation: np.ndarray
    rmse: np.ndarray

    @classmethod
    def from_estimates(cls, true, post_mean, post_sd=None, param_names=None) -> "RecoveryReport":
        true = np.asarray(true, dtype=np.float64)
        post_mean = np.asarray(post_mean, dtype=np.float64)
        post_sd = np.zeros_like(post_mean) if post_sd is None else np.asarray(post_sd, dtype=np.float64)
        d = true.shape[1]
        corr = np.array([pearson(true[:, j], post_mean[:, j]) for j in range(d)])
        rmse = np.sqrt(np.mean((true - post_mean) ** 2, axis=0))
        names = param_names or [f"param_{j}" for j in range(d)]
        return cls(list(names), true, post_mean, post_sd, corr, rmse)


def recovery(sampler, model, n_sims: int, n_draws: int, rng: Rng, n_obs: int | None = None) -> RecoveryReport:
    """Correlation and RMSE between true parameters and posterior means.

    A zero-variance column yields a NaN correlation rather than an error.
    """
    if n_sims < 2:
        raise DomainError("recovery needs n_sims >= 2")
    batches, _ = _simulate(model, n_sims, rng, n_obs)
    true, means, sds = [], [], []
    for b in batches:
        draws = sampler.sample_batch(b.data, n_draws, rng, b.context)
        true.append(b.params)
        means.append(draws.mean(axis=1))
        sds.append(draws.std(axis=1))
    true = np.concatenate(true)
    return RecoveryReport.from_estimates(true, np.concatenate(means), np.concatenate(sds),
                                        _param_names(model, true.shape[1]))


# ----------------------------------------------------------------------- SBC


def _gammainc_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if a <= 0:
        raise DomainError("shape parameter must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gammainc_series(a, x))
    return min(1.0, _gammaincc_cf(a, x))


def chi2_sf(stat: float, dof: int) -> float:
    """Survival function of the chi-square distribution."""
    return regularized_gamma_q(0.5 * dof, 0.5 * stat)


def rank_bins(n_draws: int, n_bins: int) -> np.ndarray:
    """Bin index for every possible rank 0..n_draws, bins as equal as possible."""
    return (np.arange(n_draws + 1) * n_bins) // (n_draws + 1)


def uniformity_test(ranks, n_draws: int, n_bins: int = 10) -> tuple[float, float]:
    """Chi-square test that ranks are uniform on {0, ..., n_draws}.

    Expected counts are proportional to how many rank values each bin
    covers, which is exactly ``L / n_bins`` when ``n_draws + 1`` divides evenly.
    """
    if n_bins < 2:
        raise DomainError("uniformity test needs at least 2 bins")
    if n_bins > n_draws + 1:
        raise DomainError(f"{n_bins} bins cannot partition {n_draws + 1} rank values")
    ranks = np.asarray(ranks, dtype=np.int64).reshape(-1)
    if ranks.size == 0:
        raise DomainError("no ranks to test")
    if ranks.min() < 0 or ranks.max() > n_draws:
        raise DomainError(f"ranks must lie in [0, {n_draws}]")
    bins = rank_bins(n_draws, n_bins)
    observed = np.bincount(bins[ranks], minlength=n_bins).astype(np.float64)
    expected = ranks.size * np.bincount(bins, minlength=n_bins) / (n_draws + 1)
    stat = float(np.sum((observed - expected) ** 2 / expected))
    return stat, chi2_sf(stat, n_bins - 1)


@dataclass
class SbcResult:
    param_names: list[str]
    ranks: np.ndarray
    n_draws: int
    chi2: np.ndarray
    p_values: np.ndarray
    n_bins: int
    n_failed: int = 0


def sbc_ranks(sampler, model, n_sims: int, n_draws: int, rng: Rng, n_bins: int = 10,
              n_obs: int | None = None) -> SbcResult:
    """Rank of each true parameter among posterior draws (strictly less counts)."""
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    if n_sims < n_bins:
        raise DomainError(f"need at least as many simulations ({n_sims}) as bins ({n_bins})")
    batches, failed = _simulate(model, n_sims, rng, n_obs)
    ranks = []
    for b in batches:
        draws = sampler.sample_batch(b.data, n_draws, rng, b.context)
        ranks.append(np.sum(draws < b.params[:, None, :], axis=1))
    ranks = np.concatenate(ranks).astype(np.int64)
    tests = [uniformity_test(ranks[:, j], n_draws, n_bins) for j in range(ranks.shape[1])]
    return SbcResult(_param_names(model, ranks.shape[1]), ranks, n_draws,
                     np.array([t[0] for t in tests]), np.array([t[1] for t in tests]), n_bins, failed)


# --------------------------------------------------------------- contraction


def prior_variance(model, rng: Rng | None = None, n: int = 10_000) -> np.ndarray:
    known = getattr(model, "prior_variance", None)
    if known is not None:
        return np.asarray(known, dtype=np.float64)
    rng = rng if rng is not None else Rng(0)
    return np.var(model.prior_sample(n, rng), axis=0)


def posterior_contraction(sampler, model, n_sims: int, n_draws: int, rng: Rng,
                          n_obs: int | None = None) -> np.ndarray:
    """``1 - mean posterior variance / prior variance`` per parameter."""
    pv = prior_variance(model)
    if np.any(pv <= 0):
        raise DomainError("prior variance must be positive")
    batches, _ = _simulate(model, n_sims, rng, n_obs)
    variances = [sampler.sample_batch(b.data, n_draws, rng, b.context).var(axis=1) for b in batches]
    return 1.0 - np.concatenate(variances).mean(axis=0) / pv


# -------------------------------------------------------------------- MMD


def gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def mmd2_unbiased(x, y, bandwidth: float) -> float:
    """Unbiased squared MMD with a Gaussian kernel; may be slightly negative."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise DomainError(f"MMD needs at least 2 samples per side, got {n} and {m}")
    if not bandwidth > 0:
        raise DomainError("bandwidth must be positive")
    kxx = gaussian_kernel(x, x, bandwidth)
    kyy = gaussian_kernel(y, y, bandwidth)
    kxy = gaussian_kernel(x, y, bandwidth)
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def median_heuristic(x, floor: float = 1e-6) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) < 2:
        return floor
    return max(float(np.median(pdist(x))), floor)


def rank_p_value(observed: float, null) -> float:
    null = np.asarray(null, dtype=np.float64)
    return (1.0 + float(np.sum(null >= observed))) / (null.size + 1.0)


@dataclass
class MisspecResult:
    observed_mmd2: float
    null_mmd2: np.ndarray
    p_value: float
    bandwidth: float


def misspecification_test(amortizer, model, observed_sets, n_null: int = 99, n_ref: int = 200,
                          rng: Rng | None = None) -> MisspecResult:
    """MMD between embeddings of observed sets and of fresh simulations.

    The null distribution replaces the observed sets by the same number of
    simulated sets, each replica compared with the same reference cloud, so
    under a well-specified model the observed statistic is exchangeable
    with the replicas. ``amortizer`` must provide ``embed(data)``.
    """
    if n_null < 19:
        raise DomainError("need at least 19 null replicas")
    rng = rng if rng is not None else Rng(0)
    observed_sets = np.asarray(observed_sets, dtype=np.float64)
    if observed_sets.ndim != 3:
        raise DomainError("observed_sets must be (n_sets, N, obs_dim)")
    n_sets, n_obs = observed_sets.shape[:2]
    obs_emb = amortizer.embed(observed_sets)
    ref_emb = amortizer.embed(model.sample_batch(n_ref, rng, n_obs=n_obs).data)
    bandwidth = median_heuristic(ref_emb)
    observed = mmd2_unbiased(obs_emb, ref_emb, bandwidth)
    null = np.empty(n_null)
    for i in range(n_null):
        sim_emb = amortizer.embed(model.sample_batch(n_sets, rng, n_obs=n_obs).data)
        null[i] = mmd2_unbiased(sim_emb, ref_emb, bandwidth)
    return MisspecResult(observed, null, rank_p_value(observed, null), bandwidth)


# ----------------------------------------------------------------------- CSV


def _fmt(v: float) -> str:
    return f"{v:.8e}"


def _write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_recovery_csv(report: RecoveryReport, path) -> None:
    rows = []
    for i in range(len(report.true)):
        for j, name in enumerate(report.param_names):
            rows.append([name, _fmt(report.true[i, j]), _fmt(report.post_mean[i, j]), _fmt(report.post_sd[i, j])])
    _write(path, ["param", "true", "post_mean", "post_sd"], rows)


def write_sbc_csvs(result: SbcResult, ranks_path, test_path) -> None:
    rows = [[name, str(int(r[j]))] for r in result.ranks for j, name in enumerate(result.param_names)]
    _write(ranks_path, ["param", "rank"], rows)
    _write(test_path, ["param", "chi2", "p"],
           [[n, _fmt(c), _fmt(p)] for n, c, p in zip(result.param_names, result.chi2, result.p_values)])


def write_contraction_csv(names, contraction, path) -> None:
    _write(path, ["param", "contraction"], [[n, _fmt(c)] for n, c in zip(names, contraction)])


def write_misspec_csv(result: MisspecResult, path) -> None:
    header = ["observed_mmd2", "p", "bandwidth"] + [f"null_{i}" for i in range(len(result.null_mmd2))]
    row = [_fmt(result.observed_mmd2), _fmt(result.p_value), _fmt(result.bandwidth)]
    _write(path, header, [row + [_fmt(v) for v in result.null_mmd2]])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Header and string rows of any CSV emitted by this package."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]
