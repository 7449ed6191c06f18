"""Neural approximators for inference and model comparison, and the evidence built on them."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, ShapeError, TrainingError
from .generative import ConfiguredBatch, Configurator
from .networks import ConditionalFlow, DeepSet, Mlp, Module
from .rng import Rng
from .tensor import Tensor

_CFG_FIELDS = ("param_mean", "param_std", "data_mean", "data_std")
# rows pushed through a flow at once when sampling many data sets
_SAMPLE_CHUNK = 65_536


def _finite_loss(loss: Tensor, what: str, batch: ConfiguredBatch) -> Tensor:
    if not np.isfinite(loss.data).all():
        raise TrainingError(
            f"non-finite {what} loss on batch of {len(batch)} rows "
            f"(targets finite: {np.isfinite(batch.targets).all()}, "
            f"conditions finite: {np.isfinite(batch.summary_conditions).all()})")
    return loss


def _as_sets(data, obs_dim: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3 or data.shape[2] != obs_dim:
        raise ShapeError(f"expected data of shape (N, {obs_dim}) or (L, N, {obs_dim}), got {data.shape}")
    if data.shape[1] < 1:
        raise DomainError("observed data set is empty")
    return data


def _default_context(sets: np.ndarray, context) -> np.ndarray:
    if context is None:
        return np.full((sets.shape[0], 1), float(sets.shape[1]))
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    if context.shape[0] == 1 and sets.shape[0] > 1:
        context = np.repeat(context, sets.shape[0], axis=0)
    return context


class Amortizer(Module):
    """Shared state handling: a configurator travels with the network weights."""

    configurator: Configurator | None
    model_name: str | None

    def _require_configurator(self) -> Configurator:
        if self.configurator is None:
            raise ContractError(f"{type(self).__name__} has no fitted configurator; train or load it first")
        return self.configurator

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        cfg = self.configurator
        if cfg is not None:
            for name in _CFG_FIELDS:
                state[f"configurator.{name}"] = getattr(cfg, name).astype(np.float32)
            state["configurator.encode_n"] = np.array([float(cfg.encode_n)], dtype=np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        super().load_state_dict({k: v for k, v in state.items() if not k.startswith("configurator.")})
        if "configurator.param_mean" in state:
            self.configurator = Configurator(
                *(np.asarray(state[f"configurator.{n}"]) for n in _CFG_FIELDS),
                encode_n=bool(np.asarray(state.get("configurator.encode_n", [1.0]))[0]))


class PosteriorAmortizer(Amortizer):
    """Summary network plus conditional flow over configured parameters.

    The flow condition is ``[summary embedding, direct conditions]``.
    """

    def __init__(self, summary_net: DeepSet, flow: ConditionalFlow,
                 configurator: Configurator | None = None, model_name: str | None = None):
        direct = flow.condition_dim - summary_net.embedding_dim
        if direct < 0:
            raise ShapeError("flow condition_dim is smaller than the summary embedding_dim")
        self.summary_net = summary_net
        self.flow = flow
        self.configurator = configurator
        self.model_name = model_name
        self.direct_dim = direct

    def condition(self, summary_conditions, direct_conditions) -> Tensor:
        emb = self.summary_net(summary_conditions)
        direct = np.asarray(direct_conditions, dtype=emb.dtype)
        if direct.shape != (emb.shape[0], self.direct_dim):
            raise ShapeError(f"direct conditions must have shape ({emb.shape[0]}, {self.direct_dim}), "
                             f"got {direct.shape}")
        return T.concat([emb, Tensor(direct)], axis=1)

    def loss(self, batch: ConfiguredBatch) -> Tensor:
        """Negative mean flow log density of configured parameters."""
        cond = self.condition(batch.summary_conditions, batch.direct_conditions)
        loss = -self.flow.log_prob(Tensor(batch.targets, dtype=cond.dtype), cond).mean()
        return _finite_loss(loss, "posterior", batch)

    def _conditions(self, data, context) -> np.ndarray:
        cfg = self._require_configurator()
        sets = _as_sets(data, cfg.obs_dim)
        ctx = cfg.direct_conditions(_default_context(sets, context))
        return self.condition(cfg.configure_data(sets), ctx).data

    def embed(self, data, context=None) -> np.ndarray:
        """Summary-network embeddings of raw data sets, shape (L, embedding_dim)."""
        cfg = self._require_configurator()
        return self.summary_net(cfg.configure_data(_as_sets(data, cfg.obs_dim))).data

    def sample_batch(self, data, n_draws: int, rng: Rng, context=None) -> np.ndarray:
        """Raw-space posterior draws for many data sets, shape (L, n_draws, d)."""
        if n_draws < 1:
            raise DomainError("n_draws must be >= 1")
        cond = self._conditions(data, context)
        cfg = self.configurator
        out = np.empty((cond.shape[0], n_draws, self.flow.target_dim))
        per_chunk = max(1, _SAMPLE_CHUNK // n_draws)
        for start in range(0, cond.shape[0], per_chunk):
            c = cond[start:start + per_chunk]
            rows = np.repeat(c, n_draws, axis=0)
            z = self.flow.sample(rows, rows.shape[0], rng).data
            out[start:start + len(c)] = cfg.deconfigure_params(z).reshape(len(c), n_draws, -1)
        return out

    def sample(self, observed, n_draws: int, rng: Rng, context=None) -> np.ndarray:
        """Raw-space posterior draws for one data set, shape (n_draws, d)."""
        return self.sample_batch(np.asarray(observed)[None], n_draws, rng, context)[0]

    def log_prob(self, observed, theta, context=None) -> np.ndarray:
        """Approximate log posterior density at raw ``theta`` (rows) given one data set."""
        cfg = self._require_configurator()
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        cond = np.repeat(self._conditions(observed, context), theta.shape[0], axis=0)
        lp = self.flow.log_prob(Tensor(cfg.configure_params(theta)), Tensor(cond)).data
        return lp.astype(np.float64) + cfg.log_det_params()


class LikelihoodAmortizer(Amortizer):
    """Conditional flow over single configured observations given parameters.

    The condition is the configured parameter vector (optionally passed
    through ``param_net``), followed by the direct conditions when
    ``use_context`` is set.
    """

    def __init__(self, flow: ConditionalFlow, configurator: Configurator | None = None,
                 param_net: Mlp | None = None, use_context: bool = False, model_name: str | None = None):
        self.flow = flow
        self.param_net = param_net
        self.configurator = configurator
        self.use_context = use_context
        self.model_name = model_name

    def condition(self, params, direct_conditions=None) -> Tensor:
        p = Tensor(np.asarray(params, dtype=np.float32))
        if self.param_net is not None:
            p = self.param_net(p)
        if self.use_context:
            p = T.concat([p, Tensor(np.asarray(direct_conditions, dtype=np.float32))], axis=1)
        return p

    def _row_conditions(self, params, direct, n_obs: int) -> Tensor:
        cond = self.condition(params, direct)
        b = cond.shape[0]
        rows = np.repeat(np.arange(b), n_obs)
        return T.take(cond, rows, axis=0)

    def loss(self, batch: ConfiguredBatch) -> Tensor:
        """Negative mean log density over every observation in the batch."""
        b, n, k = batch.summary_conditions.shape
        cond = self._row_conditions(batch.targets, batch.direct_conditions, n)
        x = Tensor(batch.summary_conditions.reshape(b * n, k))
        loss = -self.flow.log_prob(x, cond).mean()
        return _finite_loss(loss, "likelihood", batch)

    def log_likelihood(self, data, theta, context=None) -> np.ndarray:
        """Sum of per-observation approximate log densities in raw data space.

        ``data`` is (N, obs) with ``theta`` (d,) giving a scalar, or (L, N, obs)
        with ``theta`` (L, d) giving L values.
        """
        cfg = self._require_configurator()
        single = np.asarray(data).ndim == 2
        sets = _as_sets(data, cfg.obs_dim)
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[0] != sets.shape[0]:
            raise ShapeError(f"need one parameter row per data set: {theta.shape} vs {sets.shape}")
        lp = self.log_prob_obs(sets, theta, context)
        total = lp.sum(axis=1)
        return float(total[0]) if single else total

    def log_prob_obs(self, sets: np.ndarray, theta: np.ndarray, context=None) -> np.ndarray:
        """Per-observation log densities, shape (L, N)."""
        cfg = self._require_configurator()
        sets = _as_sets(sets, cfg.obs_dim)
        l, n, k = sets.shape
        direct = cfg.direct_conditions(_default_context(sets, context))
        cond = self._row_conditions(cfg.configure_params(theta), direct, n)
        x = Tensor(cfg.configure_data(sets).reshape(l * n, k))
        lp = self.flow.log_prob(x, cond).data.astype(np.float64) + cfg.log_det_data()
        return lp.reshape(l, n)

    def sample(self, theta, n_obs: int, rng: Rng, context=None) -> np.ndarray:
        """Emulated raw observations for one parameter vector, shape (n_obs, obs_dim)."""
        cfg = self._require_configurator()
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        direct = cfg.direct_conditions(np.array([[float(n_obs)]]) if context is None
                                       else np.atleast_2d(context))
        cond = self.condition(cfg.configure_params(theta), direct).data
        x = self.flow.sample(cond, n_obs, rng).data
        return x.astype(np.float64) * cfg.data_std + cfg.data_mean


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy via log-sum-exp with max subtraction."""
    labels = np.asarray(labels, dtype=np.intp)
    m = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"need one label per row: labels {labels.shape}, logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise DomainError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    picked = logits[np.arange(labels.size), labels]
    return (T.logsumexp(logits, axis=1) - picked).mean()


class ComparisonAmortizer(Amortizer):
    """Summary network plus classifier producing posterior model probabilities."""

    def __init__(self, summary_net: DeepSet, classifier: Mlp, model_names: list[str],
                 configurator: Configurator | None = None, model_name: str | None = None):
        if classifier.widths[-1] != len(model_names):
            raise ShapeError("classifier output width must equal the number of models")
        self.summary_net = summary_net
        self.classifier = classifier
        self.model_names = list(model_names)
        self.configurator = configurator
        self.model_name = model_name

    @property
    def n_models(self) -> int:
        return len(self.model_names)

    def logits(self, summary_conditions, direct_conditions) -> Tensor:
        emb = self.summary_net(summary_conditions)
        direct = Tensor(np.asarray(direct_conditions, dtype=emb.dtype))
        return self.classifier(T.concat([emb, direct], axis=1))

    def loss(self, batch: ConfiguredBatch) -> Tensor:
        if batch.labels is None:
            raise ContractError("comparison training needs model labels")
        loss = softmax_cross_entropy(self.logits(batch.summary_conditions, batch.direct_conditions),
                                     batch.labels)
        return _finite_loss(loss, "comparison", batch)

    def embed(self, data, context=None) -> np.ndarray:
        cfg = self._require_configurator()
        return self.summary_net(cfg.configure_data(_as_sets(data, cfg.obs_dim))).data

    def predict_pmp(self, observed, context=None) -> np.ndarray:
        """Model probabilities, shape (M,) for one set or (L, M) for several."""
        cfg = self._require_configurator()
        single = np.asarray(observed).ndim == 2
        sets = _as_sets(observed, cfg.obs_dim)
        direct = cfg.direct_conditions(_default_context(sets, context))
        probs = softmax(self.logits(cfg.configure_data(sets), direct).data)
        return probs[0] if single else probs


# ------------------------------------------------------------ module-level API


def posterior_loss(am: PosteriorAmortizer, batch: ConfiguredBatch) -> Tensor:
    return am.loss(batch)


def likelihood_loss(am: LikelihoodAmortizer, batch: ConfiguredBatch) -> Tensor:
    return am.loss(batch)


def comparison_loss(am: ComparisonAmortizer, batch: ConfiguredBatch, labels=None) -> Tensor:
    if labels is not None:
        return softmax_cross_entropy(am.logits(batch.summary_conditions, batch.direct_conditions), labels)
    return am.loss(batch)


def posterior_sample(am: PosteriorAmortizer, observed, context, n_draws: int, rng: Rng) -> np.ndarray:
    return am.sample(observed, n_draws, rng, context)


def posterior_log_prob(am: PosteriorAmortizer, observed, context, theta) -> np.ndarray:
    return am.log_prob(observed, theta, context)


def predict_pmp(am: ComparisonAmortizer, observed, context=None) -> np.ndarray:
    return am.predict_pmp(observed, context)


def log_evidence(post, lik, model, observed, theta=None, rng: Rng | None = None,
                 n_draws: int = 256) -> float:
    """Log marginal likelihood from the identity ``log p(x) = log l(x|t) + log p(t) - log q(t|x)``.

    ``post`` needs ``sample`` and ``log_prob``, ``lik`` needs
    ``log_likelihood``; analytic stand-ins with the same methods work too.
    The evaluation point defaults to the mean of ``n_draws`` posterior draws.
    """
    for am in (post, lik):
        name = getattr(am, "model_name", None)
        if name is not None and name != model.name:
            raise ContractError(f"amortizer trained on {name!r} used with model {model.name!r}")
    observed = np.asarray(observed, dtype=np.float64)
    if theta is None:
        theta = post.sample(observed, n_draws, rng if rng is not None else Rng(0)).mean(axis=0)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    log_lik = float(np.asarray(lik.log_likelihood(observed, theta)).reshape(-1)[0])
    log_prior = float(np.asarray(model.prior_log_prob(theta[None])).reshape(-1)[0])
    log_post = float(np.asarray(post.log_prob(observed, theta[None])).reshape(-1)[0])
    return log_lik + log_prior - log_post


def expected_log_predictive_density(post, lik, observed, heldout, n_draws: int = 256,
                                    rng: Rng | None = None) -> float:
    """log of the posterior-averaged emulated likelihood of held-out observations."""
    rng = rng if rng is not None else Rng(0)
    draws = post.sample(np.asarray(observed), n_draws, rng)
    heldout = np.asarray(heldout, dtype=np.float64)
    sets = np.repeat(heldout[None], n_draws, axis=0)
    ll = np.asarray(lik.log_likelihood(sets, draws), dtype=np.float64)
    m = ll.max()
    return float(m + np.log(np.mean(np.exp(ll - m))))


# ------------------------------------------------------------------- builders


def build_posterior_amortizer(model, embedding_dim: int = 8, summary_hidden=(64, 64),
                              n_coupling: int = 6, coupling_hidden=(64, 64), clamp: float = 1.9,
                              activation: str = "tanh", pooling: str = "sum",
                              rng: Rng | None = None) -> PosteriorAmortizer:
    rng = rng if rng is not None else Rng(0)
    summary = DeepSet(model.obs_dim, embedding_dim, summary_hidden, summary_hidden[-1:], pooling,
                      activation, rng)
    flow = ConditionalFlow(model.param_dim, embedding_dim + model.context_dim, n_coupling,
                           coupling_hidden, clamp, activation, rng)
    return PosteriorAmortizer(summary, flow, model_name=model.name)


def build_likelihood_amortizer(model, n_coupling: int = 6, coupling_hidden=(64, 64), clamp: float = 1.9,
                               activation: str = "tanh", use_context: bool = False,
                               rng: Rng | None = None) -> LikelihoodAmortizer:
    rng = rng if rng is not None else Rng(0)
    cond_dim = model.param_dim + (model.context_dim if use_context else 0)
    flow = ConditionalFlow(model.obs_dim, cond_dim, n_coupling, coupling_hidden, clamp, activation, rng)
    return LikelihoodAmortizer(flow, use_context=use_context, model_name=model.name)


def build_comparison_amortizer(mixture, embedding_dim: int = 8, summary_hidden=(64, 64),
                               classifier_hidden=(64, 64), activation: str = "tanh",
                               pooling: str = "mean", rng: Rng | None = None) -> ComparisonAmortizer:
    rng = rng if rng is not None else Rng(0)
    summary = DeepSet(mixture.obs_dim, embedding_dim, summary_hidden, summary_hidden[-1:], pooling,
                      activation, rng)
    n_models = len(mixture.models)
    classifier = Mlp([embedding_dim + mixture.context_dim, *classifier_hidden, n_models], activation, rng)
    return ComparisonAmortizer(summary, classifier, mixture.model_names, model_name=mixture.name)
