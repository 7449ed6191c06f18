"""Neural building blocks: MLPs, DeepSet summary networks, coupling flows."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .rng import Rng
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "softplus": T.softplus}


class Module:
    """Minimal parameter container.

    Trainable tensors (``requires_grad=True``), non-trainable buffers and
    sub-modules are discovered from instance attributes in assignment order,
    which fixes the parameter naming used by checkpoints.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def _walk(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value._walk(full + ".")
            else:
                yield full, value

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._walk() if v.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._walk() if not v.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        return {k: v.data.copy() for k, v in self._walk()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._walk())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing entries: {missing}")
        for k, t in own.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype)
        self._on_load()

    def _on_load(self) -> None:
        for _, child in self._children():
            if isinstance(child, Module):
                child._on_load()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def glorot_uniform(fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit


class Mlp(Module):
    """Fully connected network with a linear output layer.

    Parameters
    ----------
    widths : sequence of int
        Layer widths including input and output, e.g. ``[3, 64, 64, 2]``.
    activation : {"tanh", "relu", "softplus"}
        Hidden-layer nonlinearity.
    rng : Rng
        Stream used for Glorot-uniform weight initialisation; biases start at 0.
    zero_last : bool
        Zero the output layer so the network initially returns zeros.
    """

    def __init__(self, widths: Sequence[int], activation: str = "tanh", rng: Rng | None = None,
                 zero_last: bool = False):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else Rng(0)
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.weights = []
        self.biases = []
        n_layers = len(widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            last = i == n_layers - 1
            w = np.zeros((a, b)) if (last and zero_last) else glorot_uniform(a, b, rng)
            self.weights.append(Tensor(w, requires_grad=True, dtype=T.DEFAULT_DTYPE))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"Mlp expects input of shape (batch, {self.widths[0]}), got {x.shape}")
        act = _ACTIVATIONS[self.activation]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n_layers - 1:
                x = act(x)
        return x


def mlp_forward(net: Mlp, x) -> Tensor:
    return net(x)


class DeepSet(Module):
    """Permutation-invariant summary network ``rho(pool(phi(x_i)))``.

    Set elements are put into a canonical (lexicographic) order before
    ``phi`` is applied, which makes the embedding bit-identical under any
    permutation of the set axis, not just equal up to float reassociation.
    """

    def __init__(self, obs_dim: int, embedding_dim: int = 8, phi_hidden: Sequence[int] = (64, 64),
                 rho_hidden: Sequence[int] = (64,), pooling: str = "mean", activation: str = "tanh",
                 rng: Rng | None = None):
        if pooling not in ("mean", "sum", "max"):
            raise ValueError(f"unknown pooling {pooling!r}")
        if not phi_hidden:
            raise ValueError("phi needs at least one layer width")
        rng = rng if rng is not None else Rng(0)
        self.obs_dim = int(obs_dim)
        self.embedding_dim = int(embedding_dim)
        self.pooling = pooling
        self.phi = Mlp([obs_dim, *phi_hidden], activation, rng)
        self.rho = Mlp([phi_hidden[-1], *rho_hidden, embedding_dim], activation, rng)

    def pool(self, x) -> Tensor:
        """Canonically ordered ``pool(phi(x))`` for ``x`` of shape (batch, set, obs)."""
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.obs_dim:
            raise ShapeError(f"DeepSet expects (batch, set_size, {self.obs_dim}), got {x.shape}")
        b, n, k = x.shape
        if n < 1:
            raise DomainError("cannot embed an empty set")
        order = np.lexsort([x.data[:, :, j] for j in reversed(range(k))], axis=-1)
        x = T.index(x, (np.arange(b)[:, None], order))
        h = self.phi(x.reshape(b * n, k))
        h = h.reshape(b, n, h.shape[1])
        if self.pooling == "mean":
            return h.mean(axis=1)
        if self.pooling == "sum":
            return h.sum(axis=1)
        return T.amax(h, axis=1)

    def __call__(self, x) -> Tensor:
        return self.rho(self.pool(x))


def deepset_embed(net: DeepSet, set_x) -> Tensor:
    return net(set_x)


class ConditionalFlow(Module):
    """Stack of conditional affine coupling layers over a standard normal base.

    Each layer permutes the target dimensions with a fixed permutation,
    keeps the first ``ceil(d/2)`` coordinates and transforms the rest as
    ``z_b = x_b * exp(s) + t`` where ``s`` and ``t`` are Mlps of
    ``[x_a, condition]`` and ``s`` is soft-clamped to ``(-clamp, clamp)``.
    The output layers of ``s`` and ``t`` start at zero, so a fresh flow is a
    pure permutation.
    """

    def __init__(self, target_dim: int, condition_dim: int, n_coupling: int = 6,
                 hidden: Sequence[int] = (64, 64), clamp: float = 1.9, activation: str = "tanh",
                 rng: Rng | None = None, permutations: Sequence[Sequence[int]] | None = None):
        if target_dim < 2:
            raise DomainError(f"coupling flows need target_dim >= 2, got {target_dim}")
        if n_coupling < 1:
            raise ValueError("n_coupling must be >= 1")
        if clamp <= 0:
            raise ValueError("clamp must be positive")
        rng = rng if rng is not None else Rng(0)
        self.target_dim = int(target_dim)
        self.condition_dim = int(condition_dim)
        self.clamp = float(clamp)
        self.split = (self.target_dim + 1) // 2
        kept, moved = self.split, self.target_dim - self.split
        if permutations is None:
            permutations = [rng.permutation(target_dim) for _ in range(n_coupling)]
        if len(permutations) != n_coupling:
            raise ValueError("need one permutation per coupling layer")
        self.permutations = []
        for p in permutations:
            p = np.asarray(p)
            if sorted(p.tolist()) != list(range(target_dim)):
                raise ValueError(f"not a permutation of {target_dim} items: {p}")
            self.permutations.append(Tensor(p.astype(np.float32)))
        widths = [kept + condition_dim, *hidden, moved]
        self.s_nets = [Mlp(widths, activation, rng, zero_last=True) for _ in range(n_coupling)]
        self.t_nets = [Mlp(widths, activation, rng, zero_last=True) for _ in range(n_coupling)]
        self._on_load()

    def _on_load(self) -> None:
        super()._on_load()
        self._perm = [p.data.astype(np.intp) for p in self.permutations]
        self._inv = [np.argsort(p) for p in self._perm]

    @property
    def n_coupling(self) -> int:
        return len(self.s_nets)

    def _check(self, x, cond) -> tuple[Tensor, Tensor]:
        x, cond = T.as_tensor(x), T.as_tensor(cond)
        if x.ndim != 2 or x.shape[1] != self.target_dim:
            raise ShapeError(f"flow target must have shape (batch, {self.target_dim}), got {x.shape}")
        if cond.ndim != 2 or cond.shape[1] != self.condition_dim or cond.shape[0] != x.shape[0]:
            raise ShapeError(
                f"flow condition must have shape ({x.shape[0]}, {self.condition_dim}), got {cond.shape}")
        return x, cond

    def _scale_shift(self, i: int, kept: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = T.concat([kept, cond], axis=1)
        s = self.clamp * T.tanh(self.s_nets[i](h) * (1.0 / self.clamp))
        return s, self.t_nets[i](h)

    def forward(self, theta, cond) -> tuple[Tensor, Tensor]:
        """Map targets to latent space; returns ``(z, log_det)``."""
        x, cond = self._check(theta, cond)
        log_det = None
        for i in range(self.n_coupling):
            x = T.take(x, self._perm[i], axis=1)
            kept, moved = x[:, : self.split], x[:, self.split:]
            s, t = self._scale_shift(i, kept, cond)
            x = T.concat([kept, moved * T.exp(s) + t], axis=1)
            ld = s.sum(axis=1)
            log_det = ld if log_det is None else log_det + ld
        return x, log_det

    def inverse(self, z, cond) -> Tensor:
        """Exact algebraic inverse of :meth:`forward`."""
        x, cond = self._check(z, cond)
        for i in reversed(range(self.n_coupling)):
            kept, moved = x[:, : self.split], x[:, self.split:]
            s, t = self._scale_shift(i, kept, cond)
            x = T.concat([kept, (moved - t) * T.exp(-s)], axis=1)
            x = T.take(x, self._inv[i], axis=1)
        return x

    def log_prob(self, theta, cond) -> Tensor:
        """Change-of-variables log density, one value per row."""
        z, log_det = self.forward(theta, cond)
        base = -0.5 * T.square(z).sum(axis=1) - 0.5 * self.target_dim * LOG_2PI
        return base + log_det

    def sample(self, cond, n: int, rng: Rng) -> Tensor:
        """Draw ``n`` targets for one condition row (or ``n`` matching rows)."""
        if n < 1:
            raise DomainError("number of samples must be >= 1")
        cond = np.asarray(T.as_tensor(cond).data)
        if cond.ndim != 2 or cond.shape[1] != self.condition_dim:
            raise ShapeError(f"condition must have shape (1, {self.condition_dim}), got {cond.shape}")
        if cond.shape[0] == 1:
            cond = np.repeat(cond, n, axis=0)
        elif cond.shape[0] != n:
            raise ShapeError(f"condition rows ({cond.shape[0]}) must be 1 or n ({n})")
        dtype = self.s_nets[0].weights[0].dtype
        z = Tensor(rng.normal((n, self.target_dim)), dtype=dtype)
        return self.inverse(z, Tensor(cond, dtype=dtype))


def coupling_forward(flow: ConditionalFlow, theta, cond):
    return flow.forward(theta, cond)


def coupling_inverse(flow: ConditionalFlow, z, cond):
    return flow.inverse(z, cond)


def flow_log_prob(flow: ConditionalFlow, theta, cond):
    return flow.log_prob(theta, cond)


def flow_sample(flow: ConditionalFlow, cond, n: int, rng: Rng):
    return flow.sample(cond, n, rng)
