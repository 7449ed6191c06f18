"""Adam, learning-rate schedules, the training loop and binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, SimulationError, TrainingError
from .generative import calibration_batches, fit_configurator
from .rng import Rng
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CLIP_NORM = 5.0
VALIDATION_SIMS = 500
CALIBRATION_SIMS = 10_000
MAX_FAILURE_RATE = 0.1


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Per-parameter first and second moments plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 5e-4, **kw) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr, **kw)


def adam_step(state: AdamState, params, grads, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` are Tensors (updated through ``.data``) or numpy arrays.
    Raises TrainingError without touching anything if a gradient is not finite.
    """
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    gs = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    if len(arrays) != len(gs) or len(arrays) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    for a, g, m in zip(arrays, gs, state.m):
        if a.shape != g.shape or a.shape != m.shape:
            raise ValueError(f"shape mismatch: param {a.shape}, grad {g.shape}, moment {m.shape}")
    if not all(np.isfinite(g).all() for g in gs):
        raise TrainingError(f"non-finite gradient at step {state.step + 1}; update skipped")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for a, g, m, v in zip(arrays, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        a -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float = CLIP_NORM) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [(g * scale).astype(g.dtype) for g in grads]
    return grads, norm


def cosine_lr(step: int, total_steps: int, initial_lr: float) -> float:
    """Cosine decay from ``initial_lr`` to 0; steps past the end stay at 0."""
    if total_steps <= 0:
        return initial_lr
    step = min(max(step, 0), total_steps)
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ------------------------------------------------------------ configuration


@dataclass
class TrainConfig:
    epochs: int = 32
    batches_per_epoch: int = 100
    batch_size: int = 64
    initial_lr: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0
    mode: str = "online"
    checkpoint_path: str | None = None
    validation_sims: int = VALIDATION_SIMS
    calibration_sims: int = CALIBRATION_SIMS

    def __post_init__(self):
        for name in ("epochs", "batches_per_epoch", "batch_size", "validation_sims", "calibration_sims"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.initial_lr > 0:
            raise DomainError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.schedule not in ("constant", "cosine"):
            raise DomainError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.mode not in ("online", "offline"):
            raise DomainError(f"mode must be 'online' or 'offline', got {self.mode!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    failed_batches: int = 0
    skipped_steps: int = 0
    simulated_batches: int = 0

    def epoch_mean_losses(self, batches_per_epoch: int) -> list[float]:
        losses = np.asarray(self.step_losses, dtype=np.float64)
        n = len(losses) // batches_per_epoch
        return [float(np.nanmean(losses[i * batches_per_epoch:(i + 1) * batches_per_epoch])) for i in range(n)]


# ------------------------------------------------------------ training loop


def _validation_loss(amortizer, batches) -> float:
    total, rows = 0.0, 0
    for cb in batches:
        total += float(amortizer.loss(cb).data) * len(cb)
        rows += len(cb)
    return total / rows


def train(amortizer, model, cfg: TrainConfig) -> TrainHistory:
    """Fit ``amortizer`` to simulations from ``model``.

    Seed streams, derived from ``cfg.seed``: configurator calibration,
    validation set, training simulations. In online mode each step consumes a
    fresh child stream, so no simulation batch is ever reused. The
    parameters with the best validation loss are restored at the end and
    written to ``cfg.checkpoint_path`` after every epoch.
    """
    root = Rng(cfg.seed)
    calib_rng, val_rng, sim_rng = root.split(3)
    if amortizer.configurator is None:
        amortizer.configurator = fit_configurator(calibration_batches(model, calib_rng, cfg.calibration_sims))
    configurator = amortizer.configurator

    val_batches = []
    remaining = cfg.validation_sims
    while remaining > 0:
        size = min(100, remaining)
        val_batches.append(configurator.configure(model.sample_batch(size, val_rng)))
        remaining -= size

    offline = None
    if cfg.mode == "offline":
        offline = [model.sample_batch(cfg.batch_size, sim_rng.split()) for _ in range(cfg.batches_per_epoch)]

    params = amortizer.parameters()
    state = AdamState.for_params(params, cfg.initial_lr)
    history = TrainHistory(simulated_batches=len(offline) if offline else 0)
    history.initial_val_loss = _validation_loss(amortizer, val_batches)
    best_loss, best_state = math.inf, amortizer.state_dict()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = sim_rng.permutation(cfg.batches_per_epoch) if offline else None
        for b in range(cfg.batches_per_epoch):
            lr = cosine_lr(step, cfg.total_steps, cfg.initial_lr) if cfg.schedule == "cosine" else cfg.initial_lr
            step += 1
            history.learning_rates.append(lr)
            if offline is not None:
                batch = offline[order[b]]
            else:
                history.simulated_batches += 1
                try:
                    batch = model.sample_batch(cfg.batch_size, sim_rng.split())
                except SimulationError as err:
                    history.failed_batches += 1
                    history.step_losses.append(float("nan"))
                    log.warning("skipping batch at step %d: %s", step, err)
                    if history.failed_batches > MAX_FAILURE_RATE * cfg.total_steps:
                        raise TrainingError(
                            f"{history.failed_batches} of {cfg.total_steps} planned batches failed to "
                            "simulate; aborting") from err
                    continue
            try:
                with Tape() as tape:
                    loss = amortizer.loss(configurator.configure(batch))
                grads = [g.data for g in tape.gradient(loss, params)]
                grads, _ = clip_by_global_norm(grads)
                adam_step(state, params, grads, lr=lr)
            except TrainingError as err:
                history.skipped_steps += 1
                history.step_losses.append(float("nan"))
                log.warning("step %d skipped: %s", step, err)
                continue
            history.step_losses.append(float(loss.data))
        val = _validation_loss(amortizer, val_batches)
        history.val_losses.append(val)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if val < best_loss:
            best_loss, best_state, history.best_epoch = val, amortizer.state_dict(), epoch
        log.info("epoch %d: train %.4f, validation %.4f", epoch + 1,
                 history.epoch_mean_losses(cfg.batches_per_epoch)[-1], val)
        if cfg.checkpoint_path:
            save_checkpoint(cfg.checkpoint_path, best_state, {"epoch": epoch, "best_epoch": history.best_epoch})
    amortizer.load_state_dict(best_state)
    return history


# --------------------------------------------------------------- checkpoints

MAGIC = b"BFC1"
VERSION = 1
METADATA_KEY = "__metadata__"


def save_checkpoint(path, named_params: dict, metadata: dict | None = None) -> None:
    """Write tensors in the BFC1 layout.

    Layout: magic, u16 version, u16 flags, u32 count, then per tensor u32
    name length, UTF-8 name, u32 rank, u32 dims, little-endian float32 data,
    and finally a u32 CRC32 of everything before it. ``metadata`` (JSON) is
    carried as an extra rank-1 tensor of byte values named ``__metadata__``.
    """
    items = [(k, np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float32))
             for k, v in named_params.items()]
    if metadata is not None:
        raw = json.dumps(metadata, sort_keys=True).encode("utf-8")
        items.append((METADATA_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float32)))
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(items))]
    for name, arr in items:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, with_metadata: bool = False):
    """Read a BFC1 file; returns ``{name: float32 array}`` (and metadata if asked)."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("file too short for a checkpoint header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, flags, count = struct.unpack_from("<HHI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if flags != 0:
        raise FormatError(f"unsupported flags {flags}", offset=6)
    pos = 12

    def need(n: int, what: str):
        if pos + n > len(body):
            raise FormatError(f"truncated while reading {what}", offset=pos)

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4, "name length")
        (n_name,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(n_name, "name")
        try:
            name = body[pos:pos + n_name].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=pos) from None
        pos += n_name
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes, f"data of {name!r}")
        out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected trailing bytes", offset=pos)
    if zlib.crc32(body) != crc:
        raise FormatError("CRC32 mismatch", offset=len(body))
    meta_arr = out.pop(METADATA_KEY, None)
    if not with_metadata:
        return out
    meta = {} if meta_arr is None else json.loads(meta_arr.astype(np.uint8).tobytes().decode("utf-8"))
    return out, meta
