"""Command-line workflow: simulate, train, sample, diagnose, compare.

Every run is driven by one JSON config (all keys optional)::

    {
      "model": "conjugate_gaussian",
      "amortizer": "posterior",
      "seed": 0,
      "output_dir": "out",
      "network": {"embedding_dim": 8, "n_coupling": 6, ...},
      "train": {"epochs": 32, "initial_lr": 0.0005, ...},
      "simulate": {"n_sims": 1000, "n_obs": null},
      "sample": {"n_draws": 1000},
      "diagnose": {"n_sims": 200, "sbc_sims": 500, ...}
    }

``--seed`` and ``--out`` override ``seed`` and ``output_dir``. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as D
from .amortizers import build_comparison_amortizer, build_likelihood_amortizer, build_posterior_amortizer
from .errors import AmortflowError, ConfigError, ContractError, FormatError
from .generative import BUILTIN_MODELS, ModelMixture, builtin_model, read_batch_csv, write_batch_csv
from .rng import Rng
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("amortflow")

KINDS = ("posterior", "likelihood", "comparison")
ACTIVATIONS = ("tanh", "relu", "softplus")
POOLINGS = ("mean", "sum", "max")


class _Key:
    """Expected type and default of one key, with an optional range or choice check."""

    def __init__(self, kind, default, minimum=None, choices=None, nullable=False):
        self.kind, self.default = kind, default
        self.minimum, self.choices, self.nullable = minimum, choices, nullable


SECTIONS = {
    "network": {
        "embedding_dim": _Key(int, 8, 1),
        "summary_hidden": _Key(list, [64, 64]),
        "n_coupling": _Key(int, 6, 1),
        "coupling_hidden": _Key(list, [64, 64]),
        "classifier_hidden": _Key(list, [64, 64]),
        "activation": _Key(str, "tanh", choices=ACTIVATIONS),
        "pooling": _Key(str, None, choices=POOLINGS, nullable=True),
        "clamp": _Key(float, 1.9, 1e-6),
    },
    "train": {
        "epochs": _Key(int, 32, 1),
        "batches_per_epoch": _Key(int, 100, 1),
        "batch_size": _Key(int, 64, 1),
        "initial_lr": _Key(float, 5e-4, 1e-12),
        "schedule": _Key(str, "cosine", choices=("constant", "cosine")),
        "mode": _Key(str, "online", choices=("online", "offline")),
        "validation_sims": _Key(int, 500, 1),
        "calibration_sims": _Key(int, 10_000, 2),
    },
    "simulate": {
        "n_sims": _Key(int, 1000, 1),
        "n_obs": _Key(int, None, 1, nullable=True),
    },
    "sample": {
        "n_draws": _Key(int, 1000, 1),
    },
    "diagnose": {
        "n_sims": _Key(int, 200, 2),
        "n_draws": _Key(int, 100, 1),
        "sbc_sims": _Key(int, 500, 10),
        "sbc_draws": _Key(int, 100, 1),
        "n_bins": _Key(int, 10, 2),
        "n_obs": _Key(int, None, 1, nullable=True),
        "misspec_sets": _Key(int, 20, 2),
        "misspec_obs": _Key(int, 32, 1),
        "misspec_null": _Key(int, 99, 19),
        "misspec_ref": _Key(int, 200, 2),
    },
}

TOP = {
    "model": _Key(str, "conjugate_gaussian", choices=tuple(BUILTIN_MODELS)),
    "amortizer": _Key(str, None, choices=KINDS, nullable=True),
    "seed": _Key(int, 0, 0),
    "output_dir": _Key(str, "out"),
}


@dataclass
class WorkflowConfig:
    model: str = "conjugate_gaussian"
    amortizer: str = "posterior"
    seed: int = 0
    output_dir: str = "out"
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    sample: dict = field(default_factory=dict)
    diagnose: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)


def _check(path: str, value, spec: _Key):
    if value is None:
        if spec.nullable:
            return None
        raise ConfigError(f"{path}: expected {spec.kind.__name__}, got null", key=path)
    if spec.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, spec.kind) or isinstance(value, bool):
        raise ConfigError(f"{path}: expected {spec.kind.__name__}, got {type(value).__name__}", key=path)
    if spec.kind is list:
        if not value or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value):
            raise ConfigError(f"{path}: expected a non-empty list of positive integers", key=path)
    if spec.minimum is not None and value < spec.minimum:
        raise ConfigError(f"{path}: must be >= {spec.minimum}, got {value}", key=path)
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{path}: expected one of {', '.join(spec.choices)}, got {value!r}", key=path)
    return value


def _section(name: str, raw, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected object, got {type(raw).__name__}", key=name)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key", key=unknown[0])
    out = {}
    for key, spec in schema.items():
        out[key] = _check(f"{name}.{key}", raw.get(key, spec.default), spec)
    return out


def parse_config(text: str) -> WorkflowConfig:
    """Validate a JSON config and fill in defaults.

    Raises ConfigError naming the offending key for unknown keys, type
    mismatches and out-of-range values.
    """
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(TOP) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key", key=unknown[0])
    top = {k: _check(k, raw.get(k, spec.default), spec) for k, spec in TOP.items()}
    sections = {name: _section(name, raw.get(name, {}), schema) for name, schema in SECTIONS.items()}

    is_mixture = isinstance(builtin_model(top["model"]), ModelMixture)
    if top["amortizer"] is None:
        top["amortizer"] = "comparison" if is_mixture else "posterior"
    if is_mixture != (top["amortizer"] == "comparison"):
        raise ConfigError(f"amortizer: {top['amortizer']!r} does not fit model {top['model']!r}", key="amortizer")
    if sections["network"]["pooling"] is None:
        sections["network"]["pooling"] = "mean" if top["amortizer"] == "comparison" else "sum"
    return WorkflowConfig(**top, **sections)


# ------------------------------------------------------------------ helpers


def build_amortizer(cfg: WorkflowConfig, rng: Rng):
    model = builtin_model(cfg.model)
    net = cfg.network
    if cfg.amortizer == "posterior":
        return build_posterior_amortizer(model, net["embedding_dim"], tuple(net["summary_hidden"]),
                                         net["n_coupling"], tuple(net["coupling_hidden"]), net["clamp"],
                                         net["activation"], net["pooling"], rng)
    if cfg.amortizer == "likelihood":
        return build_likelihood_amortizer(model, net["n_coupling"], tuple(net["coupling_hidden"]),
                                          net["clamp"], net["activation"], rng=rng)
    return build_comparison_amortizer(model, net["embedding_dim"], tuple(net["summary_hidden"]),
                                      tuple(net["classifier_hidden"]), net["activation"], net["pooling"], rng)


def _load_amortizer(cfg: WorkflowConfig, path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state, meta = load_checkpoint(path, with_metadata=True)
    for key in ("model", "amortizer"):
        if key in meta and meta[key] != getattr(cfg, key):
            raise ContractError(f"checkpoint {path} holds {key} {meta[key]!r}, config says {getattr(cfg, key)!r}")
    am = build_amortizer(cfg, Rng(cfg.seed))
    try:
        am.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise ContractError(f"checkpoint {path} does not match the configured network: {err}") from None
    return am


def _require_kind(cfg: WorkflowConfig, kind: str, command: str) -> None:
    if cfg.amortizer != kind:
        raise ConfigError(f"amortizer: '{command}' needs a {kind} amortizer, config has {cfg.amortizer!r}",
                          key="amortizer")


def read_observed(path: Path, obs_dim: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Data sets from a batch CSV (``data_i_j`` columns) or a plain observation table.

    A plain table has one observation per row and is read as a single data
    set. Returns ``(sets, context)`` with ``sets`` of shape (L, N, obs_dim).
    """
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise FormatError(f"{path}: empty CSV")
    if any(h.startswith("data_") for h in header):
        batch = read_batch_csv(path)
        if batch.data.shape[2] != obs_dim:
            raise FormatError(f"{path}: observations have {batch.data.shape[2]} columns, model needs {obs_dim}")
        return batch.data, batch.context if batch.context.shape[1] else None
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    if table.shape[1] != obs_dim or table.shape[0] < 1:
        raise FormatError(f"{path}: expected rows of {obs_dim} values, got shape {table.shape}")
    return table[None], None


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{float(v):.8e}"


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg: WorkflowConfig, args, out: Path) -> None:
    model = builtin_model(cfg.model)
    batch = model.sample_batch(cfg.simulate["n_sims"], Rng(cfg.seed), n_obs=cfg.simulate["n_obs"])
    write_batch_csv(batch, out / "simulations.csv")
    log.info("wrote %d simulations with N=%d to %s", len(batch), batch.n_obs, out / "simulations.csv")


def cmd_train(cfg: WorkflowConfig, args, out: Path) -> None:
    model = builtin_model(cfg.model)
    build_rng, _ = Rng(cfg.seed).split(2)
    am = build_amortizer(cfg, build_rng)
    history = train(am, model, cfg.train_config())
    meta = {"model": cfg.model, "amortizer": cfg.amortizer, "best_epoch": history.best_epoch,
            "network": cfg.network}
    save_checkpoint(out / "checkpoint.bfc", am.state_dict(), meta)
    bpe = cfg.train["batches_per_epoch"]
    train_losses = history.epoch_mean_losses(bpe)
    rows = [[e + 1, _fmt(tl), _fmt(vl), _fmt(history.learning_rates[(e + 1) * bpe - 1])]
            for e, (tl, vl) in enumerate(zip(train_losses, history.val_losses))]
    _write_csv(out / "history.csv", ["epoch", "train_loss", "val_loss", "learning_rate"], rows)
    log.info("validation loss %.4f -> %.4f (best epoch %d)", history.initial_val_loss,
             min(history.val_losses), history.best_epoch + 1)


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bfc"


def cmd_sample(cfg: WorkflowConfig, args, out: Path) -> None:
    _require_kind(cfg, "posterior", "sample")
    if not args.data:
        raise ConfigError("sample needs --data PATH", key="data")
    am = _load_amortizer(cfg, _checkpoint_path(args, out))
    model = builtin_model(cfg.model)
    sets, context = read_observed(Path(args.data), model.obs_dim)
    n_draws = args.n_draws if args.n_draws is not None else cfg.sample["n_draws"]
    if n_draws < 1:
        raise ConfigError("--n-draws must be >= 1", key="n_draws")
    draws = am.sample_batch(sets, n_draws, Rng(cfg.seed), context)
    rows = ([i, k, *map(_fmt, draws[i, k])] for i in range(draws.shape[0]) for k in range(n_draws))
    _write_csv(out / "posterior_draws.csv", ["dataset", "draw", *model.param_names], rows)
    log.info("wrote %d draws for %d data sets", n_draws, draws.shape[0])


def cmd_diagnose(cfg: WorkflowConfig, args, out: Path) -> None:
    _require_kind(cfg, "posterior", "diagnose")
    am = _load_amortizer(cfg, _checkpoint_path(args, out))
    model = builtin_model(cfg.model)
    d = cfg.diagnose
    rec_rng, sbc_rng, con_rng, mis_rng = Rng(cfg.seed).split(4)
    rec = D.recovery(am, model, d["n_sims"], d["n_draws"], rec_rng, d["n_obs"])
    D.write_recovery_csv(rec, out / "recovery.csv")
    sbc = D.sbc_ranks(am, model, d["sbc_sims"], d["sbc_draws"], sbc_rng, d["n_bins"], d["n_obs"])
    D.write_sbc_csvs(sbc, out / "sbc_ranks.csv", out / "sbc_test.csv")
    contraction = D.posterior_contraction(am, model, d["n_sims"], d["n_draws"], con_rng, d["n_obs"])
    D.write_contraction_csv(model.param_names, contraction, out / "contraction.csv")
    if args.data:
        observed, _ = read_observed(Path(args.data), model.obs_dim)
    else:
        observed = model.sample_batch(d["misspec_sets"], mis_rng.split(), n_obs=d["misspec_obs"]).data
    mis = D.misspecification_test(am, model, observed, d["misspec_null"], d["misspec_ref"], mis_rng)
    D.write_misspec_csv(mis, out / "misspec.csv")
    log.info("recovery r=%s, SBC p=%s, contraction=%s, misspecification p=%.3f",
             np.round(rec.correlation, 3), np.round(sbc.p_values, 3), np.round(contraction, 3), mis.p_value)


def cmd_compare(cfg: WorkflowConfig, args, out: Path) -> None:
    _require_kind(cfg, "comparison", "compare")
    if not args.data:
        raise ConfigError("compare needs --data PATH", key="data")
    am = _load_amortizer(cfg, _checkpoint_path(args, out))
    sets, context = read_observed(Path(args.data), builtin_model(cfg.model).obs_dim)
    probs = np.atleast_2d(am.predict_pmp(sets, context))
    _write_csv(out / "pmp.csv", ["dataset", *am.model_names],
               ([i, *map(_fmt, p)] for i, p in enumerate(probs)))
    log.info("wrote model probabilities for %d data sets", len(probs))


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample,
            "diagnose": cmd_diagnose, "compare": cmd_compare}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amortflow", description="Amortized Bayesian workflow runner.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON workflow config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "diagnose", "compare"):
            p.add_argument("--checkpoint", help="checkpoint to load (default: OUT/checkpoint.bfc)")
            p.add_argument("--data", help="batch CSV or plain observation table")
        if name == "sample":
            p.add_argument("--n-draws", type=int, help="posterior draws per data set")
    return parser


def run_command(argv: list[str]) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text)
        if args.seed is not None:
            cfg.seed = _check("seed", args.seed, TOP["seed"])
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except ConfigError as err:
        print(f"amortflow: config error: {err}", file=sys.stderr)
        return 2
    except (AmortflowError, OSError, ValueError) as err:
        print(f"amortflow: error: {err}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
