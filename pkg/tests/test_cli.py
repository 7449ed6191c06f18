import csv
import json

import numpy as np
import pytest

from amortflow.cli import main, parse_config
from amortflow.errors import ConfigError
from amortflow.generative import conjugate_posterior, read_batch_csv

TINY = {
    "model": "conjugate_gaussian",
    "seed": 3,
    "network": {"embedding_dim": 4, "summary_hidden": [16], "n_coupling": 2, "coupling_hidden": [16]},
    "train": {"epochs": 2, "batches_per_epoch": 5, "calibration_sims": 300, "validation_sims": 50},
    "simulate": {"n_sims": 6, "n_obs": 5},
    "diagnose": {"n_sims": 20, "n_draws": 20, "sbc_sims": 20, "sbc_draws": 9, "misspec_sets": 5,
                 "misspec_null": 19, "misspec_ref": 20, "misspec_obs": 5},
}


def _config(tmp_path, cfg=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestParseConfig:
    def test_defaults_filled_in(self):
        cfg = parse_config('{"model":"conjugate_gaussian","amortizer":"posterior","seed":1}')
        assert cfg.seed == 1 and cfg.train["epochs"] == 32 and cfg.train["initial_lr"] == 5e-4
        assert cfg.network["embedding_dim"] == 8 and cfg.network["pooling"] == "sum"
        assert cfg.train_config().seed == 1

    def test_empty_config(self):
        cfg = parse_config("{}")
        assert cfg.model == "conjugate_gaussian" and cfg.amortizer == "posterior"

    def test_mixture_defaults_to_comparison(self):
        cfg = parse_config('{"model":"model_pair"}')
        assert cfg.amortizer == "comparison" and cfg.network["pooling"] == "mean"

    @pytest.mark.parametrize("text, key", [
        ('{"model":"nope"}', "model"),
        ('{"train":{"epochs":0}}', "train.epochs"),
        ('{"seed":"1"}', "seed"),
        ('{"seed":true}', "seed"),
        ('{"colour":1}', "colour"),
        ('{"train":{"epoch":3}}', "epoch"),
        ('{"network":{"summary_hidden":[64,0]}}', "network.summary_hidden"),
        ('{"model":"model_pair","amortizer":"posterior"}', "amortizer"),
        ('{"diagnose":{"misspec_null":10}}', "diagnose.misspec_null"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")) as info:
            parse_config(text)
        assert info.value.key in (key, key.split(".")[-1])

    def test_type_message_names_expected_type(self):
        with pytest.raises(ConfigError, match="expected int"):
            parse_config('{"train":{"batch_size":1.5}}')

    def test_float_accepts_integers(self):
        assert parse_config('{"train":{"initial_lr":1}}').train["initial_lr"] == 1.0

    def test_not_json(self):
        with pytest.raises(ConfigError):
            parse_config("{model: 1")


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["bogus"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == 2

    def test_config_error(self, tmp_path, capsys):
        assert main(["train", "--config", _config(tmp_path, {"train": {"epochs": 0}})]) == 2
        assert "epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        missing = tmp_path / "none.json"
        assert main(["train", "--config", str(missing)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["simulate", "--config", _config(tmp_path), "--out", str(out)]) == 0
        assert main(["sample", "--config", _config(tmp_path), "--out", str(out),
                     "--data", str(out / "simulations.csv")]) == 1
        assert "checkpoint.bfc" in capsys.readouterr().err

    def test_sample_needs_data(self, tmp_path):
        assert main(["sample", "--config", _config(tmp_path), "--out", str(tmp_path / "o")]) == 2

    def test_wrong_amortizer_kind(self, tmp_path):
        cfg = _config(tmp_path, {"model": "model_pair"})
        assert main(["sample", "--config", cfg, "--out", str(tmp_path), "--data", "x.csv"]) == 2


def _pipeline(tmp_path, out_name):
    out = tmp_path / out_name
    cfg = _config(tmp_path)
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert main(["sample", "--config", cfg, "--out", str(out), "--data", str(out / "simulations.csv"),
                 "--n-draws", "7"]) == 0
    assert main(["diagnose", "--config", cfg, "--out", str(out), "--data", str(out / "simulations.csv")]) == 0
    return out


class TestWorkflow:
    def test_outputs_and_schemas(self, tmp_path):
        out = _pipeline(tmp_path, "run")
        names = {p.name for p in out.iterdir()}
        assert names == {"simulations.csv", "checkpoint.bfc", "history.csv", "posterior_draws.csv",
                         "recovery.csv", "sbc_ranks.csv", "sbc_test.csv", "contraction.csv", "misspec.csv"}
        assert _rows(out / "history.csv")[0] == ["epoch", "train_loss", "val_loss", "learning_rate"]
        assert len(_rows(out / "history.csv")) == 3
        draws = _rows(out / "posterior_draws.csv")
        assert draws[0] == ["dataset", "draw", "mu_0", "mu_1"] and len(draws) == 1 + 6 * 7
        assert _rows(out / "recovery.csv")[0] == ["param", "true", "post_mean", "post_sd"]
        assert _rows(out / "sbc_test.csv")[0] == ["param", "chi2", "p"]
        assert _rows(out / "misspec.csv")[0][:3] == ["observed_mmd2", "p", "bandwidth"]
        assert read_batch_csv(out / "simulations.csv").data.shape == (6, 5, 2)

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = _pipeline(tmp_path, "a"), _pipeline(tmp_path, "b")
        for path in a.iterdir():
            assert path.read_bytes() == (b / path.name).read_bytes(), path.name

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = _config(tmp_path)
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"])
        assert (tmp_path / "a" / "simulations.csv").read_bytes() != (tmp_path / "b" / "simulations.csv").read_bytes()

    def test_writes_only_inside_out(self, tmp_path, monkeypatch):
        work = tmp_path / "work"
        work.mkdir()
        cfg = _config(tmp_path)
        monkeypatch.chdir(work)
        assert main(["simulate", "--config", cfg, "--out", "results"]) == 0
        assert main(["train", "--config", cfg, "--out", "results"]) == 0
        assert [p.name for p in work.iterdir()] == ["results"]
        assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json", "work"]

    def test_plain_observation_table(self, tmp_path):
        out = _pipeline(tmp_path, "run")
        table = tmp_path / "obs.csv"
        table.write_text("x_0,x_1\n1.0,2.0\n0.5,0.0\n-1.0,1.0\n")
        assert main(["sample", "--config", _config(tmp_path), "--out", str(out), "--data", str(table),
                     "--n-draws", "4"]) == 0
        assert len(_rows(out / "posterior_draws.csv")) == 5

    def test_compare(self, tmp_path):
        cfg = _config(tmp_path, {"model": "model_pair", "seed": 2,
                                 "network": {"embedding_dim": 4, "summary_hidden": [16], "classifier_hidden": [16]},
                                 "train": {"epochs": 1, "batches_per_epoch": 5, "calibration_sims": 200,
                                           "validation_sims": 50},
                                 "simulate": {"n_sims": 8, "n_obs": 10}})
        out = tmp_path / "cmp"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert main(["compare", "--config", cfg, "--out", str(out), "--data", str(out / "simulations.csv")]) == 0
        rows = _rows(out / "pmp.csv")
        assert rows[0] == ["dataset", "normal", "student_t3"] and len(rows) == 9
        np.testing.assert_allclose([float(r[1]) + float(r[2]) for r in rows[1:]], 1.0, atol=1e-6)


def test_train_then_sample_matches_analytic_posterior(tmp_path):
    cfg = {"model": "conjugate_gaussian", "seed": 1,
           "train": {"epochs": 48, "batches_per_epoch": 100, "initial_lr": 1e-3}}
    path = _config(tmp_path, cfg)
    out = tmp_path / "run"
    assert main(["train", "--config", path, "--out", str(out)]) == 0
    for n in (4, 16, 64):
        sim_cfg = _config(tmp_path, {**cfg, "seed": 100 + n, "simulate": {"n_sims": 100, "n_obs": n}}, f"s{n}.json")
        sim_out = tmp_path / f"sim{n}"
        assert main(["simulate", "--config", sim_cfg, "--out", str(sim_out)]) == 0
        assert main(["sample", "--config", path, "--out", str(sim_out), "--checkpoint", str(out / "checkpoint.bfc"),
                     "--data", str(sim_out / "simulations.csv"), "--n-draws", "1000"]) == 0
        draws = np.loadtxt(sim_out / "posterior_draws.csv", delimiter=",", skiprows=1)[:, 2:].reshape(100, 1000, 2)
        mean, var = conjugate_posterior(read_batch_csv(sim_out / "simulations.csv").data)
        assert np.abs(draws.mean(axis=1) - mean).mean() < 0.1
        assert np.abs(draws.std(axis=1) - np.sqrt(var)).mean() < 0.1
