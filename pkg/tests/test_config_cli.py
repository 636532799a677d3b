import csv
import logging

import numpy as np
import pytest
import yaml

from pacpfl import cli, config, experiment, fed
from pacpfl.config import ConfigError, ExperimentConfig
from pacpfl.gp import NumericalInstabilityError


def _small_config(**changes) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.n_clients = 4
    cfg.data.m_test = 20
    cfg.data.n_new = 2
    cfg.model.hidden_layers = 1
    cfg.model.hidden_width = 4
    cfg.fed.T = 5
    cfg.fed.c = 4
    cfg.fed.k = 2
    for key, value in changes.items():
        section, _, name = key.partition("__")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg


def _write(cfg, path):
    config.save(cfg, path)
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# config

def test_config_round_trip(tmp_path):
    cfg = _small_config(mode="pfedgp_mode", bounds__delta=0.2)
    again = config.from_dict(yaml.safe_load(config.dumps(cfg)))
    assert again == cfg
    config.save(cfg, tmp_path / "c.yaml")
    assert config.load(tmp_path / "c.yaml") == cfg
    assert config.dumps(config.load(tmp_path / "c.yaml")) == config.dumps(cfg)


def test_config_defaults_validate():
    ExperimentConfig().validate()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="fed.rounds"):
        config.from_dict({"fed": {"rounds": 3}})
    with pytest.raises(ConfigError, match="colour"):
        config.from_dict({"colour": "blue"})


def test_config_weight_error_names_field():
    raw = config.to_dict(ExperimentConfig())
    raw["data"]["task"]["modes"][1]["weight"] = 0.7
    with pytest.raises(ConfigError, match=r"data\.task\.modes\[1\]\.weight"):
        config.from_dict(raw).validate()


def test_with_seed_drives_data_and_training():
    cfg = ExperimentConfig().with_seed(7)
    assert (cfg.seed, cfg.fed.seed, cfg.data.task.seed) == (7, 7, 7)


def test_effective_config_modes():
    eff, notes = experiment.effective_config(_small_config(mode="pfedgp_mode"))
    assert eff.fed.k == 1 and eff.hyper_prior.variance == 1e6 and notes
    eff, _ = experiment.effective_config(_small_config(mode="pacpfl_dp"))
    assert eff.dp.enabled
    eff, notes = experiment.effective_config(_small_config(mode="vanilla"))
    assert not eff.dp.enabled and "vanilla" in notes[0]


def test_lambda_hypothesis_reported_as_config_error():
    cfg = _small_config(data__m_personal=2)  # n2 = 4 > lambda
    dataset = experiment.load_dataset(cfg)
    with pytest.raises(ConfigError, match="lambda > n2"):
        experiment.temperature(cfg, dataset)


# generate

def test_generate_writes_federation(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path), "--seed", "0"]) == 0
    out = tmp_path / "data_0"
    train_files = sorted(out.glob("existing_*_train.csv"))
    assert len(train_files) == 24
    for f in train_files:
        assert len(f.read_text().splitlines()) == 1 + 10
    assert len(list(out.glob("existing_*_test.csv"))) == 24
    assert len(list(out.glob("new_*_personal.csv"))) == 24
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert len(manifest["clients"]) == 48


def test_generate_is_byte_identical(tmp_path):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    args = ["generate", "--config", cfg, "--out", str(tmp_path), "--force"]
    assert cli.main(args) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "data_0").iterdir()}
    assert cli.main(args) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "data_0").iterdir()}
    assert first == second


def test_manifest_reload_matches_generated(tmp_path):
    cfg = _small_config()
    dataset = experiment.load_dataset(cfg)
    manifest = experiment.write_dataset(dataset, tmp_path)
    back = experiment.load_manifest(manifest)
    assert [c.client_id for c in back.existing] == [c.client_id for c in dataset.existing]
    for a, b in zip(dataset.existing + dataset.new, back.existing + back.new):
        for name in ("X", "y", "X_personal", "y_personal", "X_test", "y_test", "f_test"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_bad_weights_exit_code(tmp_path, capsys):
    raw = config.to_dict(_small_config())
    raw["data"]["task"]["modes"][1]["weight"] = 0.9
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert cli.main(["generate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "modes[1].weight" in capsys.readouterr().err


def test_overwrite_refused_without_force(tmp_path, capsys):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    args = ["generate", "--config", cfg, "--out", str(tmp_path / "o")]
    assert cli.main(args) == 0
    assert cli.main(args) == cli.EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert cli.main(args + ["--force"]) == 0


def test_missing_particles_exit_code(tmp_path):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_IO


def test_numerical_failure_exit_code(tmp_path, monkeypatch, capsys):
    def boom(cfg, dataset):
        raise NumericalInstabilityError("Cholesky failed", particle_index=1, client_id="existing_002")

    monkeypatch.setattr(experiment, "train", boom)
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_NUMERICAL
    assert "existing_002" in capsys.readouterr().err


# train / evaluate / bounds

def test_train_evaluate_cycle(tmp_path):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    run = out / "pacpfl_0"
    for name in ("particles.txt", "rounds.csv", "bounds.yaml", "config.yaml"):
        assert (run / name).exists(), name
    assert len(_read_csv(run / "rounds.csv")) == 5 * 4
    assert cli.main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    rows = _read_csv(run / "metrics.csv")
    assert [r["group"] for r in rows] == ["existing"] * 4 + ["new"] * 2
    summary = _read_csv(run / "summary.csv")
    assert len(summary) == 2 * 2
    assert cli.main(["evaluate", "--config", cfg, "--out", str(out)]) == cli.EXIT_IO


def test_training_is_reproducible(tmp_path):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    args = ["train", "--config", cfg, "--out", str(tmp_path), "--force"]
    assert cli.main(args) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "pacpfl_0").iterdir()}
    assert cli.main(args) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "pacpfl_0").iterdir()}
    assert first == second


def test_summary_without_new_clients(tmp_path):
    cfg = _write(_small_config(data__n_new=0), tmp_path / "c.yaml")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 0
    summary = _read_csv(tmp_path / "pacpfl_0" / "summary.csv")
    assert {r["group"] for r in summary} == {"existing"} and len(summary) == 2


def test_oracle_on_noiseless_data(tmp_path):
    cfg = _small_config(oracle=True)
    cfg.data.task.noise_std = 0.0
    path = _write(cfg, tmp_path / "c.yaml")
    assert cli.main(["evaluate", "--config", path, "--out", str(tmp_path)]) == 0
    for row in _read_csv(tmp_path / "pacpfl_0" / "metrics.csv"):
        assert float(row["rsmse"]) < 1e-9


def test_vanilla_and_pooled_modes(tmp_path, caplog):
    for mode, rows in (("vanilla", 4 + 2), ("pooled", 1)):
        cfg = _small_config(mode=mode)
        dataset = experiment.load_dataset(cfg)
        with caplog.at_level(logging.WARNING):
            result = experiment.train(cfg, dataset)
        assert result.particles.shape[0] == rows
        assert result.roundlog is None
        assert any(mode in r.message for r in caplog.records)
        out, _ = experiment.evaluate(cfg, dataset, result.particles)
        assert len(out) == 6


def test_pfedgp_mode_single_particle(tmp_path):
    cfg = _small_config(mode="pfedgp_mode")
    result = experiment.train(cfg, experiment.load_dataset(cfg))
    assert result.particles.shape[0] == 1
    assert np.all(np.abs(result.particles) < 100)


def test_bounds_report_consistency(tmp_path, capsys):
    cfg = _write(_small_config(), tmp_path / "c.yaml")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    particles = str(tmp_path / "pacpfl_0" / "particles.txt")
    assert cli.main(["bounds", "--config", cfg, "--out", str(tmp_path), "--particles", particles]) == 0
    assert "server_bound" in capsys.readouterr().out
    report = yaml.safe_load((tmp_path / "pacpfl_0" / "bounds_report.yaml").read_text())
    terms = report["server_terms"]
    assert list(terms) == ["empirical", "kl", "sample_complexity", "new_samples", "confidence"]
    assert abs(sum(terms.values()) - report["server_bound"]) < 1e-12
    assert terms["new_samples"] == 0.0  # no client holds personalization samples
    new_terms = report["new_client_terms"]
    assert abs(sum(new_terms.values()) - report["new_client_bound"]) < 1e-12
    assert len(report["epsilons"]) == len(report["I"]) == len(report["deltas"]) == 4
    assert len(report["clients"]) == 4
    for c in report["clients"]:
        assert c["bound"] >= c["empirical_risk"]


def test_bounds_with_unit_delta(tmp_path):
    cfg = _small_config(bounds__delta=1.0)
    report = experiment.bounds_report(cfg, experiment.load_dataset(cfg))
    assert report["new_client_terms"]["confidence"] == 0.0
    assert "server_terms" not in report


@pytest.mark.slow
def test_dp_without_noise_matches_plain_run():
    cfg = _small_config()
    cfg.data.n_clients = 6
    cfg.fed.c = 6
    cfg.fed.T = 40
    cfg.dp.epsilon = 1e18
    cfg.dp.clip_norm = 1e6
    dataset = experiment.load_dataset(cfg)

    def mean_rsmse(mode):
        cfg.mode = mode
        particles = experiment.train(cfg, dataset).particles
        rows, _ = experiment.evaluate(cfg, dataset, particles)
        return np.mean([r[2] for r in rows if r[1] == "existing"])

    plain, private = mean_rsmse("pacpfl"), mean_rsmse("pacpfl_dp")
    assert abs(private - plain) <= 0.01 * plain
