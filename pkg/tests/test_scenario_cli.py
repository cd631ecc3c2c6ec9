import json

import numpy as np
import pytest
import yaml

from kmsig import cli
from kmsig.frames import ingest_csv
from kmsig.gridsim import ConfigError, data_path
from kmsig.scenario import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, load_config, parse_config,
                            run_scenario)

from conftest import DATA


def small_config(tmp_path, **changes):
    """Short toy-network scenario written to disk; returns its path."""
    cfg = {
        "name": "toy",
        "network": {
            "generators": [{"inertia": 1.0, "damping": 0.5, "participation": 0.5},
                           {"inertia": 1.0, "damping": 0.5, "participation": 0.5}],
            "n_load": 1,
            "lines": [[1, 3, 5.0], [2, 3, 4.0], [1, 2, 1.0]],
            "base_load": {3: 1.0},
            "agc_gain": 0.5,
        },
        "duration": 5.0,
        "seed": 2,
        "noise_std": {"voltage_angle": 1e-4},
        "events": [{"bus": 3, "start_time": 0.5, "delta_load": 0.2}],
        "attack": {"type": "step", "targets": ["bus3"], "t1": 3.0, "t2": 4.0},
        "window": {"learning_len": 40, "prediction_len": 10, "stride": 5},
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(changes)
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_bundled_configs_load():
    cfg = load_config("step_attack")
    assert cfg.n_samples == 900
    assert cfg.attack.attack_type == "step" and cfg.attack.targets == ("bus30",)
    assert (cfg.attack.t1, cfg.attack.t2) == (20.0, 40.0)
    assert cfg.window.n_windows(cfg.n_samples) == 125
    assert [e.bus for e in cfg.events] == [17, 52]
    assert load_config("event_only").attack is None
    assert load_config(data_path("poisoning.yaml")).attack.attack_type == "poisoning"


def test_step_attack_run(step_run):
    assert step_run.scores.n_windows == 125
    assert step_run.scores.scores.shape == (125, 68)
    assert step_run.ground_truth["bus30"] is True
    assert sum(step_run.ground_truth.values()) == 1


def test_run_writes_artifacts_and_manifest(tmp_path):
    path = small_config(tmp_path)
    assert run_scenario(path) == EXIT_OK
    out = tmp_path / "out"
    names = {p.name for p in out.iterdir()}
    assert {"clean_voltage_angle.csv", "attacked_voltage_angle.csv", "ground_truth.csv",
            "scores.csv", "distances.csv", "summary.json", "manifest.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == names - {"manifest.json"}
    assert manifest["seed"] == 2
    assert len(manifest["config_sha256"]) == 64
    assert {"numpy", "scipy", "scikit-learn", "kmsig"} <= set(manifest["versions"])
    truth = (out / "ground_truth.csv").read_text().splitlines()
    assert truth[0] == "sensor_id,attacked" and "bus3,true" in truth


def test_attack_free_scenario(tmp_path):
    path = small_config(tmp_path, attack=None)
    assert run_scenario(path) == EXIT_OK
    out = tmp_path / "out"
    assert not (out / "attacked_voltage_angle.csv").exists()
    rows = (out / "ground_truth.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",false") for r in rows)
    assert (out / "scores.csv").exists()


def test_runs_are_byte_identical(tmp_path):
    path = small_config(tmp_path)
    assert run_scenario(path, out_dir=tmp_path / "a") == EXIT_OK
    assert run_scenario(path, out_dir=tmp_path / "b") == EXIT_OK
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


@pytest.mark.parametrize("changes, field", [
    ({"window": {"learning_len": 40, "prediction_len": 80}}, "window.prediction_len"),
    ({"window": {"learning_len": 200}}, "window.learning_len"),
    ({"window": {"tau": -1}}, "tau"),
    ({"window": {"lag": 3}}, "window.lag"),
    ({"duration": -1}, "duration"),
    ({"channel": "current"}, "channel"),
    ({"events": [{"bus": 9, "start_time": 1.0, "delta_load": 0.1}]}, "events[0].bus"),
    ({"events": [{"bus": 3, "delta_load": 0.1}]}, "events[0].start_time"),
    ({"attack": {"type": "step", "targets": ["bus9"]}}, "attack.targets"),
    ({"attack": {"type": "zap", "targets": ["bus3"]}}, "attack_type"),
    ({"attack": {"targets": ["bus3"]}}, "attack.type"),
    ({"noise_std": {"voltage_angle": -1}}, "noise_std.voltage_angle"),
    ({"colour": "red"}, "colour"),
    ({"network": "missing.yaml"}, "network"),
])
def test_config_errors_name_the_field(tmp_path, changes, field):
    path = small_config(tmp_path, **changes)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert field in str(info.value)


def test_config_and_runtime_exit_codes_differ(tmp_path, capsys):
    bad = small_config(tmp_path, duration=0)
    assert run_scenario(bad) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    unstable = small_config(tmp_path, events=[{"bus": 3, "start_time": 0.5, "delta_load": 50.0}])
    assert run_scenario(unstable) == EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err
    assert EXIT_CONFIG != EXIT_RUNTIME


def test_missing_config_file(tmp_path):
    assert run_scenario(tmp_path / "nope.yaml") == EXIT_CONFIG


def test_parse_config_rejects_non_mapping():
    with pytest.raises(ConfigError):
        parse_config(["not", "a", "mapping"])


# -- command line -------------------------------------------------------------

def test_cli_pipeline(tmp_path, capsys):
    cfg = small_config(tmp_path)
    sim_dir, inj_dir, det_dir = tmp_path / "sim", tmp_path / "inj", tmp_path / "det"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(sim_dir)]) == 0
    clean = sim_dir / "clean_voltage_angle.csv"
    assert cli.main(["inject", "--frame", str(clean), "--attack-type", "dos",
                     "--targets", "bus2", "--t1", "2.0", "--t2", "3.0",
                     "--out", str(inj_dir)]) == 0
    attacked = ingest_csv(inj_dir / "attacked_voltage_angle.csv")
    window = (attacked.times >= 2.0) & (attacked.times <= 3.0)
    assert np.ptp(attacked.row("bus2")[window]) == 0.0
    for div in ("kl", "js"):
        assert cli.main(["detect", "--frame", str(inj_dir / "attacked_voltage_angle.csv"),
                         "--learning-len", "40", "--prediction-len", "10", "--stride", "5",
                         "--divergence", div, "--out", str(det_dir / div)]) == 0
        assert (det_dir / div / "scores.csv").exists()
    capsys.readouterr()
    assert cli.main(["report", "--summary", str(det_dir / "kl" / "summary.json"),
                     "--against", str(det_dir / "js" / "summary.json"),
                     "--truth", str(inj_dir / "ground_truth.csv")]) == 0
    out = capsys.readouterr().out
    assert "argmin agreement:" in out
    assert "argmin on an attacked sensor:" in out


def test_cli_inject_from_config(tmp_path):
    cfg = small_config(tmp_path)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["inject", "--frame", str(tmp_path / "s" / "clean_voltage_angle.csv"),
                     "--config", str(cfg), "--c", "0.5", "--out", str(tmp_path / "i")]) == 0
    clean = ingest_csv(tmp_path / "s" / "clean_voltage_angle.csv")
    attacked = ingest_csv(tmp_path / "i" / "attacked_voltage_angle.csv")
    k = int(round(3.5 / 0.05))
    assert attacked.row("bus3")[k] == pytest.approx(1.5 * clean.row("bus3")[k])


def test_cli_run_with_overrides(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--backend", "hankel", "--delay", "4",
                     "--divergence", "js", "--tau", "2", "--seed", "9",
                     "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["backend"] == "hankel"
    assert summary["config"]["delay"] == 4
    assert summary["config"]["divergence"] == "js"
    assert json.loads((out / "manifest.json").read_text())["seed"] == 9


def test_cli_detect_external_csv(tmp_path):
    assert cli.main(["detect", "--frame", str(DATA / "three_sensors.csv"),
                     "--learning-len", "30", "--prediction-len", "10",
                     "--out", str(tmp_path)]) == 0
    header = (tmp_path / "scores.csv").read_text().splitlines()[0]
    assert header == "window_time,pmu_a,pmu_b,pmu_c"


def test_cli_error_codes(tmp_path, capsys):
    assert cli.main(["detect", "--frame", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)]) == EXIT_CONFIG
    assert cli.main(["detect", "--frame", str(DATA / "three_sensors.csv"),
                     "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "prediction-len" in capsys.readouterr().err
    assert cli.main(["inject", "--frame", str(DATA / "three_sensors.csv"),
                     "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        cli.main(["detect", "--backend", "svd", "--frame", "x", "--out", "y"])
    assert info.value.code == 2
