import json
import os

import numpy as np
import pytest
import scipy.stats

from andersonlab import cli
from andersonlab._io import atomic_write_text
from andersonlab.harness import (CapExceeded, ConfigError, ExperimentConfig, TaskFailed,
                                 TaskPool, csv_text, json_text, make_distribution,
                                 restore_stream, run, seed_stream, stream_state)
from andersonlab.localization import BoxTooSmall

PROPAGATE = {"experiment": "propagate", "seed": 3, "dim": 3, "box_side_sites": 6,
             "distribution": "bernoulli", "coupling_lambda": 0.5, "time_t": 2.0,
             "n_realizations": 3}


def write_config(path, d):
    path.write_text(ExperimentConfig.from_dict(d).to_toml())
    return str(path)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(PROPAGATE)
    p = tmp_path / "c.toml"
    p.write_text(cfg.to_toml())
    back = ExperimentConfig.load(p)
    assert back == cfg and back.digest() == cfg.digest()


def test_config_rejects_unknown_and_missing_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(PROPAGATE, time_s=1.0))
    d = dict(PROPAGATE)
    del d["time_t"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(PROPAGATE, coupling_lambda="big"))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(PROPAGATE, experiment="nope"))


def test_caps_have_defaults_and_are_enforced():
    cfg = ExperimentConfig.from_dict(PROPAGATE)
    assert cfg.caps["cap_max_order"] == 20000
    with pytest.raises(CapExceeded):
        ExperimentConfig.from_dict(dict(PROPAGATE, box_side_sites=64, cap_max_sites=1000))


def test_localization_box_too_small_rejected():
    d = {"experiment": "localization", "seed": 0, "box_side_sites": 32,
         "distribution": "bernoulli", "coupling_lambda": 0.3, "shell_delta": 0.3,
         "shell_ell_sites": 11.0, "time_t": 1.0, "n_realizations": 1}
    with pytest.raises(BoxTooSmall):
        ExperimentConfig.from_dict(d)


def test_distribution_names():
    assert make_distribution("discrete:-1,1;1,1").values == (-1.0, 1.0)
    with pytest.raises(ConfigError):
        make_distribution("cauchy")


def test_run_is_deterministic(tmp_path):
    cfg = ExperimentConfig.from_dict(PROPAGATE)
    m1 = run(cfg, out_dir=str(tmp_path / "a"))
    m2 = run(cfg, out_dir=str(tmp_path / "b"), threads=3)
    assert m1.all_pass and m2.all_pass
    a = (tmp_path / "a" / "propagate.csv").read_bytes()
    b = (tmp_path / "b" / "propagate.csv").read_bytes()
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["all_pass"] and manifest["config_hash"] == cfg.digest()
    assert "propagate.csv" in manifest["files"]


def test_seed_stream_reproducible_and_independent():
    a = seed_stream(0, 0).random(10000)
    assert np.array_equal(a, seed_stream(0, 0).random(10000))
    b = seed_stream(0, 1).random(10000)
    edges = np.linspace(0, 1, 11)
    table = np.histogram2d(a, b, [edges, edges])[0]
    assert scipy.stats.chi2_contingency(table)[1] > 1e-3


def test_seed_stream_state_round_trip():
    g = seed_stream(5, 2)
    g.random(17)
    state = json.loads(json.dumps(stream_state(g)))
    h = restore_stream(state)
    assert np.array_equal(g.random(100), h.random(100))


def test_task_pool_order_and_failures():
    pool = TaskPool(4)
    assert pool.map(lambda x: x * x, range(20)) == [x * x for x in range(20)]

    def bad(x):
        if x == 3:
            raise ValueError("boom")
        return x

    with pytest.raises(TaskFailed) as info:
        pool.map(bad, range(6))
    assert info.value.failures[0]["task"] == 3


def test_failed_task_is_recorded_not_written(tmp_path):
    cfg = ExperimentConfig.from_dict(dict(PROPAGATE, cap_max_order=5))
    m = run(cfg, out_dir=str(tmp_path))
    assert not m.all_pass and m.failed_tasks
    assert not (tmp_path / "propagate.csv").exists()


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    atomic_write_text(str(target), "old\n")

    def broken(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", broken)
    with pytest.raises(OSError):
        atomic_write_text(str(target), "new\n")
    assert target.read_text() == "old\n"
    assert sorted(os.listdir(tmp_path)) == ["out.txt"]


def test_output_formats():
    text = csv_text(["a", "b"], [(1, 0.1), (2, 1 / 3)])
    assert text == "a,b\n1,0.10000000000000001\n2,0.33333333333333331\n"
    assert json.loads(json_text({"x": 1 / 3}))["x"] == 1 / 3
    assert "0.33333333333333331" in json_text({"x": 1 / 3})


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path / "p.toml", PROPAGATE)
    assert cli.main(["propagate", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text('experiment = "propagate"\nseed = 1\n')
    assert cli.main(["propagate", "--config", str(bad)]) == 2
    capsys.readouterr()
    assert cli.main(["diagrams", "count", "--nbar", "3"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert table["3"] == {"1": 1, "2": 15, "3": 15}
    assert cli.main(["diagrams", "enumerate", "--n", "2", "--nprime", "2"]) == 0


def test_cli_enumerate_json(capsys):
    cli.main(["diagrams", "enumerate", "--n", "1", "--nprime", "1"])
    parts = json.loads(capsys.readouterr().out)
    assert parts == [{"blocks": [[1, 3]], "types": ["II"],
                      "classification": ["simple", "ladder"]}]


def test_cli_verify_oracle(tmp_path):
    out = tmp_path / "v"
    assert cli.main(["diagrams", "verify-oracle", "--out", str(out)]) == 0
    report = json.loads((out / "oracle_report.json").read_text())
    assert report["all_pass"]


def test_selftest(tmp_path):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
