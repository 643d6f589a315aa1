"""Experiment configuration, CSV artifacts and the command line."""
import json

import numpy as np
import pytest

from jumpgrad import __version__, cli, harness
from jumpgrad.harness import ConfigError, ExperimentConfig, TimingRecord, load_config, parse_config_text


def run(argv):
    return cli.main([str(a) for a in argv])


def small_cir(tmp_path, **extra):
    args = ["run", "--experiment", "cir", "--theta", "4,2", "--n-samples", 300, "--n-steps", 20,
            "--estimators", "gg,fd", "--out", tmp_path]
    for k, v in extra.items():
        args += ["--" + k.replace("_", "-"), v]
    return args


def body(path):
    return path.read_text()


# ---------------------------------------------------------------------------
# configuration


def test_defaults_depend_on_experiment():
    assert ExperimentConfig.with_defaults("relu").n_steps == 2000
    cir = ExperimentConfig.with_defaults("cir")
    assert cir.theta == [4.0, 2.0, 0.55, 0.45, 0.2] and cir.estimators == ["gg", "fd"]
    assert ExperimentConfig.with_defaults("lq_bench", n_samples=50).n_samples == 50


def test_json_syntax_error_names_line_and_column():
    with pytest.raises(ConfigError, match=r"cfg\.json:2:\d+:"):
        parse_config_text('{"n_samples": 10,\n "theta": [1,, 2]}', "cfg.json")


@pytest.mark.parametrize("text,field", [
    ('{"n_sample": 10}', "n_sample"),
    ('{"experiment": "bogus"}', "experiment"),
    ('{"fd_h": 0}', "fd_h"),
    ('{"estimators": ["gg", "xx"]}', "estimators"),
    ('{"n_samples": 1}', "n_samples"),
])
def test_bad_fields_are_named(tmp_path, text, field):
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigError, match=field):
        load_config(path)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"experiment": "cir", "n-samples": 10, "master_seed": 4}))
    cfg = load_config(path, {"n_samples": 20, "theta": None})
    assert cfg.n_samples == 20 and cfg.master_seed == 4 and cfg.theta == [4.0, 2.0, 0.55, 0.45, 0.2]


def test_hash_ignores_where_and_how_fast():
    a = ExperimentConfig.with_defaults("cir")
    b = ExperimentConfig.with_defaults("cir", workers=8, output_dir="elsewhere")
    c = ExperimentConfig.with_defaults("cir", master_seed=1)
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_workers_zero_means_all_cores():
    assert ExperimentConfig(workers=0).effective_workers() >= 1


def test_timing_record_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        TimingRecord("GG", 102, 0.0, 1)


# ---------------------------------------------------------------------------
# command line


def test_cir_run_writes_provenance_and_rows(tmp_path):
    assert run(small_cir(tmp_path)) == 0
    lines = body(tmp_path / "cir.csv").splitlines()
    cfg = load_config(None, {"experiment": "cir", "theta": [4.0, 2.0], "n_samples": 300, "n_steps": 20,
                             "estimators": ["gg", "fd"]})
    assert lines[0] == f"#config-hash: {cfg.config_hash()}"
    assert lines[1] == "#seed: 0" and lines[2] == f"#version: {__version__}"
    assert lines[3] == "theta,estimator,mean,se,ci95,n_samples,h"
    rows = [r.split(",") for r in lines[4:]]
    assert [(r[0], r[1]) for r in rows] == [("4.0", "GG"), ("4.0", "FD"), ("2.0", "GG"), ("2.0", "FD")]
    assert rows[0][6] == "" and rows[1][6] == "0.05"
    mirror = json.loads(body(tmp_path / "cir.json"))
    assert mirror["config_hash"] == cfg.config_hash() and len(mirror["rows"]) == 4


def test_output_does_not_depend_on_worker_count(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    # enough replications for several chunks
    assert run(small_cir(a, workers=1, n_samples=9000, theta="2")) == 0
    assert run(small_cir(b, workers=3, n_samples=9000, theta="2")) == 0
    assert body(a / "cir.csv") == body(b / "cir.csv")


def test_environment_sets_default_workers(tmp_path, monkeypatch):
    seen = {}
    real = harness.run_experiment

    def spy(cfg):
        seen["workers"] = cfg.workers
        return real(cfg)

    monkeypatch.setattr(cli, "run_experiment", spy)
    monkeypatch.setenv("JUMPGRAD_WORKERS", "3")
    assert run(small_cir(tmp_path)) == 0
    assert seen["workers"] == 3
    assert run(small_cir(tmp_path, workers=2)) == 0
    assert seen["workers"] == 2
    monkeypatch.setenv("JUMPGRAD_WORKERS", "many")
    assert run(small_cir(tmp_path)) == 1


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "cir",\n  "theta": [1 2]}')
    assert run(["run", "--config", bad]) == 1
    assert "bad.json:2:" in capsys.readouterr().err
    assert run(["run", "--experiment", "cir", "--n-samples", "1", "--out", tmp_path]) == 1
    with pytest.raises(SystemExit) as exc:
        run(["run", "--no-such-flag"])
    assert exc.value.code == 1


def test_validate_passes_and_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["validate", "--seed", 3, "--out", a]) == 0
    assert run(["validate", "--seed", 3, "--out", b, "--workers", 2]) == 0
    text = body(a / "validate.csv")
    assert text == body(b / "validate.csv")
    statuses = {line.split(",")[0]: line.split(",")[1] for line in text.splitlines()[4:]}
    assert statuses["lq.drift.dxx"] == "SKIP"
    assert "FAIL" not in statuses.values()
    assert statuses["jump_test.gg_gradient"] == "PASS"


def test_failed_validation_exits_two(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "oracle_suite", lambda seed: [("planted", 1.0, 2.0, 0.01, False)])
    assert run(["validate", "--out", tmp_path]) == 2
    assert "planted,FAIL" in body(tmp_path / "validate.csv")


def test_train_demo_reduces_loss(tmp_path):
    assert run(["run", "--experiment", "train_demo", "--train-steps", 3, "--n-samples", 256,
                "--n-steps", 50, "--learning-rate", 0.1, "--out", tmp_path]) == 0
    rows = [r.split(",") for r in body(tmp_path / "train.csv").splitlines()[4:]]
    assert len(rows) == 4
    assert float(rows[-1][1]) < float(rows[0][1])


def test_lq_bench_and_timing_artifacts(tmp_path):
    assert run(["run", "--experiment", "lq_bench", "--widths", 5, "--n-samples", 40, "--n-steps", 20,
                "--out", tmp_path]) == 0
    table = body(tmp_path / "lq_table.csv").splitlines()
    assert table[3].startswith("n,width,avg_se_gg") and table[4].startswith("102,5,")
    for name in ("lq_coords_n102.csv", "se_ratio_n102.csv", "se_hist_n102.csv", "lq_table.json"):
        assert (tmp_path / name).exists()
    assert run(["run", "--experiment", "timing", "--n-grid", "100", "--n-steps", 10, "--timing-batches", 2,
                "--out", tmp_path]) == 0
    rows = [r.split(",") for r in body(tmp_path / "timing.csv").splitlines()[4:]]
    assert [r[0] for r in rows] == ["GG", "PD"] and all(float(r[2]) > 0 for r in rows)
    assert np.all([int(r[1]) == 102 for r in rows])
