#!/usr/bin/env python3
"""
Tests for experiment configs, the experiment runner and the fslab command line
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import contextlib
import io
import json

import pytest

from utils.cache_utils import CACHE_ENV
from utils.cli_utils import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, main
from utils.errors import ConfigError
from utils.experiment_utils import apply_overrides, config_hash, load_config, parse_config, run_experiment
from utils.io_utils import read_jsonl, read_sequence
from utils.testing_utils import run_tests_as_script

SMOKE = {
    "sequence": {"generator": "liouville", "N": 10000},
    "statistics": [
        {"name": "averaged_chowla", "H": 10},
        {"name": "progression", "H": 50, "Q": 5},
        {"name": "wiener_atom_mass", "H": 1000, "grid": 64},
    ],
}

SMOKE_TOML = """
[sequence]
generator = "root_of_unity"
q = 3
N = 5000

[[statistics]]
name = "rational_atom_mass"
H = 200
q = [2, 3]

[[systems]]
kind = "circle"
alpha = 0.3819660112501051
Ns = [1000, 5000]
"""


def _smoke(out_dir, threads=1):
    return parse_config(dict(SMOKE, output={"dir": str(out_dir), "threads": threads}))


def _cli(argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
        code = main(argv)
    return code, stdout.getvalue(), stderr.getvalue()


def test_smoke_run_writes_results(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    record = run_experiment(_smoke(tmp_path / "run"))
    assert record.success
    assert [r.stat for r in record.reports] == ["averaged_chowla", "progression", "wiener_atom_mass"]
    rows = read_jsonl(tmp_path / "run" / "results.jsonl")
    assert len(rows) == 3
    assert (tmp_path / "run" / "tables" / "autocorr_H1000_cesaro.csv").exists()
    assert (tmp_path / "run" / "tables" / "atom_scan.csv").exists()
    assert (tmp_path / "run" / "plots" / "00_averaged_chowla.csv").exists()
    saved = json.loads((tmp_path / "run" / "record.json").read_text())
    assert saved["config_hash"] == record.config_hash
    assert record.cache_misses == 1


def test_second_run_hits_the_cache(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    first = run_experiment(_smoke(tmp_path / "first"))
    second = run_experiment(_smoke(tmp_path / "second"))
    assert second.cache_hits >= 1 and second.cache_misses == 0
    assert first.config_hash == second.config_hash
    first_bytes = (tmp_path / "first" / "results.jsonl").read_bytes()
    assert first_bytes == (tmp_path / "second" / "results.jsonl").read_bytes()

    # rerunning into the same directory replaces the results instead of appending
    run_experiment(_smoke(tmp_path / "first"))
    assert (tmp_path / "first" / "results.jsonl").read_bytes() == first_bytes


def test_thread_count_does_not_change_results(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    serial = apply_overrides(_smoke(tmp_path / "serial"), no_cache=True)
    threaded = apply_overrides(_smoke(tmp_path / "threaded", threads=4), no_cache=True)
    run_experiment(serial)
    run_experiment(threaded)
    assert (tmp_path / "serial" / "results.jsonl").read_bytes() == (tmp_path / "threaded" / "results.jsonl").read_bytes()


def test_unknown_statistic_names_its_field():
    with pytest.raises(ConfigError) as caught:
        parse_config({"sequence": {"generator": "liouville", "N": 100}, "statistics": [{"name": "chowla9", "H": 3}]})
    assert caught.value.field == "statistics.0.name"
    assert caught.value.to_dict()["error"] == "config-error"
    with pytest.raises(ConfigError):
        parse_config({"sequence": {"generator": "liouville", "N": 100}, "statistics": [{"name": "progression", "H": 3}]})
    with pytest.raises(ConfigError):
        parse_config({"sequence": {"generator": "liouville"}})
    with pytest.raises(ConfigError):
        parse_config({"sequence": {"generator": "liouville", "N": 100}, "extra": 1})


def test_config_hash_ignores_layout_and_output():
    config = _smoke("results/a")
    reordered = parse_config({
        "output": {"threads": 3, "dir": "elsewhere"},
        "statistics": [dict(reversed(list(stat.items()))) for stat in SMOKE["statistics"]],
        "sequence": {"N": 10000, "generator": "liouville"},
    })
    assert config_hash(config) == config_hash(reordered)
    changed = parse_config(dict(SMOKE, sequence={"generator": "liouville", "N": 20000}))
    assert config_hash(changed) != config_hash(config)
    assert config_hash(apply_overrides(config, log_averaging=True)) != config_hash(config)


def test_load_config_from_toml(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(SMOKE_TOML)
    config = load_config(path)
    assert config.sequence.q == 3
    assert config.statistics[0].q == [2, 3]
    assert config.systems[0].build().kind == "circle"
    assert config.output.dir == "results"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[sequence\n")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_failing_block_gives_partial_result(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    config = parse_config({
        "sequence": {"generator": "root_of_unity", "q": 2, "N": 2000},
        "statistics": [
            {"name": "rational_atom_mass", "H": 100, "q": [20]},
            {"name": "short_interval", "H": 10},
        ],
        "output": {"dir": str(tmp_path / "run")},
    })
    record = run_experiment(config)
    assert not record.success
    assert record.failures[0]["error"] == "invalid-argument"
    assert record.failures[0]["stat"] == "rational_atom_mass"
    assert [r.stat for r in record.reports] == ["short_interval"]
    assert len(read_jsonl(tmp_path / "run" / "results.jsonl")) == 1


def test_cli_stat_prints_json(tmp_path):
    code, out, _ = _cli(["stat", "--name", "short_interval", "--H", "10", "--generator", "root_of_unity",
                         "--q", "2", "--N", "1000", "--out", str(tmp_path), "--no-cache", "-q"])
    assert code == EXIT_OK
    report = json.loads(out.strip().splitlines()[0])
    assert report["stat"] == "short_interval"
    assert report["value"] == pytest.approx(0.0, abs=1e-15)


def test_cli_exit_codes(tmp_path):
    code, _, err = _cli(["run", "-q"])
    assert code == EXIT_ERROR
    assert json.loads(err.strip().splitlines()[-1])["field"] == "config"

    code, _, _ = _cli(["spectral", "--H", "100", "--qs", "20", "--generator", "root_of_unity", "--q", "2",
                       "--N", "2000", "--out", str(tmp_path), "--no-cache", "-q"])
    assert code == EXIT_PARTIAL


def test_cli_gen_writes_sequence(tmp_path):
    code, out, _ = _cli(["gen", "--generator", "archimedean", "--t", "1.0", "--N", "100", "--format", "binary",
                         "--out", str(tmp_path), "-q"])
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["N"] == 100
    assert read_sequence(summary["path"]).content_hash() == summary["hash"]


if __name__ == "__main__":
    sys.exit(run_tests_as_script(globals(), "Testing experiment runs"))
