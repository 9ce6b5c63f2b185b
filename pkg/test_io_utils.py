#!/usr/bin/env python3
"""
Tests for sequence and permutation files and the autocorrelation cache
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from utils.cache_utils import CACHE_ENV, AutocorrCache
from utils.correlation_utils import autocorrelation
from utils.errors import InvalidArgumentError
from utils.io_utils import (
    PERMUTATION_MAGIC,
    SEQUENCE_MAGIC,
    append_jsonl,
    read_jsonl,
    read_permutation,
    read_sequence,
    write_permutation,
    write_sequence_binary,
    write_sequence_csv,
    write_trend_csv,
)
from utils.reports import StatReport
from utils.sequence_utils import GOLDEN, gen_archimedean, gen_skew_sequence
from utils.testing_utils import run_tests_as_script


def test_sequence_csv_keeps_full_precision(tmp_path):
    u = gen_skew_sequence(GOLDEN, 20).prefix(500)
    path = write_sequence_csv(tmp_path / "skew.csv", u)
    assert path.read_text().splitlines()[0] == "n,re,im"
    back = read_sequence(path)
    assert np.array_equal(back.values, u.values)
    assert back.content_hash() == u.content_hash()


def test_sequence_binary_layout(tmp_path):
    u = gen_archimedean(0.5, 100)
    path = write_sequence_binary(tmp_path / "arch.fsl", u)
    raw = path.read_bytes()
    assert raw[:8] == SEQUENCE_MAGIC
    assert len(raw) == 8 + 16 * 100
    assert np.array_equal(read_sequence(path).values, u.values)


def test_bad_sequence_files(tmp_path):
    with pytest.raises(InvalidArgumentError):
        read_sequence(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("n,re,im\n1,0.5,0\n3,0.5,0\n")
    with pytest.raises(InvalidArgumentError):
        read_sequence(bad)
    outside = tmp_path / "outside.csv"
    outside.write_text("n,re,im\n1,2.0,0\n")
    with pytest.raises(InvalidArgumentError):
        read_sequence(outside)


def test_blank_csv_cell_is_rejected(tmp_path):
    rows = "".join(f"{n},1,0\n" for n in range(1, 401)).replace("200,1,0", "200,,0")
    damaged = tmp_path / "damaged.csv"
    damaged.write_text("n,re,im\n" + rows)
    with pytest.raises(InvalidArgumentError, match="n=200"):
        read_sequence(damaged)


def test_permutation_file_is_one_based(tmp_path):
    path = write_permutation(tmp_path / "phi.fsperm", np.array([2, 0, 1]))
    raw = path.read_bytes()
    assert raw[:8] == PERMUTATION_MAGIC
    assert np.frombuffer(raw[8:], dtype="<i8").tolist() == [3, 3, 1, 2]
    assert read_permutation(path).tolist() == [2, 0, 1]

    path.write_bytes(b"NOTAPERM" + raw[8:])
    with pytest.raises(InvalidArgumentError):
        read_permutation(path)


def test_jsonl_appends(tmp_path):
    path = tmp_path / "results.jsonl"
    append_jsonl(path, [StatReport(stat="a", value=0.5)])
    append_jsonl(path, [StatReport(stat="b", value=0.25, trend=[(1.0, 0.25)])])
    rows = read_jsonl(path)
    assert [row["stat"] for row in rows] == ["a", "b"]
    assert rows[1]["trend"] == [[1.0, 0.25]]
    trend = write_trend_csv(tmp_path / "plots" / "b.csv", [(1.0, 0.25), (10.0, 0.125)])
    assert trend.read_text().splitlines() == ["x,y", "1,0.25", "10,0.125"]


def test_cache_miss_then_hit(tmp_path):
    u = gen_archimedean(1.0, 2000)
    cache = AutocorrCache(tmp_path)
    calls = []

    def compute():
        calls.append(1)
        return autocorrelation(u, 50)

    first = cache.get_or_compute(u.content_hash(), 50, "cesaro", compute)
    second = cache.get_or_compute(u.content_hash(), 50, "cesaro", compute)
    assert len(calls) == 1
    assert (cache.hits, cache.misses) == (1, 1)
    assert np.array_equal(first.gamma, second.gamma)
    assert second.N_prime == 1950

    cache.get_or_compute(u.content_hash(), 50, "logarithmic", lambda: autocorrelation(u, 50, averaging="logarithmic"))
    assert cache.misses == 2


def test_corrupt_entry_is_recomputed(tmp_path):
    u = gen_archimedean(1.0, 2000)
    cache = AutocorrCache(tmp_path)
    table = cache.get_or_compute(u.content_hash(), 20, "cesaro", lambda: autocorrelation(u, 20))
    data_path, _, _ = cache._paths(cache.key(u.content_hash(), 20, "cesaro"))
    raw = bytearray(data_path.read_bytes())
    raw[20] ^= 0xFF
    data_path.write_bytes(bytes(raw))

    again = cache.get_or_compute(u.content_hash(), 20, "cesaro", lambda: autocorrelation(u, 20))
    assert cache.misses == 2 and cache.hits == 0
    assert np.array_equal(again.gamma, table.gamma)
    # the entry was rewritten
    assert cache.load(u.content_hash(), 20, "cesaro") is not None


def test_disabled_cache_writes_nothing(tmp_path):
    u = gen_archimedean(1.0, 500)
    cache = AutocorrCache(tmp_path / "cache", enabled=False)
    cache.get_or_compute(u.content_hash(), 10, "cesaro", lambda: autocorrelation(u, 10))
    cache.get_or_compute(u.content_hash(), 10, "cesaro", lambda: autocorrelation(u, 10))
    assert (cache.hits, cache.misses) == (0, 0)
    assert not (tmp_path / "cache").exists()


def test_cache_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "env-cache"))
    cache = AutocorrCache()
    assert cache.directory == tmp_path / "env-cache"
    u = gen_archimedean(1.0, 500)
    cache.get_or_compute(u.content_hash(), 10, "cesaro", lambda: autocorrelation(u, 10))
    assert len(list((tmp_path / "env-cache").glob("*.fsl"))) == 1


if __name__ == "__main__":
    sys.exit(run_tests_as_script(globals(), "Testing files and cache"))
