#!/usr/bin/env python3
"""
Tests for the sequence generators and the mean slowly varying block construction
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import math

import numpy as np
import pytest

import utils.sequence_utils as sequence_utils
from utils.errors import InvalidArgumentError
from utils.sequence_utils import (
    GOLDEN,
    ArithmeticSequence,
    besicovitch_mean,
    fixed_to_turns,
    gen_archimedean,
    gen_constant,
    gen_iid_signs,
    gen_liouville,
    gen_power_decay,
    gen_root_of_unity,
    gen_skew_sequence,
    mean_variation,
    msv_blockify,
    pointwise_product,
    skew_orbit_pieces,
)
from utils.testing_utils import run_tests_as_script


def _liouville_by_trial_division(n: int) -> int:
    count, p = 0, 2
    while p * p <= n:
        while n % p == 0:
            n //= p
            count += 1
        p += 1
    if n > 1:
        count += 1
    return -1 if count % 2 else 1


def test_liouville_first_values():
    assert gen_liouville(1).values.real.tolist() == [1.0]
    assert gen_liouville(10).values.real.tolist() == [1, -1, -1, 1, -1, 1, -1, -1, 1, 1]


def test_liouville_segments_match_trial_division(monkeypatch):
    monkeypatch.setattr(sequence_utils, "SIEVE_SEGMENT", 997)
    N = 5000
    expected = [_liouville_by_trial_division(n) for n in range(1, N + 1)]
    serial = gen_liouville(N)
    threaded = gen_liouville(N, workers=4)
    assert serial.values.real.tolist() == expected
    assert np.array_equal(serial.values, threaded.values)


def test_liouville_is_completely_multiplicative():
    N = 10 ** 4
    lam = gen_liouville(N).values.real
    for m in range(2, N // 2 + 1):
        n = np.arange(1, N // m + 1)
        assert np.array_equal(lam[m * n - 1], lam[m - 1] * lam[n - 1]), f"m={m}"


def test_liouville_mean_is_small():
    u = gen_liouville(10 ** 6)
    assert abs(u.values.real.mean()) < 0.01


def test_skew_sequence_blocks():
    u = gen_skew_sequence(GOLDEN, 2)
    expected = np.exp(2j * np.pi * np.array([0.0, 0.0, 2 * GOLDEN, 4 * GOLDEN, 6 * GOLDEN]))
    assert len(u) == 5
    assert np.allclose(u.values, expected, atol=1e-12)
    assert gen_skew_sequence(GOLDEN, 1).values.tolist() == [1.0 + 0j]


def test_skew_orbit_pieces():
    x, y = skew_orbit_pieces(GOLDEN, 2)
    assert x.dtype == np.uint64
    assert np.allclose(fixed_to_turns(x), [GOLDEN, (2 * GOLDEN) % 1] + [(2 * GOLDEN) % 1] * 3, atol=1e-12)
    assert np.allclose(fixed_to_turns(y), [0.0, 0.0, (2 * GOLDEN) % 1, (4 * GOLDEN) % 1, (6 * GOLDEN) % 1], atol=1e-12)
    assert np.all(x[1:] == x[1])


def test_skew_sequence_length():
    assert len(gen_skew_sequence(GOLDEN, 150)) == 1136275


def test_skew_rejects_bad_angle():
    with pytest.raises(InvalidArgumentError):
        gen_skew_sequence(1.5, 10)


def test_archimedean_values():
    assert np.allclose(gen_archimedean(0.0, 5).values, np.ones(5))
    u = gen_archimedean(1.0, 7)
    assert u.values[0] == pytest.approx(1.0)
    assert np.angle(u.values[6]) == pytest.approx(math.log(7), abs=1e-12)


def test_power_decay_mean():
    u = gen_power_decay(1.0, 10)
    harmonic = sum(1.0 / n for n in range(1, 11))
    assert u.values[0] == pytest.approx(1.0)
    assert besicovitch_mean(u) == pytest.approx(harmonic / 10)
    assert besicovitch_mean(gen_power_decay(0.5, 10 ** 6)) < 0.01


def test_iid_signs_are_seeded():
    first = gen_iid_signs(1000, seed=3)
    assert np.array_equal(first.values, gen_iid_signs(1000, seed=3).values)
    assert not np.array_equal(first.values, gen_iid_signs(1000, seed=4).values)
    assert set(first.values.real.tolist()) == {-1.0, 1.0}


def test_root_of_unity_parity():
    u = gen_root_of_unity(2, 6)
    assert u.values.real.tolist() == [-1, 1, -1, 1, -1, 1]
    third = gen_root_of_unity(3, 3)
    assert np.allclose(third.values, np.exp(2j * np.pi * np.arange(1, 4) / 3))


def test_sequences_stay_in_unit_disc():
    with pytest.raises(InvalidArgumentError):
        ArithmeticSequence([0.5, 1.5])
    with pytest.raises(InvalidArgumentError):
        ArithmeticSequence([])
    with pytest.raises(InvalidArgumentError):
        gen_constant(2.0, 10)


def test_non_finite_values_are_rejected():
    with pytest.raises(InvalidArgumentError, match="n=2"):
        ArithmeticSequence([1.0, math.nan, -1.0])
    with pytest.raises(InvalidArgumentError):
        ArithmeticSequence([1.0, complex(0.0, math.inf)])


def test_prefix_and_hash():
    u = gen_iid_signs(100, seed=1)
    head = u.prefix(50)
    assert len(head) == 50
    assert head.content_hash() == ArithmeticSequence(u.values[:50]).content_hash()
    assert head.content_hash() != u.content_hash()
    assert u.prefix(100) is u
    with pytest.raises(InvalidArgumentError):
        u.prefix(101)


def test_pointwise_product_truncates():
    product = pointwise_product(gen_root_of_unity(2, 10), gen_constant(0.5, 6))
    assert len(product) == 6
    assert product.values.real.tolist() == [-0.5, 0.5, -0.5, 0.5, -0.5, 0.5]


def test_msv_constant_is_one_block():
    v = gen_constant(0.3 + 0.4j, 1000)
    flat, blocks = msv_blockify(v)
    assert np.array_equal(flat.values, v.values)
    assert blocks.block_count == 1
    assert blocks.distance == 0.0
    assert not blocks.not_slowly_varying


def test_msv_archimedean_is_close():
    v = gen_archimedean(1.0, 10 ** 5)
    flat, blocks = msv_blockify(v)
    assert blocks.distance < 0.05
    assert not blocks.not_slowly_varying
    assert mean_variation(v) < 0.01

    # every block stays inside its tolerance around z_k
    ends = np.r_[blocks.boundaries[1:], len(v) + 1]
    for start, end, z, eps in zip(blocks.boundaries, ends, blocks.block_values, blocks.tolerances):
        assert np.max(np.abs(flat.values[start - 1:end - 1] - z)) < eps
    assert np.all(np.diff(blocks.tolerances) <= 0)


def test_msv_flags_iid_signs():
    _, blocks = msv_blockify(gen_iid_signs(10 ** 4, seed=5))
    assert blocks.jump_density == pytest.approx(0.5, abs=0.03)
    assert blocks.not_slowly_varying


def test_msv_rejects_bad_schedule():
    with pytest.raises(InvalidArgumentError):
        msv_blockify(gen_constant(1.0, 10), [0.1, 0.2])


if __name__ == "__main__":
    sys.exit(run_tests_as_script(globals(), "Testing sequence generators"))
