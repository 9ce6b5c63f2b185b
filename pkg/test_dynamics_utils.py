#!/usr/bin/env python3
"""
Tests for the model systems, orbit evaluation and the orthogonality harness
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import math

import numpy as np
import pytest

from utils.dynamics_utils import (
    BlockSchedule,
    OrbitSystem,
    circle_rotation,
    heisenberg,
    heisenberg_power,
    iterate_orbit,
    multiplier_test,
    orbit_coordinates,
    orbit_evaluate,
    orthogonality_test,
    schedule_from_blocks,
    skew_genericity_check,
    skew_product,
    square_schedule,
    strong_momo_test,
    torus_rotation,
    turns,
)
from utils.errors import InvalidArgumentError
from utils.sequence_utils import (
    GOLDEN,
    ArithmeticSequence,
    gen_archimedean,
    gen_constant,
    gen_liouville,
    gen_skew_sequence,
    msv_blockify,
)
from utils.testing_utils import circular_distance, run_tests_as_script

SQRT2_ANGLE = math.sqrt(2.0) - 1.0


def test_circle_rotation_character():
    values = orbit_evaluate(circle_rotation(GOLDEN), None, 1000).values
    n = np.arange(1, 1001)
    assert np.allclose(values, np.exp(2j * np.pi * n * GOLDEN), atol=1e-9)


def test_skew_vertical_character():
    x0, y0 = 0.3, 0.1
    values = orbit_evaluate(skew_product(), [x0, y0], 1000).values
    n = np.arange(1, 1001)
    assert np.allclose(values, np.exp(2j * np.pi * (y0 + n * x0)), atol=1e-9)


def test_skew_closed_form_matches_stepping():
    system = skew_product(alpha=GOLDEN)
    closed = orbit_coordinates(system, [0.3, 0.1], 10 ** 6)
    stepped = iterate_orbit(system, [0.3, 0.1], 10 ** 6)
    assert np.array_equal(closed["x"], stepped["x"])
    assert np.array_equal(closed["y"], stepped["y"])


def test_orbit_coordinates_with_offset():
    system = torus_rotation(GOLDEN, SQRT2_ANGLE)
    full = orbit_coordinates(system, [0.2, 0.7], 500)
    tail = orbit_coordinates(system, [0.2, 0.7], 100, start=401)
    assert np.array_equal(full["x"][400:], tail["x"])
    assert np.array_equal(full["y"][400:], tail["y"])


def test_heisenberg_power_entries():
    a, b, c = 0.3, 0.7, 0.1
    g = np.array([[1.0, a, c], [0.0, 1.0, b], [0.0, 0.0, 1.0]])
    product = np.eye(3)
    for n in range(1, 21):
        product = product @ g
        x, y, z = heisenberg_power(a, b, c, n)
        assert (x, y, z) == pytest.approx((product[0, 1], product[1, 2], product[0, 2]))
        assert z == pytest.approx(n * c + n * (n - 1) / 2 * a * b)


def test_heisenberg_projects_to_torus():
    a, b = GOLDEN, SQRT2_ANGLE
    nil = orbit_coordinates(heisenberg(a, b, 0.2), [0.1, 0.4, 0.5], 10 ** 5)
    torus = orbit_coordinates(torus_rotation(a, b), [0.1, 0.4], 10 ** 5)
    assert np.array_equal(nil["x"], torus["x"])
    assert np.array_equal(nil["y"], torus["y"])


def test_heisenberg_closed_form_matches_stepping():
    system = heisenberg(GOLDEN, SQRT2_ANGLE, 0.2)
    closed = orbit_coordinates(system, [0.1, 0.4, 0.5], 5000)
    stepped = iterate_orbit(system, [0.1, 0.4, 0.5], 5000)
    assert circular_distance(turns(closed["x"]), stepped["x"]) < 1e-9
    assert circular_distance(turns(closed["y"]), stepped["y"]) < 1e-9
    assert circular_distance(closed["z"], stepped["z"]) < 1e-9
    assert np.all((closed["z"] >= 0) & (closed["z"] < 1))


def test_observable_catalogue_is_closed():
    with pytest.raises(InvalidArgumentError):
        circle_rotation(GOLDEN, observable="char:1,1")
    with pytest.raises(InvalidArgumentError):
        circle_rotation(GOLDEN, observable="vertical")
    with pytest.raises(InvalidArgumentError):
        torus_rotation(GOLDEN, 0.1, observable="heisenberg")
    with pytest.raises(InvalidArgumentError):
        torus_rotation(GOLDEN, 0.1, observable="char:x")
    with pytest.raises(InvalidArgumentError):
        OrbitSystem("horocycle")
    with pytest.raises(InvalidArgumentError):
        orbit_coordinates(circle_rotation(GOLDEN), [0.1, 0.2], 10)
    assert torus_rotation(GOLDEN, 0.1, observable="char:2").character == (2, 0)


def test_orthogonality_of_constant():
    N = 1000
    report = orthogonality_test(gen_constant(1.0, N), circle_rotation(GOLDEN), None, [N])
    assert report.value <= 2 / (N * abs(1 - np.exp(2j * np.pi * GOLDEN))) + 1e-12


def test_orthogonality_perfect_correlation():
    system = circle_rotation(GOLDEN)
    u = ArithmeticSequence(np.conj(orbit_evaluate(system, None, 2000).values))
    for averaging in ("cesaro", "logarithmic"):
        report = orthogonality_test(u, system, None, [100, 1000, 2000], averaging=averaging)
        assert all(value == pytest.approx(1.0, abs=1e-9) for _, value in report.trend)


def test_orthogonality_ignores_global_phase():
    u = gen_liouville(10 ** 4)
    rotated = ArithmeticSequence(u.values * np.exp(0.7j))
    system = circle_rotation(SQRT2_ANGLE)
    first = orthogonality_test(u, system, None, [10 ** 4])
    second = orthogonality_test(rotated, system, None, [10 ** 4])
    assert first.value == pytest.approx(second.value, abs=1e-12)


def test_skew_sequence_orthogonal_to_rotation():
    u = gen_skew_sequence(GOLDEN, 150)
    report = orthogonality_test(u, circle_rotation(SQRT2_ANGLE), None, [10 ** 4, len(u)])
    assert report.value < 0.02


def test_schedules():
    schedule = square_schedule(10)
    assert schedule.cuts.tolist() == [k * k for k in range(1, 11)]
    assert schedule.threshold == 0
    assert BlockSchedule([1, 5, 7, 10, 20]).threshold == 1
    with pytest.raises(InvalidArgumentError):
        BlockSchedule([3, 3])
    _, blocks = msv_blockify(gen_archimedean(1.0, 1000))
    assert schedule_from_blocks(blocks).cuts[0] == 1


def test_strong_momo_zero_sequence():
    report = strong_momo_test(gen_constant(0.0, 10 ** 4), circle_rotation(GOLDEN), square_schedule(100))
    assert report.value == 0.0


def test_strong_momo_phase_aligned_blocks():
    system = circle_rotation(GOLDEN)
    u = orbit_evaluate(system, None, 10 ** 4)
    report = strong_momo_test(u, system, square_schedule(100), observable="char:-1", restarts="orbit")
    assert report.value == pytest.approx(1.0, abs=1e-9)
    assert report.params["b_K"] == 10 ** 4
    assert report.params["value_over_b_K"] == pytest.approx(9999 / 10 ** 4, abs=1e-9)


def test_strong_momo_random_restarts():
    u = gen_liouville(10 ** 6)
    report = strong_momo_test(u, circle_rotation(GOLDEN), square_schedule(1000), restarts="random", seed=1)
    assert report.value < 0.05
    again = strong_momo_test(u, circle_rotation(GOLDEN), square_schedule(1000), restarts="random", seed=1)
    assert report.value == again.value


def test_strong_momo_explicit_restarts():
    system = circle_rotation(GOLDEN)
    u = orbit_evaluate(system, None, 100)
    cuts = np.array([1, 10, 40, 100])
    # y_k = T^{b_k} 0 makes the explicit restarts agree with the orbit mode
    points = np.array([[(b * GOLDEN) % 1.0] for b in cuts[:-1]])
    schedule = BlockSchedule(cuts, restarts=points)
    explicit = strong_momo_test(u, system, schedule, observable="char:-1", restarts="explicit")
    assert explicit.value == pytest.approx(1.0, abs=1e-9)
    assert explicit.params["value_over_b_K"] == pytest.approx(0.99, abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        strong_momo_test(u, system, BlockSchedule(cuts), restarts="explicit")
    with pytest.raises(InvalidArgumentError):
        strong_momo_test(u, system, square_schedule(11))


def test_multiplier_reports_variation():
    u = gen_liouville(10 ** 4)
    v = gen_archimedean(1.0, 10 ** 4)
    report = multiplier_test(u, v, circle_rotation(GOLDEN), None, [10 ** 4])
    assert report.stat == "multiplier"
    assert report.params["multiplier_variation"] < 0.01
    assert report.value < 0.1


def test_skew_genericity():
    report = skew_genericity_check(GOLDEN, 150)
    assert report.params["N"] == 1136275
    assert report.value < 0.05


if __name__ == "__main__":
    sys.exit(run_tests_as_script(globals(), "Testing model systems"))
