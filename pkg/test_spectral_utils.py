#!/usr/bin/env python3
"""
Tests for the spectral atom estimates
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from utils.correlation_utils import autocorrelation
from utils.errors import InvalidArgumentError
from utils.sequence_utils import gen_constant, gen_iid_signs, gen_root_of_unity
from utils.spectral_utils import (
    atom_mass_at,
    atom_mass_scan,
    atom_report,
    rational_atom_mass,
    rational_grid,
    rational_report,
    wiener_atom_mass,
)
from utils.testing_utils import run_tests_as_script


def _table(u, H=1000):
    return autocorrelation(u, H)


def test_wiener_parity():
    summary = wiener_atom_mass(_table(gen_root_of_unity(2, 10 ** 4)))
    assert summary.mean_sq == pytest.approx(1.0, abs=1e-9)
    assert summary.mean_abs_sq <= 1 / 1000 ** 2
    assert summary.nontrivial_atom_mass == pytest.approx(1.0, abs=1e-9)
    assert summary.rational_profile[2] == pytest.approx(1.0, abs=1e-9)


def test_wiener_constant():
    summary = wiener_atom_mass(_table(gen_constant(1.0, 10 ** 4)))
    assert summary.mean_sq == pytest.approx(1.0, abs=1e-9)
    assert summary.mean_abs_sq == pytest.approx(1.0, abs=1e-9)
    assert summary.nontrivial_atom_mass == pytest.approx(0.0, abs=1e-9)
    report = summary.to_report()
    assert report.stat == "wiener_atom_mass"
    assert report.params["H"] == 1000


def test_wiener_needs_depth():
    with pytest.raises(InvalidArgumentError):
        wiener_atom_mass(autocorrelation(gen_constant(1.0, 100), 5))


def test_rational_atoms():
    assert rational_atom_mass(_table(gen_root_of_unity(2, 10 ** 4)), 2) == pytest.approx(1.0, abs=1e-9)
    third = _table(gen_root_of_unity(3, 10 ** 4))
    assert rational_atom_mass(third, 3) == pytest.approx(1.0, abs=1e-9)
    assert rational_atom_mass(third, 2) < 4 / (1000 * np.sqrt(3)) + 1e-9
    with pytest.raises(InvalidArgumentError):
        rational_atom_mass(third, 101)


def test_atom_mass_at():
    assert atom_mass_at(_table(gen_root_of_unity(2, 10 ** 4)), 0.5) == pytest.approx(1.0, abs=1e-9)
    ones = _table(gen_constant(1.0, 10 ** 4))
    assert atom_mass_at(ones, 0.0) == pytest.approx(1.0, abs=1e-9)
    assert atom_mass_at(ones, 1 / 3) < 2 / (1000 * np.sqrt(3)) + 1e-9


def test_atom_mass_needs_theta_in_unit_interval():
    acf = _table(gen_constant(1.0, 10 ** 4))
    for theta in (-0.25, 1.0, 1.5, float("nan")):
        with pytest.raises(InvalidArgumentError):
            atom_mass_at(acf, theta)
    with pytest.raises(InvalidArgumentError):
        atom_report(acf, [0.0, 1.0])


def test_atoms_are_bounded_by_mean_square():
    acf = _table(gen_iid_signs(10 ** 4, seed=13), 500)
    bound = np.sqrt(wiener_atom_mass(acf).mean_sq)
    for theta in (0.0, 0.125, 1 / 3, 0.5, 0.9):
        assert atom_mass_at(acf, theta) <= bound + 1e-12


def test_rational_atom_at_one_is_the_mean():
    acf = _table(gen_iid_signs(10 ** 4, seed=14), 500)
    summary = wiener_atom_mass(acf)
    assert rational_atom_mass(acf, 1) == pytest.approx(np.sqrt(summary.mean_abs_sq), abs=1e-12)


def test_atom_scan_matches_pointwise():
    acf = _table(gen_iid_signs(10 ** 4, seed=12), 500)
    scan = atom_mass_scan(acf, 64)
    assert len(scan) == 64
    for k in (0, 5, 32, 63):
        assert scan["mass"][k] == pytest.approx(atom_mass_at(acf, k / 64), abs=1e-9)
    assert scan.attrs["square_sum"] <= scan.attrs["mean_sq"] + 0.01


def test_atom_scan_finds_parity():
    scan = atom_mass_scan(_table(gen_root_of_unity(2, 10 ** 4)), 16)
    assert scan["theta"][scan["mass"].idxmax()] == 0.5
    assert scan["mass"].max() == pytest.approx(1.0, abs=1e-9)


def test_rational_grid_is_finite():
    grid = rational_grid(_table(gen_root_of_unity(2, 10 ** 4)), [100, 1000], [2, 3, 20])
    assert list(grid.columns) == ["H", "q", "mass"]
    # q=20 needs H >= 200
    assert len(grid) == 5
    parity_rows = grid[grid["q"] == 2]
    assert np.allclose(parity_rows["mass"], 1.0, atol=1e-9)


def test_reports_take_the_largest_atom():
    acf = _table(gen_root_of_unity(3, 10 ** 4))
    report = rational_report(acf, [2, 3])
    assert report.value == pytest.approx(1.0, abs=1e-9)
    assert [q for q, _ in report.trend] == [2.0, 3.0]
    at = atom_report(acf, [0.0, 1 / 3])
    assert at.value == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        atom_report(acf, [])


if __name__ == "__main__":
    sys.exit(run_tests_as_script(globals(), "Testing spectral atoms"))
