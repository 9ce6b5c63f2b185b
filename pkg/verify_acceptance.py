#!/usr/bin/env python3
"""
Full-scale acceptance checks for fslab.

Runs every check at its real sample size (minutes, not seconds) and prints one
✅/❌ line per check with its timing. Exit status is 0 only when all checks pass.
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import logging
import math
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np

from utils.correlation_utils import autocorrelation, averaged_chowla_stat, progression_stat, u1_norm_estimate
from utils.dynamics_utils import (
    circle_rotation,
    heisenberg,
    iterate_orbit,
    orbit_coordinates,
    orthogonality_test,
    skew_genericity_check,
    skew_product,
    torus_rotation,
)
from utils.empirics_utils import quantize
from utils.errors import InvalidTowerError
from utils.experiment_utils import apply_overrides, load_config, run_experiment
from utils.joining_utils import (
    JoiningTarget,
    build_dynamic_permutation,
    build_permutation,
    build_tower,
    choose_tower_base,
    coupling_allocate,
    random_coupling_spec,
    self_joining_pipeline,
)
from utils.sequence_utils import (
    GOLDEN,
    ArithmeticSequence,
    gen_archimedean,
    gen_iid_signs,
    gen_liouville,
    gen_root_of_unity,
    gen_skew_sequence,
)
from utils.spectral_utils import rational_atom_mass, wiener_atom_mass

SQRT2_ANGLE = math.sqrt(2.0) - 1.0
SMOKE_CONFIG = Path(__file__).parent / "experiments" / "liouville_smoke.toml"


def check_exact_combinatorics():
    rng = np.random.default_rng(1)
    started = time.perf_counter()
    for trial in range(1000):
        m = int(rng.integers(2, 7))
        eps = float(rng.uniform(0.02, 0.2))
        spec, counts, N = random_coupling_spec(m, eps, rng, factor=int(rng.choice([1, 2, 10])))
        alloc = coupling_allocate(spec, counts, N)
        if not all(alloc.report[c] for c in ("c1", "c2", "c3")):
            return False, f"trial {trial}: allocation report {alloc.report}"
        if not np.array_equal(coupling_allocate(spec, counts, N).V_pair, alloc.V_pair):
            return False, f"trial {trial}: allocation is not a function of its inputs"
        atoms = rng.permutation(np.repeat(np.arange(m), counts))
        plan = build_permutation(alloc, atoms, spec.lam, eps)
        if plan.report["cell_error"] > 4 * eps:
            return False, f"trial {trial}: cell error {plan.report['cell_error']:.4f} > {4 * eps:.4f}"
    elapsed = time.perf_counter() - started
    return elapsed < 5.0, f"1000 couplings in {elapsed:.2f}s"


def check_locally_orbital_bound():
    rng = np.random.default_rng(2)
    kinds = ["product", "diagonal", "shifted_diagonal:1", "mixture:0.5*product+0.5*diagonal"]
    built, skipped, attempts = 0, 0, 0
    while built < 100 and attempts < 400:
        attempts += 1
        N = int(rng.integers(2 * 10 ** 4, 10 ** 5 + 1))
        h = int(rng.integers(4, 65))
        eps = float(rng.choice([0.1, 0.2, 0.25]))
        s = quantize(gen_iid_signs(N, seed=int(rng.integers(1 << 30))), "signs")
        try:
            base = choose_tower_base(s, h, eps)
        except InvalidTowerError:
            skipped += 1
            continue
        tower = build_tower(s, "subshift", N, h, base_block=base, epsilon=eps)
        target = JoiningTarget.parse(kinds[built % len(kinds)])
        plan = build_dynamic_permutation(s.symbols, tower, target, eps)
        report = plan.report
        if report["ti_violations"] or report["defect_fraction"] > report["defect_bound"]:
            return False, f"N={N}, h={h}, eps={eps}, {target}: {report}"
        built += 1
    return built >= 100, f"{built} instances, {skipped} without a usable tower base"


def check_self_joining_pipeline():
    u = gen_iid_signs(10 ** 6, seed=3)
    stages = self_joining_pipeline(u, [10 ** 4, 10 ** 5, 10 ** 6], "product", workers=3)
    errors = [report.length2_error for _, report in stages]
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    diagonal = self_joining_pipeline(u.prefix(10 ** 5), [10 ** 4, 10 ** 5], "diagonal")
    exact = all(report.length2_error == 0.0 for _, report in diagonal)
    ok = errors[-1] < 0.05 and monotone and exact
    return ok, f"product errors {[round(e, 5) for e in errors]}, diagonal exact={exact}"


def check_skew_genericity():
    started = time.perf_counter()
    report = skew_genericity_check(GOLDEN, 150)
    elapsed = time.perf_counter() - started
    ok = report.params["N"] == 1136275 and report.value < 0.05 and elapsed < 10.0
    return ok, f"max character mean {report.value:.5f} in {elapsed:.2f}s"


def check_rotation_orthogonality():
    u = gen_skew_sequence(GOLDEN, 150)
    report = orthogonality_test(u, circle_rotation(SQRT2_ANGLE), None, [len(u)])
    return report.value < 0.02, f"c(N) = {report.value:.5f} at N = {len(u)}"


def check_spectral_atoms():
    parity = autocorrelation(gen_root_of_unity(2, 10 ** 6), 10 ** 4)
    mass2 = rational_atom_mass(parity, 2)
    nontrivial = wiener_atom_mass(parity).nontrivial_atom_mass
    third = autocorrelation(gen_root_of_unity(3, 10 ** 6), 10 ** 4)
    mass3, leak2 = rational_atom_mass(third, 3), rational_atom_mass(third, 2)
    ok = abs(mass2 - 1) <= 1e-6 and abs(nontrivial - 1) <= 1e-4 and abs(mass3 - 1) <= 1e-6 and leak2 < 1e-3
    return ok, f"parity q=2 {mass2:.8f}, nontrivial {nontrivial:.6f}; cube q=3 {mass3:.8f}, q=2 {leak2:.2e}"


def check_u1_dichotomy():
    arch = u1_norm_estimate(gen_archimedean(1.0, 10 ** 6), 1000).value
    liouville = u1_norm_estimate(gen_liouville(10 ** 6, workers=4), 1000).value
    return arch >= 0.5 and liouville < 0.02, f"n^i {arch:.4f}, Liouville {liouville:.5f}"


def check_averaged_chowla_trend():
    started = time.perf_counter()
    u = gen_liouville(10 ** 7, workers=4)
    acf = autocorrelation(u, 1000, workers=4)
    chowla = averaged_chowla_stat(u, 10, acf=acf)
    values = [y for _, y in chowla.trend]
    decreasing = all(b < a for a, b in zip(values, values[1:]))
    progression = progression_stat(u, 1000, 10, workers=4).value
    elapsed = time.perf_counter() - started
    ok = decreasing and progression < 0.02 and elapsed < 60.0
    return ok, f"trend {[round(v, 5) for v in values]}, progression {progression:.5f}, {elapsed:.1f}s"


def check_oracle_equivalence():
    rng = np.random.default_rng(4)
    u = ArithmeticSequence(np.exp(2j * np.pi * rng.random(10 ** 5)))
    fast = autocorrelation(u, 200, method="fft").gamma
    slow = autocorrelation(u, 200, method="direct").gamma
    fft_gap = float(np.max(np.abs(fast - slow) / np.maximum(1.0, np.abs(slow))))

    skew = skew_product(alpha=GOLDEN)
    closed = orbit_coordinates(skew, [0.3, 0.1], 10 ** 6)
    stepped = iterate_orbit(skew, [0.3, 0.1], 10 ** 6)
    skew_ok = np.array_equal(closed["x"], stepped["x"]) and np.array_equal(closed["y"], stepped["y"])

    nil = orbit_coordinates(heisenberg(GOLDEN, SQRT2_ANGLE, 0.2), [0.1, 0.4, 0.5], 10 ** 6)
    torus = orbit_coordinates(torus_rotation(GOLDEN, SQRT2_ANGLE), [0.1, 0.4], 10 ** 6)
    projection_ok = np.array_equal(nil["x"], torus["x"]) and np.array_equal(nil["y"], torus["y"])

    ok = fft_gap < 1e-9 and skew_ok and projection_ok
    return ok, f"fft/direct {fft_gap:.2e}, skew closed form {skew_ok}, projection {projection_ok}"


def check_determinism():
    config = load_config(SMOKE_CONFIG)
    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for threads in (1, 4):
            out = Path(tmp) / f"threads{threads}"
            run_experiment(apply_overrides(config, out=str(out), threads=threads, no_cache=True))
            outputs.append((out / "results.jsonl").read_bytes())
    return outputs[0] == outputs[1], f"results.jsonl {'identical' if outputs[0] == outputs[1] else 'differs'}"


CHECKS = [
    ("Exact coupling combinatorics", check_exact_combinatorics),
    ("Locally orbital permutations", check_locally_orbital_bound),
    ("Self-joining pipeline", check_self_joining_pipeline),
    ("Skew sequence genericity", check_skew_genericity),
    ("Orthogonality to a rotation", check_rotation_orthogonality),
    ("Spectral atoms", check_spectral_atoms),
    ("u^1 dichotomy", check_u1_dichotomy),
    ("Averaged Chowla trend", check_averaged_chowla_trend),
    ("Oracle equivalence", check_oracle_equivalence),
    ("Thread determinism", check_determinism),
]


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    print("🔬 fslab acceptance checks")
    print("=" * 60)

    passed = 0
    for index, (title, check) in enumerate(CHECKS, start=1):
        started = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as e:
            ok, detail = False, f"{type(e).__name__}: {e}"
            traceback.print_exc()
        elapsed = time.perf_counter() - started
        print(f"{'✅' if ok else '❌'} {index:2d}. {title} ({elapsed:.1f}s): {detail}")
        passed += bool(ok)

    print("=" * 60)
    if passed == len(CHECKS):
        print(f"🎉 All {passed} checks passed")
        return 0
    print(f"❌ {len(CHECKS) - passed} of {len(CHECKS)} checks failed")
    return 1


if __name__ == "__main__":
    sys.exit(main())
