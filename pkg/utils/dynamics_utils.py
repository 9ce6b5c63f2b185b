# utils/dynamics_utils.py

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import InvalidArgumentError
from utils.reports import StatReport
from utils.sequence_utils import (
    ArithmeticSequence,
    BlockStructure,
    fixed_multiplier,
    fixed_to_turns,
    mean_variation,
    pointwise_product,
    skew_orbit_pieces,
    to_fixed,
    unit_phase,
)

logger = logging.getLogger(__name__)

HEISENBERG_CHUNK = 256


class OrbitSystem:
    """
    A uniquely ergodic model system with one observable from a closed catalogue.

    Kinds:
        circle      x -> x + alpha
        torus       (x, y) -> (x + alpha, y + beta)
        skew        (x, y) -> (x + alpha, y + x); alpha = 0 gives (x, x + y)
        heisenberg  left translation by g = (a, b, c) on the Heisenberg nilmanifold,
                    points in Mal'cev coordinates reduced to [0, 1)^3

    Observables:
        char:r,s    (x, y) -> e^{2 pi i (r x + s y)}  ('char:r' on the circle)
        vertical    e^{2 pi i y}
        heisenberg  e^{2 pi i y}, y the second coordinate of the projection to the torus
    """

    DIMENSIONS = {"circle": 1, "torus": 2, "skew": 2, "heisenberg": 3}
    OBSERVABLES = ("char", "vertical", "heisenberg")

    def __init__(self, kind: str, alpha: float = 0.0, beta: float = 0.0,
                 a: float = 0.0, b: float = 0.0, c: float = 0.0, observable: str = "char:1,0"):
        if kind not in self.DIMENSIONS:
            raise InvalidArgumentError(f"unknown system '{kind}'")
        for name, value in (("alpha", alpha), ("beta", beta), ("a", a), ("b", b), ("c", c)):
            if not math.isfinite(value):
                raise InvalidArgumentError(f"{name} must be finite")
        self.kind = kind
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)
        self.observable = observable
        self.character = self._parse_observable(observable)

    def __repr__(self) -> str:
        return f"OrbitSystem({self.kind}, observable={self.observable})"

    @property
    def dimension(self) -> int:
        return self.DIMENSIONS[self.kind]

    def with_observable(self, observable: str) -> "OrbitSystem":
        return OrbitSystem(self.kind, self.alpha, self.beta, self.a, self.b, self.c, observable)

    def describe(self) -> Dict[str, object]:
        params = {"system": self.kind, "observable": self.observable}
        if self.kind == "heisenberg":
            params.update(a=self.a, b=self.b, c=self.c)
        else:
            params["alpha"] = self.alpha
            if self.kind == "torus":
                params["beta"] = self.beta
        return params

    def _parse_observable(self, observable: str) -> Tuple[int, int]:
        """(r, s) weights of the character evaluated on (x, y)"""
        name, _, args = observable.partition(":")
        if name == "char":
            try:
                weights = [int(part) for part in args.split(",")] if args else []
            except ValueError:
                raise InvalidArgumentError(f"bad character weights in '{observable}'")
            if len(weights) == 1:
                weights.append(0)
            if len(weights) != 2:
                raise InvalidArgumentError(f"observable '{observable}' needs char:r or char:r,s")
            if self.kind == "circle" and weights[1] != 0:
                raise InvalidArgumentError("the circle rotation has no second coordinate")
            return weights[0], weights[1]
        if name == "vertical" and not args:
            if self.kind == "circle":
                raise InvalidArgumentError("vertical observable needs a two dimensional system")
            return 0, 1
        if name == "heisenberg" and not args:
            if self.kind != "heisenberg":
                raise InvalidArgumentError("heisenberg observable only applies to the heisenberg system")
            return 0, 1
        raise InvalidArgumentError(f"unknown observable '{observable}'")


def circle_rotation(alpha: float, observable: str = "char:1") -> OrbitSystem:
    return OrbitSystem("circle", alpha=alpha, observable=observable)


def torus_rotation(alpha: float, beta: float, observable: str = "char:1,0") -> OrbitSystem:
    return OrbitSystem("torus", alpha=alpha, beta=beta, observable=observable)


def skew_product(alpha: float = 0.0, observable: str = "vertical") -> OrbitSystem:
    return OrbitSystem("skew", alpha=alpha, observable=observable)


def heisenberg(a: float, b: float, c: float, observable: str = "heisenberg") -> OrbitSystem:
    return OrbitSystem("heisenberg", a=a, b=b, c=c, observable=observable)


@dataclass(frozen=True)
class BlockSchedule:
    cuts: np.ndarray  # 1-based b_1 < b_2 < ...
    restarts: Optional[np.ndarray] = None  # explicit y_k per block, shape (blocks, dimension)

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=np.int64)
        if cuts.size < 2 or cuts[0] < 1 or np.any(np.diff(cuts) <= 0):
            raise InvalidArgumentError("a schedule needs at least two increasing cut points >= 1")
        object.__setattr__(self, "cuts", cuts)

    @property
    def threshold(self) -> int:
        gaps = np.diff(self.cuts)
        drops = np.flatnonzero(gaps[:-1] > gaps[1:])
        return int(drops[-1]) + 1 if drops.size else 0


def square_schedule(K: int) -> BlockSchedule:
    return BlockSchedule(np.arange(1, int(K) + 1, dtype=np.int64) ** 2)


def schedule_from_blocks(blocks: BlockStructure) -> BlockSchedule:
    return BlockSchedule(blocks.boundaries)


def _initial_state(sys: OrbitSystem, x0: Optional[Sequence[float]]) -> List[float]:
    coords = [] if x0 is None else [float(v) for v in np.ravel(x0)]
    if len(coords) > sys.dimension:
        raise InvalidArgumentError(f"{sys.kind} points have {sys.dimension} coordinate(s), got {len(coords)}")
    return coords + [0.0] * (sys.dimension - len(coords))


def _reduce_heisenberg(x: np.ndarray, y: np.ndarray, z: np.ndarray):
    """Right action of the lattice: (x, y, z)(m1, m2, m3) = (x + m1, y + m2, z + m3 + x m2)"""
    fy = np.floor(y)
    z = z - x * fy
    return x - np.floor(x), y - fy, z - np.floor(z)


def _heisenberg_z(sys: OrbitSystem, state: List[float], count: int, start: int) -> np.ndarray:
    """Reduced z coordinate of g^n x0 for n = start..start+count-1, closed form per chunk"""
    a, b, c = sys.a, sys.b, sys.c
    x, y, z = (float(v[0]) for v in _reduce_heisenberg(*(np.array([v]) for v in state)))
    out = np.empty(count)
    n = 0
    if start == 0:
        out[0] = z
    last = start + count - 1
    while n < last:
        m = np.arange(1, min(HEISENBERG_CHUNK, last - n) + 1, dtype=np.float64)
        X = x + m * a
        Y = y + m * b
        Z = z + m * c + m * (m - 1) / 2.0 * a * b + m * a * y
        X, Y, Z = _reduce_heisenberg(X, Y, Z)
        steps = n + m.astype(np.int64)
        keep = (steps >= start)
        out[steps[keep] - start] = Z[keep]
        x, y, z = float(X[-1]), float(Y[-1]), float(Z[-1])
        n = int(steps[-1])
    return out


def orbit_coordinates(sys: OrbitSystem, x0: Optional[Sequence[float]], count: int, start: int = 1) -> Dict[str, np.ndarray]:
    """
    Coordinates of T^n x0 for n = start..start+count-1 by the closed forms.

    x and y are 64-bit fixed-point turns (exact mod 1 arithmetic); the heisenberg z
    coordinate is a float in [0, 1).
    """
    if count < 1 or start < 0:
        raise InvalidArgumentError("orbit needs count >= 1 and start >= 0")
    state = _initial_state(sys, x0)
    n = np.arange(start, start + count, dtype=np.uint64)
    x_start = to_fixed(state[0])
    y_start = to_fixed(state[1]) if sys.dimension > 1 else np.uint64(0)

    if sys.kind == "heisenberg":
        x = x_start + n * to_fixed(sys.a)
        y = y_start + n * to_fixed(sys.b)
        return {"x": x, "y": y, "z": _heisenberg_z(sys, state, count, start)}

    step = to_fixed(sys.alpha)
    x = x_start + n * step
    if sys.kind == "circle":
        return {"x": x, "y": np.zeros(count, dtype=np.uint64)}
    if sys.kind == "torus":
        return {"x": x, "y": y_start + n * to_fixed(sys.beta)}
    pairs = (np.arange(start, start + count, dtype=np.int64) * np.arange(start - 1, start + count - 1, dtype=np.int64)) // 2
    y = y_start + n * x_start + pairs.astype(np.uint64) * step
    return {"x": x, "y": y}


def iterate_orbit(sys: OrbitSystem, x0: Optional[Sequence[float]], N: int) -> Dict[str, np.ndarray]:
    """
    Coordinates of T^n x0 for n = 1..N by stepping the recurrence with reduction mod 1
    after every step (cumulative sums in fixed point; the heisenberg system steps one
    group multiplication at a time).
    """
    state = _initial_state(sys, x0)
    if sys.kind == "heisenberg":
        xs, ys, zs = np.empty(N), np.empty(N), np.empty(N)
        x, y, z = state
        for i in range(N):
            x, y, z = x + sys.a, y + sys.b, z + sys.c + sys.a * y
            fy = math.floor(y)
            z -= x * fy
            x, y, z = x - math.floor(x), y - fy, z - math.floor(z)
            xs[i], ys[i], zs[i] = x, y, z
        return {"x": xs, "y": ys, "z": zs}

    x_start = to_fixed(state[0])
    steps = np.full(N, to_fixed(sys.alpha), dtype=np.uint64)
    x = x_start + np.cumsum(steps, dtype=np.uint64)
    if sys.kind == "circle":
        return {"x": x, "y": np.zeros(N, dtype=np.uint64)}
    y_start = to_fixed(state[1])
    if sys.kind == "torus":
        return {"x": x, "y": y_start + np.cumsum(np.full(N, to_fixed(sys.beta), dtype=np.uint64), dtype=np.uint64)}
    previous_x = np.concatenate(([x_start], x[:-1])).astype(np.uint64)
    return {"x": x, "y": y_start + np.cumsum(previous_x, dtype=np.uint64)}


def heisenberg_power(a: float, b: float, c: float, n: int) -> Tuple[float, float, float]:
    """g^n for g = (a, b, c) through the unitriangular matrix product"""
    g = np.array([[1.0, a, c], [0.0, 1.0, b], [0.0, 0.0, 1.0]])
    power = np.linalg.matrix_power(g, int(n))
    return float(power[0, 1]), float(power[1, 2]), float(power[0, 2])


def _evaluate(sys: OrbitSystem, coords: Dict[str, np.ndarray]) -> np.ndarray:
    r, s = sys.character
    phase = coords["x"] * fixed_multiplier(r) + coords["y"] * fixed_multiplier(s)
    return unit_phase(phase)


def orbit_evaluate(sys: OrbitSystem, x0: Optional[Sequence[float]], N: int) -> ArithmeticSequence:
    """(f(T^n x0))_{n=1..N} for the system's observable"""
    if int(N) < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N}")
    values = _evaluate(sys, orbit_coordinates(sys, x0, int(N)))
    return ArithmeticSequence(values, f"{sys.kind}:{sys.observable}", dict(sys.describe(), N=int(N)))


def _weighted_mean(terms: np.ndarray, weights: Optional[np.ndarray], norm: float) -> complex:
    if weights is not None:
        terms = terms * weights
    return complex(math.fsum(terms.real), math.fsum(terms.imag)) / norm


def orthogonality_test(
    u: ArithmeticSequence,
    sys: OrbitSystem,
    x0: Optional[Sequence[float]],
    Ns: Sequence[int],
    averaging: str = "cesaro",
) -> StatReport:
    """
    c(N) = |(1/N) sum_{n <= N} f(T^n x0) u(n)| for every N in Ns; 'logarithmic'
    replaces 1/N by weights 1/n over the harmonic sum.
    """
    if not Ns:
        raise InvalidArgumentError("Ns must not be empty")
    Ns = [int(N) for N in Ns]
    if min(Ns) < 1 or max(Ns) > len(u):
        raise InvalidArgumentError(f"Ns must lie in 1..{len(u)}")
    if averaging not in ("cesaro", "logarithmic"):
        raise InvalidArgumentError(f"unknown averaging '{averaging}'")
    top = max(Ns)
    products = orbit_evaluate(sys, x0, top).values * u.values[:top]
    weights = 1.0 / np.arange(1, top + 1, dtype=np.float64) if averaging == "logarithmic" else None

    trend = []
    for N in Ns:
        norm = math.fsum(weights[:N]) if weights is not None else float(N)
        part = weights[:N] if weights is not None else None
        trend.append((float(N), abs(_weighted_mean(products[:N], part, norm))))

    params = dict(sys.describe(), x0=_initial_state(sys, x0), averaging=averaging, N=Ns[-1])
    return StatReport(stat="orthogonality", params=params, value=trend[-1][1], trend=trend)


def strong_momo_test(
    u: ArithmeticSequence,
    sys: OrbitSystem,
    schedule: BlockSchedule,
    observable: Optional[str] = None,
    K: Optional[int] = None,
    restarts: str = "random",
    seed: int = 0,
    x0: Optional[Sequence[float]] = None,
) -> StatReport:
    """
    (1/(b_K - b_1)) sum_{k < K} |sum_{b_k <= n < b_{k+1}} u(n) f(S^{n - b_k} y_k)|; the same
    sum divided by b_K goes to params["value_over_b_K"].

    Args:
        restarts: 'random' (uniform y_k from a seeded generator), 'orbit'
            (y_k = T^{b_k} x0, which phase-aligns blocks with the orbit of x0) or
            'explicit' (schedule.restarts)
        K: Number of cut points used, defaults to all of them
    """
    if observable is not None:
        sys = sys.with_observable(observable)
    cuts = schedule.cuts if K is None else schedule.cuts[: int(K)]
    if cuts.size < 2:
        raise InvalidArgumentError("strong MOMO needs at least two cut points")
    if int(cuts[-1]) > len(u):
        raise InvalidArgumentError(f"schedule end b_K={int(cuts[-1])} exceeds the sequence length {len(u)}")

    blocks = cuts.size - 1
    if restarts == "random":
        points = np.random.default_rng(seed).random((blocks, sys.dimension))
    elif restarts == "explicit":
        if schedule.restarts is None or len(schedule.restarts) < blocks:
            raise InvalidArgumentError("explicit restarts need one point per block")
        points = np.asarray(schedule.restarts, dtype=np.float64)
    elif restarts != "orbit":
        raise InvalidArgumentError(f"unknown restart mode '{restarts}'")

    sums = []
    for k in range(blocks):
        start, stop = int(cuts[k]), int(cuts[k + 1])
        if restarts == "orbit":
            coords = orbit_coordinates(sys, x0, stop - start, start=start)
        else:
            coords = orbit_coordinates(sys, points[k], stop - start, start=0)
        terms = u.values[start - 1: stop - 1] * _evaluate(sys, coords)
        sums.append(abs(complex(math.fsum(terms.real), math.fsum(terms.imag))))

    total = math.fsum(sums)
    span = int(cuts[-1] - cuts[0])
    params = dict(sys.describe(), K=int(cuts.size), b_K=int(cuts[-1]), restarts=restarts, seed=seed,
                  threshold=schedule.threshold, value_over_b_K=total / int(cuts[-1]))
    return StatReport(stat="strong_momo", params=params, value=total / span)


def multiplier_test(
    u: ArithmeticSequence,
    v: ArithmeticSequence,
    sys: OrbitSystem,
    x0: Optional[Sequence[float]],
    Ns: Sequence[int],
) -> StatReport:
    """Orthogonality of u*v for a mean slowly varying multiplier v"""
    report = orthogonality_test(pointwise_product(u, v), sys, x0, Ns)
    params = dict(report.params, multiplier=v.label, multiplier_variation=mean_variation(v, min(len(u), len(v))))
    return StatReport(stat="multiplier", params=params, value=report.value, trend=report.trend)


def skew_genericity_check(alpha: float, L: int, R: int = 3) -> StatReport:
    """max over (r, s) in {-R..R}^2 minus 0 of |(1/N) sum e^{2 pi i (r x_n + s y_n)}| along the skew pieces"""
    x, y = skew_orbit_pieces(alpha, L)
    N = x.size
    worst, worst_at = 0.0, (0, 0)
    for r in range(-R, R + 1):
        for s in range(-R, R + 1):
            if r == 0 and s == 0:
                continue
            phases = unit_phase(x * fixed_multiplier(r) + y * fixed_multiplier(s))
            value = abs(complex(np.sum(phases.real), np.sum(phases.imag))) / N
            if value > worst:
                worst, worst_at = value, (r, s)
    logger.info(f"skew genericity: alpha={alpha}, L={L}, N={N}, worst {worst:.5f} at (r, s)={worst_at}")
    return StatReport(
        stat="skew_genericity",
        params={"alpha": alpha, "L": int(L), "N": int(N), "R": int(R), "worst_r": worst_at[0], "worst_s": worst_at[1]},
        value=worst,
    )


def turns(fixed: np.ndarray) -> np.ndarray:
    """Fixed-point or float coordinates as floats in [0, 1)"""
    if np.asarray(fixed).dtype == np.uint64:
        return fixed_to_turns(fixed)
    return np.asarray(fixed, dtype=np.float64)
