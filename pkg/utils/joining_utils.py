# utils/joining_utils.py

import heapq
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.empirics_utils import (
    SymbolicSequence,
    check_permutation,
    coupling_from_pairs,
    cylinder_frequencies,
    cylinder_labels,
    quantize,
)
from utils.errors import InsufficientSampleError, InvalidArgumentError, InvalidTowerError
from utils.io_utils import write_json, write_permutation
from utils.reports import StageReport, StatReport
from utils.sequence_utils import GOLDEN, ArithmeticSequence, fixed_to_turns, to_fixed

logger = logging.getLogger(__name__)

OUTSIDE = -1
WILDCARD = -1
MARGIN_TOLERANCE = 1e-9
MAX_BLOCK_CODE = 2 ** 62
MAX_BASE_LENGTH = 40
PROJECTION_TREND_SHIFTS = 8
ROTATION_ANGLE = math.sqrt(2.0) - 1.0


# ---------------------------------------------------------------------------
# Static couplings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingSpec:
    """A self-coupling lam of the atom masses kappa, with the approximation tolerance epsilon"""

    kappa: np.ndarray
    lam: np.ndarray
    epsilon: float

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=np.float64).reshape(-1)
        lam = np.asarray(self.lam, dtype=np.float64)
        m = kappa.size
        if m < 1 or lam.shape != (m, m):
            raise InvalidArgumentError(f"lam must be an {m}x{m} matrix")
        if np.any(kappa <= 0):
            raise InvalidArgumentError("every atom needs positive mass")
        if abs(kappa.sum() - 1.0) > MARGIN_TOLERANCE:
            raise InvalidArgumentError(f"atom masses sum to {kappa.sum()!r}, not 1")
        if np.any(lam < 0):
            raise InvalidArgumentError("coupling entries must be nonnegative")
        if np.max(np.abs(lam.sum(axis=1) - kappa)) > MARGIN_TOLERANCE or np.max(np.abs(lam.sum(axis=0) - kappa)) > MARGIN_TOLERANCE:
            raise InvalidArgumentError("both marginals of lam must equal kappa")
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "lam", lam)

    @property
    def m(self) -> int:
        return int(self.kappa.size)


@dataclass(frozen=True)
class AllocationMatrix:
    V: np.ndarray
    N: int
    V_pair: np.ndarray
    report: Dict[str, object] = field(default_factory=dict)


def _n_large_violation(lam: Fraction, N: int, eps: Fraction) -> bool:
    return lam > 0 and N * eps * lam < 1


def coupling_allocate(spec: CouplingSpec, counts: Sequence[int], N: int) -> AllocationMatrix:
    """
    Integer allocation V_ij = min(floor(V_i lam_ij / kappa_i), floor(V_j lam_ij / kappa_j)).

    All arithmetic is exact (rationals of the float inputs). Cells whose N*lam_ij is an
    integer while both atoms are counted exactly (V = N*kappa) are exempt from the
    N_large requirement: the floors are then exact and the cell has no error.

    Raises:
        InsufficientSampleError: condition 'approximation' or 'N_large'
    """
    V = np.asarray(counts, dtype=np.int64).reshape(-1)
    N = int(N)
    if V.size != spec.m:
        raise InvalidArgumentError(f"{V.size} counts for {spec.m} atoms")
    if N < 1 or np.any(V < 0):
        raise InvalidArgumentError("counts and N must be nonnegative, N positive")

    eps = Fraction(spec.epsilon)
    kappa = [Fraction(float(k)) for k in spec.kappa]
    lam = [[Fraction(float(x)) for x in row] for row in spec.lam]
    counts_exact = [Fraction(int(v), N) == k for v, k in zip(V, kappa)]

    for i, (v, k) in enumerate(zip(V, kappa)):
        if abs(Fraction(int(v), N) - k) > eps * k:
            raise InsufficientSampleError(
                f"atom {i}: |V/N - kappa| = {float(abs(Fraction(int(v), N) - k)):.3g} exceeds eps*kappa = {float(eps * k):.3g}",
                condition="approximation",
            )
    for i in range(spec.m):
        for j in range(spec.m):
            exempt = (N * lam[i][j]).denominator == 1 and counts_exact[i] and counts_exact[j]
            if not exempt and _n_large_violation(lam[i][j], N, eps):
                needed = math.ceil(1 / (eps * lam[i][j]))
                raise InsufficientSampleError(f"cell ({i}, {j}) needs N >= {needed}, got N={N}", condition="N_large")

    V_pair = np.zeros((spec.m, spec.m), dtype=np.int64)
    slack = []
    for i in range(spec.m):
        for j in range(spec.m):
            if lam[i][j] == 0:
                continue
            first = math.floor(int(V[i]) * lam[i][j] / kappa[i])
            second = math.floor(int(V[j]) * lam[i][j] / kappa[j])
            V_pair[i, j] = min(first, second)
            slack.append(2 * eps * lam[i][j] - abs(Fraction(int(V_pair[i, j]), N) - lam[i][j]))

    report = {
        "c1": all(s >= 0 for s in slack),
        "c1_min_slack": float(min(slack)) if slack else 0.0,
        "c2": bool(np.all(V_pair.sum(axis=1) <= V)),
        "c3": bool(np.all(V_pair.sum(axis=0) <= V)),
    }
    if not (report["c1"] and report["c2"] and report["c3"]):
        logger.error(f"coupling_allocate: allocation conditions failed {report}")
    return AllocationMatrix(V=V, N=N, V_pair=V_pair, report=report)


@dataclass
class PermutationPlan:
    """A 0-based permutation of {0..N-1}; files and reports use 1-based values"""

    phi: np.ndarray
    defect_count: int = -1
    report: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.phi = check_permutation(self.phi, int(np.asarray(self.phi).size))
        counted = self.recount()
        if self.defect_count < 0:
            self.defect_count = counted
        elif self.defect_count != counted:
            raise InvalidArgumentError(f"defect count {self.defect_count} does not match phi ({counted})")

    @property
    def N(self) -> int:
        return int(self.phi.size)

    @property
    def defect_fraction(self) -> float:
        return self.defect_count / self.N

    def recount(self) -> int:
        """#{n < N : phi(n+1) != phi(n) + 1}"""
        return int(np.count_nonzero(np.diff(self.phi) != 1))

    def one_based(self) -> np.ndarray:
        return self.phi + 1

    def save(self, path) -> Path:
        return write_permutation(path, self.phi)


def _pair_increasing(phi: np.ndarray, used_range: np.ndarray):
    """Send the unassigned domain indices to the unused range indices in increasing order"""
    free_domain = np.flatnonzero(phi < 0)
    free_range = np.flatnonzero(~used_range)
    phi[free_domain] = free_range


def build_permutation(alloc: AllocationMatrix, atom_of: Sequence[int], lam: Optional[np.ndarray] = None,
                      epsilon: Optional[float] = None) -> PermutationPlan:
    """
    phi mapping the V_ij lowest unused indices of atom i onto the V_ij lowest unused
    indices of atom j, cells in row-major order, the rest paired in increasing order.

    When lam and epsilon are given the per-cell error is checked against 4*epsilon.
    """
    atoms = np.asarray(atom_of, dtype=np.int64).reshape(-1)
    m = alloc.V.size
    if atoms.size != alloc.N:
        raise InvalidArgumentError(f"{atoms.size} labels for N={alloc.N}")
    if atoms.size and (atoms.min() < 0 or atoms.max() >= m):
        raise InvalidArgumentError(f"atom labels must lie in 0..{m - 1}")
    if np.any(np.bincount(atoms, minlength=m) != alloc.V):
        raise InvalidArgumentError("per-atom index counts differ from V")

    pools = [np.flatnonzero(atoms == i) for i in range(m)]
    domain_next = np.zeros(m, dtype=np.int64)
    range_next = np.zeros(m, dtype=np.int64)
    phi = np.full(alloc.N, -1, dtype=np.int64)
    used_range = np.zeros(alloc.N, dtype=bool)

    for i in range(m):
        for j in range(m):
            size = int(alloc.V_pair[i, j])
            if size == 0:
                continue
            domain = pools[i][domain_next[i]: domain_next[i] + size]
            target = pools[j][range_next[j]: range_next[j] + size]
            phi[domain] = target
            used_range[target] = True
            domain_next[i] += size
            range_next[j] += size

    _pair_increasing(phi, used_range)
    plan = PermutationPlan(phi)

    if lam is not None:
        empirical = np.bincount(atoms * m + atoms[plan.phi], minlength=m * m).reshape(m, m) / alloc.N
        error = float(np.max(np.abs(empirical - np.asarray(lam))))
        plan.report["cell_error"] = error
        if epsilon is not None:
            plan.report["cell_bound"] = 4 * epsilon
            if error > 4 * epsilon + 1e-12:
                logger.error(f"build_permutation: cell error {error:.4g} exceeds 4*eps = {4 * epsilon:.4g}")
    return plan


def random_coupling_spec(m: int, epsilon: float, rng: np.random.Generator, factor: int = 1):
    """
    A random symmetric self-coupling with entries >= 0.01, exact counts by largest
    remainders, and N = factor * ceil(max 1/(eps*lam)).

    Returns:
        (CouplingSpec, counts, N)
    """
    if not 1 <= m <= 9:
        raise InvalidArgumentError("random couplings support 1 <= m <= 9")
    raw = rng.random((m, m))
    sym = raw + raw.T
    lam = 0.01 + (1.0 - 0.01 * m * m) * sym / sym.sum()
    kappa = lam.sum(axis=1)
    spec = CouplingSpec(kappa=kappa, lam=lam, epsilon=float(epsilon))
    eps = Fraction(float(epsilon))
    N = factor * max(math.ceil(1 / (eps * Fraction(float(x)))) for x in lam.reshape(-1))
    ideal = kappa * N
    counts = np.floor(ideal).astype(np.int64)
    remainder = N - int(counts.sum())
    order = np.argsort(-(ideal - counts), kind="stable")
    counts[order[:remainder]] += 1
    return spec, counts, int(N)


# ---------------------------------------------------------------------------
# Rokhlin towers
# ---------------------------------------------------------------------------

@dataclass
class TowerAssignment:
    """level[n] in 0..h-1 for indices inside complete columns, OUTSIDE (-1) elsewhere"""

    height: int
    level: np.ndarray
    outside_fraction: float
    epsilon: float
    flagged: bool = False
    return_fraction: float = 1.0
    base: str = ""

    def column_starts(self) -> np.ndarray:
        return np.flatnonzero(self.level == 0)

    def check(self):
        """Every non-top level is followed by the next level"""
        level = self.level
        inner = (level[:-1] >= 0) & (level[:-1] <= self.height - 2)
        if np.any(level[1:][inner] != level[:-1][inner] + 1):
            raise InvalidTowerError("tower levels do not ascend inside a column")


def _columns_to_levels(starts: np.ndarray, h: int, N: int) -> np.ndarray:
    level = np.full(N, OUTSIDE, dtype=np.int64)
    if starts.size:
        cells = starts[:, None] + np.arange(h)
        level[cells.reshape(-1)] = np.tile(np.arange(h), starts.size)
    return level


def _assignment(level: np.ndarray, h: int, eps: float, base: str, return_fraction: float = 1.0) -> TowerAssignment:
    outside = float(np.count_nonzero(level == OUTSIDE)) / max(level.size, 1)
    flagged = outside > eps or return_fraction < 1.0 - eps
    if flagged:
        logger.warning(f"tower {base} h={h}: outside fraction {outside:.4f}, return fraction {return_fraction:.4f} (eps={eps})")
    return TowerAssignment(height=h, level=level, outside_fraction=outside, epsilon=eps,
                           flagged=flagged, return_fraction=return_fraction, base=base)


class RotationTower:
    """Tower over the base [0, delta) of the rotation by alpha, levels [0, delta) + j*alpha"""

    def __init__(self, alpha: float, h: int, delta: float, x0: float = 0.0):
        if int(h) < 1 or not 0 < delta:
            raise InvalidArgumentError("rotation towers need h >= 1 and delta > 0")
        if delta * h >= 1:
            raise InvalidTowerError(f"delta*h = {delta * h:.4g} must stay below 1")
        for k in range(1, int(h)):
            distance = abs(k * alpha - round(k * alpha))
            if distance < delta:
                raise InvalidTowerError(f"levels 0 and {k} overlap: ||{k}*alpha|| = {distance:.4g} < delta")
        self.alpha = alpha
        self.h = int(h)
        self.delta = delta
        self.x0 = x0

    def assign(self, N: int, epsilon: float = 0.1) -> TowerAssignment:
        n = np.arange(1, int(N) + 1, dtype=np.uint64)
        x = fixed_to_turns(to_fixed(self.x0) + n * to_fixed(self.alpha))
        hits = np.flatnonzero(x < self.delta)
        starts = hits[hits + self.h <= N]
        level = _columns_to_levels(starts, self.h, int(N))
        return _assignment(level, self.h, epsilon, f"rotation[0,{self.delta})")


def _visits(symbols: np.ndarray, block: Tuple[int, ...]) -> np.ndarray:
    length = len(block)
    if length > symbols.size:
        return np.zeros(0, dtype=np.int64)
    hit = np.ones(symbols.size - length + 1, dtype=bool)
    for offset, symbol in enumerate(block):
        hit &= symbols[offset: symbols.size - length + 1 + offset] == symbol
    return np.flatnonzero(hit)


def _kakutani_starts(visits: np.ndarray, h: int, N: int) -> Tuple[np.ndarray, float]:
    """Column starts cutting each excursion between visits into floor(r/h) columns"""
    if visits.size == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    returns = np.diff(np.r_[visits, N])
    columns = returns // h
    total = int(columns.sum())
    offsets = np.arange(total) - np.repeat(np.cumsum(columns) - columns, columns)
    starts = np.repeat(visits, columns) + h * offsets
    return_fraction = float(np.mean(returns[:-1] >= h)) if visits.size > 1 else 0.0
    return starts, return_fraction


class FirstReturnTower:
    """Kakutani skyscraper over the cylinder of base_block, cut into columns of height h"""

    def __init__(self, base_block: Sequence[int], h: int):
        if int(h) < 1 or not len(base_block):
            raise InvalidArgumentError("first-return towers need h >= 1 and a nonempty base block")
        self.base_block = tuple(int(b) for b in base_block)
        self.h = int(h)

    def assign(self, s: SymbolicSequence, N: Optional[int] = None, epsilon: float = 0.1) -> TowerAssignment:
        symbols = s.symbols if N is None else s.symbols[: int(N)]
        visits = _visits(symbols, self.base_block)
        if visits.size == 0:
            raise InvalidTowerError(f"base block {self.base_block} never occurs")
        starts, return_fraction = _kakutani_starts(visits, self.h, symbols.size)
        level = _columns_to_levels(starts, self.h, symbols.size)
        label = "".join(str(b) for b in self.base_block) if s.alphabet_size <= 10 else ".".join(map(str, self.base_block))
        return _assignment(level, self.h, epsilon, f"[{label}]", return_fraction)


def _block_scores(symbols: np.ndarray, length: int, M: int, h: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Every distinct block of the given length with its visit count, return fraction and
    outside fraction, computed the way _kakutani_starts cuts its excursions.
    """
    N = symbols.size
    windows = np.lib.stride_tricks.sliding_window_view(symbols, length)
    codes = windows @ (M ** np.arange(length - 1, -1, -1, dtype=np.int64))
    order = np.argsort(codes, kind="stable")
    ordered = codes[order]
    first = np.r_[True, ordered[1:] != ordered[:-1]]
    last = np.r_[first[1:], True]
    group = np.cumsum(first) - 1
    returns = np.where(last, N - order, np.r_[order[1:], N] - order)

    groups = int(group[-1]) + 1
    columns = np.bincount(group, weights=returns // h, minlength=groups)
    inner = np.bincount(group, weights=(~last).astype(np.float64), minlength=groups)
    long_inner = np.bincount(group, weights=(~last & (returns >= h)).astype(np.float64), minlength=groups)
    return_fraction = np.divide(long_inner, inner, out=np.zeros(groups), where=inner > 0)
    outside = 1.0 - columns * h / N
    return ordered[first], np.bincount(group, minlength=groups), return_fraction, outside


def choose_tower_base(s: SymbolicSequence, h: int, epsilon: float, N: Optional[int] = None) -> Tuple[int, ...]:
    """
    Shortest block length first, scanning every distinct block of that length: among the
    blocks whose visits return after >= h steps for >= 1-eps of the visits and whose
    tower leaves at most eps of the indices outside, the one with the smallest outside
    fraction (then the most visits, then the smallest code).
    """
    symbols = s.symbols if N is None else s.symbols[: int(N)]
    M = max(s.alphabet_size, 1)
    length = 1
    while length <= MAX_BASE_LENGTH and M ** length < MAX_BLOCK_CODE and length <= symbols.size:
        codes, visits, return_fraction, outside = _block_scores(symbols, length, M, h)
        usable = np.flatnonzero((return_fraction >= 1.0 - epsilon) & (outside <= epsilon))
        if usable.size:
            best = usable[np.lexsort((codes[usable], -visits[usable], outside[usable]))[0]]
            block = tuple(int(d) for d in np.unravel_index(int(codes[best]), (M,) * length))
            logger.debug(f"tower base {block}: {visits[best]} visits, return {return_fraction[best]:.3f}, "
                         f"outside {outside[best]:.3f} ({codes.size} blocks of length {length})")
            return block
        length += 1
    raise InvalidTowerError(f"no block of length <= {length - 1} returns after {h} steps often enough (eps={epsilon})")


def build_tower(source, mode: str, N: int, h: int, delta: float = 0.0,
                base_block: Optional[Sequence[int]] = None, epsilon: float = 0.1, x0: float = 0.0) -> TowerAssignment:
    """
    Args:
        source: rotation angle (or an object with .alpha) for 'rotation', a
            SymbolicSequence for 'subshift'
        mode: 'rotation' or 'subshift'
    """
    if mode == "rotation":
        alpha = float(getattr(source, "alpha", source))
        return RotationTower(alpha, h, delta, x0).assign(N, epsilon)
    if mode == "subshift":
        if not isinstance(source, SymbolicSequence):
            raise InvalidArgumentError("subshift towers need a SymbolicSequence")
        block = base_block if base_block is not None else choose_tower_base(source, h, epsilon, N)
        return FirstReturnTower(block, h).assign(source, N, epsilon)
    raise InvalidArgumentError(f"unknown tower mode '{mode}'")


# ---------------------------------------------------------------------------
# Joining targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JoiningTarget:
    kind: str
    shift: int = 0
    components: Tuple[Tuple[float, "JoiningTarget"], ...] = ()

    KINDS = ("product", "diagonal", "shifted_diagonal", "mixture")

    @classmethod
    def parse(cls, text: str) -> "JoiningTarget":
        text = text.strip()
        kind, _, args = text.partition(":")
        if kind in ("product", "diagonal") and not args:
            return cls(kind)
        if kind == "shifted_diagonal":
            try:
                shift = int(args)
            except ValueError:
                raise InvalidArgumentError(f"shifted_diagonal needs an integer shift, got '{args}'")
            if shift < 1:
                raise InvalidArgumentError("the diagonal shift must be positive")
            return cls(kind, shift=shift)
        if kind == "mixture":
            components = []
            for part in args.split("+"):
                weight, star, inner = part.partition("*")
                if not star:
                    raise InvalidArgumentError(f"mixture component '{part}' needs the form w*kind")
                component = cls.parse(inner)
                if component.kind == "mixture":
                    raise InvalidArgumentError("mixtures cannot nest")
                try:
                    components.append((float(weight), component))
                except ValueError:
                    raise InvalidArgumentError(f"bad mixture weight '{weight}'")
            weights = [w for w, _ in components]
            if min(weights) <= 0 or abs(sum(weights) - 1.0) > MARGIN_TOLERANCE:
                raise InvalidArgumentError("mixture weights must be positive and sum to 1")
            return cls("mixture", components=tuple(components))
        raise InvalidArgumentError(f"unknown joining target '{text}'")

    def __str__(self) -> str:
        if self.kind == "shifted_diagonal":
            return f"shifted_diagonal:{self.shift}"
        if self.kind == "mixture":
            return "mixture:" + "+".join(f"{w:g}*{c}" for w, c in self.components)
        return self.kind


def target_cell_matrix(target: JoiningTarget, labels: np.ndarray, K: int) -> np.ndarray:
    """lam on label pairs in the /N convention, built from the labels' own frequencies"""
    N = labels.size
    p = np.bincount(labels, minlength=K) / N
    if target.kind == "product":
        return np.outer(p, p)
    if target.kind == "diagonal":
        return np.diag(p)
    if target.kind == "shifted_diagonal":
        return np.bincount(labels * K + np.roll(labels, -target.shift), minlength=K * K).reshape(K, K) / N
    return sum(w * target_cell_matrix(c, labels, K) for w, c in target.components)


def _length2_target(target: JoiningTarget, codes: np.ndarray, K: int, N: int) -> np.ndarray:
    """The same targets on length-2 cylinders, pairs counted over valid windows only"""
    if target.kind == "product":
        p = np.bincount(codes, minlength=K) / N
        return np.outer(p, p)
    if target.kind == "diagonal":
        return np.diag(np.bincount(codes, minlength=K) / N)
    if target.kind == "shifted_diagonal":
        m = target.shift
        pairs = codes[:-m] * K + codes[m:] if m < codes.size else np.zeros(0, dtype=np.int64)
        return np.bincount(pairs, minlength=K * K).reshape(K, K) / N
    return sum(w * _length2_target(c, codes, K, N) for w, c in target.components)


# ---------------------------------------------------------------------------
# Tower-compatible permutations
# ---------------------------------------------------------------------------

class _ColumnPool:
    """
    Free space on one side (domain or range) of a set of tower columns.

    A fresh column has h free levels. A column used by a nonnegative offset d keeps d
    free levels (a suffix on the domain side, a prefix on the range side); a column used
    by a negative offset is spent.
    """

    def __init__(self, columns: np.ndarray, words: np.ndarray, h: int, priority: Optional[np.ndarray] = None):
        self.h = h
        self.words = words
        self.free = {}
        self.priority = {}
        self.heaps: Dict[Tuple[int, int], list] = defaultdict(list)
        for rank, c in enumerate(columns):
            c = int(c)
            self.priority[c] = float(priority[rank]) if priority is not None else float(c)
            self.free[c] = h
            self._push(c, h)

    def _push(self, c: int, free: int):
        entry = (self.priority[c], c)
        heapq.heappush(self.heaps[(int(self.words[c]), free)], entry)
        heapq.heappush(self.heaps[(WILDCARD, free)], entry)

    def find(self, word: int, low: int, high: int) -> Optional[int]:
        """Lowest-priority column of the word with the smallest free length in [low, high]"""
        for free in range(low, high + 1):
            heap = self.heaps.get((word, free))
            while heap:
                _, c = heap[0]
                if self.free[c] == free:
                    return c
                heapq.heappop(heap)
        return None

    def claim(self, c: int, remaining: int):
        self.free[c] = remaining
        if remaining > 0:
            self._push(c, remaining)


def _column_words(labels: np.ndarray, starts: np.ndarray, h: int) -> np.ndarray:
    if starts.size == 0:
        return np.zeros(0, dtype=np.int64)
    rows = labels[starts[:, None] + np.arange(h)]
    _, inverse = np.unique(rows, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def _requests(target: JoiningTarget, group: np.ndarray, words: np.ndarray, starts: np.ndarray, h: int,
              eps: float) -> Tuple[List[Tuple[int, int, int, int]], str, bool]:
    """
    Segment requests (d, domain word, range word, count) for one column group.

    Returns:
        (requests, resolution, scramble range order)
    """
    counts = defaultdict(int)
    for c in group:
        counts[int(words[c])] += 1
    ordered = sorted(counts.items())

    if target.kind == "diagonal":
        return [(0, w, w, n) for w, n in ordered], "word", False

    if target.kind == "shifted_diagonal":
        m = target.shift
        if m >= h:
            raise InvalidArgumentError(f"shift {m} must stay below the tower height {h}")
        requests = [(m, w, w, n) for w, n in ordered]
        member = set(int(c) for c in group)
        adjacent = defaultdict(int)
        for c in group:
            c = int(c)
            if c + 1 in member and starts[c + 1] == starts[c] + h:
                adjacent[(int(words[c]), int(words[c + 1]))] += 1
        requests += [(m - h, w, w2, n) for (w, w2), n in sorted(adjacent.items())]
        return requests, "word", False

    if target.kind == "product":
        total = len(group)
        smallest = min(counts.values()) if counts else 0
        if total and smallest * smallest * eps >= total:
            requests = [(0, w, w2, (n * n2) // total) for w, n in ordered for w2, n2 in ordered]
            return [r for r in requests if r[3] > 0], "word", False
        return [(0, WILDCARD, WILDCARD, total)], "tower", True

    raise InvalidArgumentError(f"target '{target}' has no column plan")


def _place(requests, domain: _ColumnPool, target: _ColumnPool, h: int, segments: list) -> int:
    """Place segments, nonnegative offsets on fresh columns first; returns the unplaced count"""
    unplaced = 0
    positive = sorted((r for r in requests if r[0] >= 0), key=lambda r: r[0])
    negative = sorted((r for r in requests if r[0] < 0), key=lambda r: -r[0])
    for d, w, w2, count in positive:
        length = h - d
        for placed in range(count):
            a = domain.find(w, h, h)
            b = target.find(w2, h, h) if a is not None else None
            if a is None or b is None:
                unplaced += count - placed
                break
            domain.claim(a, d)
            target.claim(b, d)
            segments.append((a, 0, b, d, length))
    for d, w, w2, count in negative:
        length = h + d
        for placed in range(count):
            a = domain.find(w, length, h)
            b = target.find(w2, length, h) if a is not None else None
            if a is None or b is None:
                unplaced += count - placed
                break
            domain.claim(a, 0)
            target.claim(b, 0)
            segments.append((a, h - length, b, 0, length))
    return unplaced


def _check_sample(lam_q: np.ndarray, N: int, eps: float, skip: Optional[int]):
    """N_large on the label partition, with the same exemption as coupling_allocate"""
    scaled = lam_q * N
    positive = lam_q > 0
    if skip is not None:
        positive[skip, :] = False
        positive[:, skip] = False
    integral = np.abs(scaled - np.round(scaled)) < 1e-9
    failing = positive & ~integral & (N * eps * lam_q < 1.0)
    if np.any(failing):
        i, j = np.argwhere(failing)[0]
        needed = math.ceil(1.0 / (eps * lam_q[i, j]))
        raise InsufficientSampleError(f"label cell ({i}, {j}) needs N >= {needed}, got N={N}", condition="N_large")


def build_dynamic_permutation(labels: Sequence[int], tower: TowerAssignment, target: JoiningTarget,
                              epsilon: float, edge_label: Optional[int] = None) -> PermutationPlan:
    """
    Permutation built column by column over the tower: a segment maps domain level j of
    one column to level j+d of another and moves one level up with every step, so
    phi(n+1) = phi(n) + 1 wherever both sides stay below the top level.

    Args:
        labels: Partition label per index (compact, 0..K-1)
        tower: Tower assignment over the same indices
        target: Joining to approximate on the labels
        epsilon: Approximation tolerance
        edge_label: Label excluded from the sample-size check

    Returns:
        PermutationPlan whose report holds cell error, defect fraction, (TI) violations
        and their bounds
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N = labels.size
    h = tower.height
    if tower.level.size != N:
        raise InvalidTowerError(f"tower covers {tower.level.size} indices, labels {N}")
    tower.check()
    K = int(labels.max()) + 1 if N else 1
    lam_q = target_cell_matrix(target, labels, K)
    _check_sample(lam_q, N, epsilon, edge_label)

    starts = tower.column_starts()
    words = _column_words(labels, starts, h)
    columns = np.arange(starts.size)

    if target.kind == "mixture":
        weights = np.array([w for w, _ in target.components])
        bounds = np.floor(np.cumsum(weights) * starts.size).astype(np.int64)
        bounds[-1] = starts.size
        groups = np.split(columns, bounds[:-1])
        plans = list(zip(groups, (c for _, c in target.components)))
    else:
        plans = [(columns, target)]

    segments: list = []
    unplaced = 0
    resolutions = []
    for group, component in plans:
        requests, resolution, scramble = _requests(component, group, words, starts, h, epsilon)
        resolutions.append(resolution)
        priority = None
        if scramble:
            priority = fixed_to_turns((group.astype(np.uint64) + np.uint64(1)) * to_fixed(GOLDEN))
        domain = _ColumnPool(group, words, h)
        target_pool = _ColumnPool(group, words, h, priority)
        unplaced += _place(requests, domain, target_pool, h, segments)
    if unplaced:
        logger.warning(f"dynamic permutation: {unplaced} segment(s) found no free column")

    phi = np.full(N, -1, dtype=np.int64)
    segment_of = np.full(N, -1, dtype=np.int64)
    used_range = np.zeros(N, dtype=bool)
    if segments:
        table = np.array(segments, dtype=np.int64)
        lengths = table[:, 4]
        domain_start = starts[table[:, 0]] + table[:, 1]
        range_start = starts[table[:, 2]] + table[:, 3]
        offsets = np.arange(int(lengths.sum())) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        domain_index = np.repeat(domain_start, lengths) + offsets
        range_index = np.repeat(range_start, lengths) + offsets
        phi[domain_index] = range_index
        segment_of[domain_index] = np.repeat(np.arange(len(segments)), lengths)
        used_range[range_index] = True
    _pair_increasing(phi, used_range)
    plan = PermutationPlan(phi)

    level = tower.level
    image_level = level[phi]
    inner = (segment_of[:-1] >= 0) & (level[:-1] >= 0) & (level[:-1] < h - 1) & (image_level[:-1] >= 0) & (image_level[:-1] < h - 1)
    ti_violations = int(np.count_nonzero(inner & (phi[1:] != phi[:-1] + 1)))

    empirical = np.bincount(labels * K + labels[phi], minlength=K * K).reshape(K, K) / N
    cell_error = float(np.max(np.abs(empirical - lam_q)))
    defect_bound = 4 * epsilon + 2.0 / h + 2.0 / N
    plan.report.update(
        cell_error=cell_error,
        cell_bound=8 * epsilon,
        defect_fraction=plan.defect_fraction,
        defect_bound=defect_bound,
        ti_violations=ti_violations,
        unplaced_segments=unplaced,
        resolution="word" if all(r == "word" for r in resolutions) else "tower",
        bounds_hold=bool(cell_error <= 8 * epsilon and plan.defect_fraction <= defect_bound and ti_violations == 0),
    )
    return plan


# ---------------------------------------------------------------------------
# Self-joining pipeline
# ---------------------------------------------------------------------------

def _with_rotation(s: SymbolicSequence, bins: int) -> SymbolicSequence:
    """Product with the rotation by sqrt(2)-1, binned into `bins` arcs"""
    n = np.arange(1, len(s) + 1, dtype=np.uint64)
    arcs = np.minimum((fixed_to_turns(n * to_fixed(ROTATION_ANGLE)) * bins).astype(np.int64), bins - 1)
    return SymbolicSequence(s.symbols * bins + arcs, s.alphabet_size * bins,
                            np.repeat(s.symbol_values, bins), f"{s.quantization}+rotation({bins})")


def _run_stage(stage: int, s: SymbolicSequence, N: int, target: JoiningTarget, with_rotation: bool,
               rotation_bins: int, out_dir: Optional[Path]) -> Tuple[PermutationPlan, StageReport]:
    eps = 2.0 ** -stage
    h = 2 ** (stage + 1)
    prefix = SymbolicSequence(s.symbols[:N], s.alphabet_size, s.symbol_values, s.quantization)

    raw_labels, label_count = cylinder_labels(prefix, stage)
    distinct, labels = np.unique(raw_labels, return_inverse=True)
    labels = labels.reshape(-1)
    edge_hits = np.flatnonzero(distinct == label_count - 1)
    edge_label = int(edge_hits[0]) if edge_hits.size else None

    tower_source = _with_rotation(prefix, rotation_bins) if with_rotation else prefix
    try:
        base = choose_tower_base(tower_source, h, eps)
    except InvalidTowerError as e:
        if with_rotation:
            raise
        logger.warning(f"stage {stage}: {e}; retrying on the product with the rotation by sqrt(2)-1")
        tower_source = _with_rotation(prefix, rotation_bins)
        base = choose_tower_base(tower_source, h, eps)
    tower = FirstReturnTower(base, h).assign(tower_source, epsilon=eps)
    plan = build_dynamic_permutation(labels, tower, target, eps, edge_label)

    pairs = coupling_from_pairs(prefix, plan, 2)
    codes = np.lib.stride_tricks.sliding_window_view(prefix.symbols, 2) @ np.array([prefix.alphabet_size, 1])
    expected = _length2_target(target, codes, prefix.alphabet_size ** 2, N)
    length2_error = float(np.max(np.abs(pairs.level_matrix(2) - expected)))

    path = None
    if out_dir is not None:
        path = str(plan.save(out_dir / f"stage_{stage}.fsperm"))
    report = StageReport(
        stage=stage,
        N=N,
        epsilon=eps,
        height=h,
        target=str(target),
        resolution=plan.report["resolution"],
        outside_fraction=tower.outside_fraction,
        tower_base=f"{tower_source.quantization} {tower.base}",
        cell_error=plan.report["cell_error"],
        cell_bound=plan.report["cell_bound"],
        length2_error=length2_error,
        defect_fraction=plan.defect_fraction,
        defect_bound=plan.report["defect_bound"],
        ti_violations=plan.report["ti_violations"],
        unplaced_segments=plan.report["unplaced_segments"],
        bounds_hold=plan.report["bounds_hold"],
        permutation_path=path,
    )
    if not report.bounds_hold:
        logger.warning(f"stage {stage}: bounds fail (cell {report.cell_error:.4f}, defect {report.defect_fraction:.4f})")
    logger.info(f"stage {stage}: N={N}, h={h}, eps={eps}, length-2 error {length2_error:.5f}, defects {report.defect_fraction:.4f}")
    return plan, report


def self_joining_pipeline(
    u: Union[ArithmeticSequence, SymbolicSequence],
    Ns: Sequence[int],
    target: Union[str, JoiningTarget],
    quantization: str = "signs",
    bins: int = 16,
    averaging: str = "cesaro",
    with_rotation: bool = False,
    rotation_bins: int = 8,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> List[Tuple[PermutationPlan, StageReport]]:
    """
    Stage l = 1..len(Ns) works on the prefix of length Ns[l-1] with eps = 2^-l, tower
    height 2^(l+1) and the length-l cylinder partition, and reports the length-2
    cylinder error of the realised coupling against the target.

    Raises:
        InsufficientSampleError / InvalidTowerError carrying the failing stage index
    """
    if averaging != "cesaro":
        raise InvalidArgumentError("self-joinings are only built for Cesaro averages")
    if isinstance(target, str):
        target = JoiningTarget.parse(target)
    s = u if isinstance(u, SymbolicSequence) else quantize(u, quantization, bins)
    Ns = [int(N) for N in Ns]
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise InvalidArgumentError("Ns must be a nonempty increasing list")
    if Ns[0] < 2 or Ns[-1] > len(s):
        raise InvalidArgumentError(f"Ns must lie in 2..{len(s)}")
    out_dir = Path(out_dir) if out_dir is not None else None

    def stage(item: Tuple[int, int]):
        index, N = item
        try:
            return _run_stage(index, s, N, target, with_rotation, rotation_bins, out_dir)
        except (InsufficientSampleError, InvalidTowerError) as e:
            e.stage = index
            raise

    items = list(enumerate(Ns, start=1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(stage, items))
    else:
        results = [stage(item) for item in items]

    if out_dir is not None:
        write_json(out_dir / "report.json", {"target": str(target), "stages": [r.model_dump() for _, r in results]})
    return results


def product_projection_check(s: SymbolicSequence, phi, M: int, k_max: int = 1) -> StatReport:
    """
    |(1/M) sum_{m <= M} freq_m(B, C) - kappa(B) kappa(C)| maximised over blocks up to
    k_max, freq_m pairing index n with phi(n) - m; the averaged table is normalised by
    the number of (n, m) pairs used. The trend holds the per-shift deviation for the
    first shifts.
    """
    M = int(M)
    if M < 1:
        raise InvalidArgumentError(f"M must be positive, got {M}")
    N = len(s)
    perm = check_permutation(getattr(phi, "phi", phi), N)
    kappa = cylinder_frequencies(s, k_max)
    A = s.alphabet_size
    worst = 0.0
    per_shift = np.zeros(min(M, PROJECTION_TREND_SHIFTS))

    for length in range(1, k_max + 1):
        last = N - length
        if last < 0:
            continue
        K = A ** length
        windows = np.lib.stride_tricks.sliding_window_view(s.symbols, length)
        codes = windows @ (A ** np.arange(length - 1, -1, -1, dtype=np.int64))
        product = np.outer(kappa.level_array(length), kappa.level_array(length))

        n = np.arange(last + 1)
        image = perm[n]
        low = np.clip(image - M, 0, last + 1)
        high = np.clip(image, 0, last + 1)
        weights = (high - low).astype(np.float64)
        total = weights.sum()
        if total == 0:
            continue
        averaged = np.zeros((K, K))
        for c in range(K):
            prefix = np.concatenate(([0], np.cumsum(codes == c)))
            hits = (prefix[high] - prefix[low]).astype(np.float64)
            averaged[:, c] = np.bincount(codes[n], weights=hits, minlength=K)
        worst = max(worst, float(np.max(np.abs(averaged / total - product))))

        for m in range(1, per_shift.size + 1):
            shifted = image - m
            valid = (shifted >= 0) & (shifted <= last)
            if not valid.any():
                continue
            freq = np.bincount(codes[n[valid]] * K + codes[shifted[valid]], minlength=K * K).reshape(K, K) / valid.sum()
            per_shift[m - 1] = max(per_shift[m - 1], float(np.max(np.abs(freq - product))))

    return StatReport(
        stat="product_projection",
        params={"M": M, "k_max": int(k_max), "N": N},
        value=worst,
        trend=[(float(m), float(v)) for m, v in enumerate(per_shift, start=1)],
    )
