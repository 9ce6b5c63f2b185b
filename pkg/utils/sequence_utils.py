# utils/sequence_utils.py

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MODULUS_SLACK = 1e-12
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
SIEVE_SEGMENT = 1 << 22
MSV_DISTANCE_LIMIT = 0.1
MSV_DENSITY_LIMIT = 0.25
DEFAULT_SCALES = 12

_TURN = 2.0 ** 64
_MASK = (1 << 64) - 1


# Fixed-point phases: a real number mod 1 is stored as round(x * 2^64) in a uint64,
# so additions and integer multiples reduce mod 1 exactly.

def to_fixed(x: float) -> np.uint64:
    frac = x - math.floor(x)
    return np.uint64(int(frac * _TURN) & _MASK)


def fixed_multiplier(k: int) -> np.uint64:
    """Integer k (possibly negative) as a uint64 factor acting mod 2^64"""
    return np.uint64(int(k) & _MASK)


def fixed_to_turns(fixed: np.ndarray) -> np.ndarray:
    """Fixed-point phases back to floats in [0, 1)"""
    return (np.asarray(fixed, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def unit_phase(fixed: np.ndarray) -> np.ndarray:
    return np.exp(2j * np.pi * fixed_to_turns(fixed))


@dataclass(frozen=True)
class ArithmeticSequence:
    """A finite prefix u(1..N) of a bounded complex sequence"""

    values: np.ndarray
    label: str = ""
    params: Dict[str, Any] = field(default_factory=dict)
    start_index: int = 1

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128).reshape(-1)
        if values.size < 1:
            raise InvalidArgumentError("a sequence needs at least one value")
        if self.start_index != 1:
            raise InvalidArgumentError("sequences are indexed from 1")
        finite = np.isfinite(values)
        if not finite.all():
            first = int(np.flatnonzero(~finite)[0]) + 1
            raise InvalidArgumentError(f"sequence value at n={first} is not finite")
        peak = float(np.max(np.abs(values)))
        if peak > 1.0 + MODULUS_SLACK:
            raise InvalidArgumentError(f"sequence leaves the unit disc (max modulus {peak!r})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def N(self) -> int:
        return len(self)

    def prefix(self, N: int) -> "ArithmeticSequence":
        if N < 1 or N > len(self):
            raise InvalidArgumentError(f"prefix length {N} outside 1..{len(self)}")
        if N == len(self):
            return self
        return ArithmeticSequence(self.values[:N], self.label, dict(self.params, N=N))

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(str(len(self)).encode())
        digest.update(self.values.astype("<c16").tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class BlockStructure:
    """Blocks [b_k, b_{k+1}) on which the flattened sequence stays within eps_k of z_k"""

    boundaries: np.ndarray  # 1-based block starts
    block_values: np.ndarray
    tolerances: np.ndarray  # nonincreasing
    gap_floor: np.ndarray  # suffix minima of the gaps, nondecreasing
    threshold: int  # gaps are nondecreasing from this gap index on
    distance: float
    jump_density: float
    not_slowly_varying: bool

    @property
    def block_count(self) -> int:
        return int(self.boundaries.size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "blocks": self.block_count,
            "threshold": self.threshold,
            "distance": self.distance,
            "jump_density": self.jump_density,
            "not_slowly_varying": self.not_slowly_varying,
            "max_tolerance": float(self.tolerances[0]) if self.tolerances.size else 0.0,
        }


def _check_length(N: int):
    if int(N) < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N}")


def _small_primes(limit: int) -> np.ndarray:
    if limit < 2:
        return np.zeros(0, dtype=np.int64)
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, math.isqrt(limit) + 1):
        if sieve[p]:
            sieve[p * p::p] = False
    return np.flatnonzero(sieve)


def _omega_parity_segment(lo: int, hi: int, primes: np.ndarray) -> np.ndarray:
    """Parity of Omega(n) for lo <= n < hi; True where Omega(n) is odd"""
    rest = np.arange(lo, hi, dtype=np.int64)
    parity = np.zeros(hi - lo, dtype=bool)
    for p in primes:
        p = int(p)
        power = p
        while power < hi:
            first = -(-lo // power) * power
            if first >= hi:
                break
            window = slice(first - lo, hi - lo, power)
            parity[window] ^= True
            rest[window] //= p
            power *= p
    # whatever is left above 1 is a single prime beyond sqrt(hi)
    parity ^= rest > 1
    return parity


def gen_liouville(N: int, workers: int = 1) -> ArithmeticSequence:
    """
    Liouville function (-1)^Omega(n) for n = 1..N.

    Segmented sieve over primes up to sqrt(N); segments may be processed in
    parallel and are concatenated in index order.
    """
    _check_length(N)
    N = int(N)
    primes = _small_primes(math.isqrt(N))
    bounds = [(lo, min(lo + SIEVE_SEGMENT, N + 1)) for lo in range(1, N + 1, SIEVE_SEGMENT)]

    def run(bound: Tuple[int, int]) -> np.ndarray:
        return _omega_parity_segment(bound[0], bound[1], primes)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, bounds))
    else:
        parts = [run(bound) for bound in bounds]

    odd = np.concatenate(parts)
    logger.info(f"Liouville sieve: N={N}, {len(bounds)} segment(s), {primes.size} small primes")
    return ArithmeticSequence(np.where(odd, -1.0, 1.0), "liouville", {"N": N})


def skew_orbit_pieces(alpha: float, L: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orbit pieces of T(x, y) = (x, x + y) started at (k*alpha, 0), k = 1..L, each of
    length k^2, as fixed-point coordinates (x_n, y_n) = (k*alpha, j*k*alpha).
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    if int(L) < 1:
        raise InvalidArgumentError(f"L must be a positive integer, got {L}")
    k = np.arange(1, int(L) + 1, dtype=np.int64)
    sizes = k * k
    block = np.repeat(k, sizes)
    starts = np.repeat(np.cumsum(sizes) - sizes, sizes)
    j = np.arange(block.size, dtype=np.int64) - starts
    step = to_fixed(alpha)
    x = block.astype(np.uint64) * step
    y = (j * block).astype(np.uint64) * step
    return x, y


def gen_skew_sequence(alpha: float = GOLDEN, L: int = 150) -> ArithmeticSequence:
    """Concatenation over k = 1..L of the blocks (e^{2 pi i j k alpha})_{j < k^2}"""
    _, y = skew_orbit_pieces(alpha, L)
    return ArithmeticSequence(unit_phase(y), "skew", {"alpha": alpha, "L": int(L)})


def gen_archimedean(t: float, N: int) -> ArithmeticSequence:
    _check_length(N)
    n = np.arange(1, int(N) + 1, dtype=np.float64)
    return ArithmeticSequence(np.exp(1j * t * np.log(n)), "archimedean", {"t": t, "N": int(N)})


def gen_power_decay(r: float, N: int) -> ArithmeticSequence:
    if r <= 0:
        raise InvalidArgumentError(f"decay exponent must be positive, got {r}")
    _check_length(N)
    n = np.arange(1, int(N) + 1, dtype=np.float64)
    return ArithmeticSequence(n ** (-float(r)), "power_decay", {"r": r, "N": int(N)})


def gen_iid_signs(N: int, seed: int = 0) -> ArithmeticSequence:
    _check_length(N)
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=int(N)) * 2 - 1
    return ArithmeticSequence(signs.astype(np.float64), "iid_signs", {"N": int(N), "seed": seed})


def gen_root_of_unity(q: int, N: int, a: int = 1) -> ArithmeticSequence:
    """u(n) = e^{2 pi i a n / q}; q = 2, a = 1 gives (-1)^n"""
    if int(q) < 1:
        raise InvalidArgumentError(f"q must be a positive integer, got {q}")
    _check_length(N)
    n = np.arange(1, int(N) + 1, dtype=np.int64)
    residues = (int(a) * n) % int(q)
    if int(q) == 2:
        values = np.where(residues == 0, 1.0, -1.0)
    else:
        values = np.exp(2j * np.pi * residues / int(q))
    return ArithmeticSequence(values, "root_of_unity", {"q": int(q), "a": int(a), "N": int(N)})


def gen_constant(c: complex, N: int) -> ArithmeticSequence:
    _check_length(N)
    return ArithmeticSequence(np.full(int(N), complex(c)), "constant", {"c": str(c), "N": int(N)})


def pointwise_product(u: ArithmeticSequence, v: ArithmeticSequence) -> ArithmeticSequence:
    n = min(len(u), len(v))
    return ArithmeticSequence(u.values[:n] * v.values[:n], f"{u.label}*{v.label}", {"N": n})


def besicovitch_mean(u: ArithmeticSequence, N: Optional[int] = None) -> float:
    N = len(u) if N is None else int(N)
    if N < 1 or N > len(u):
        raise InvalidArgumentError(f"N={N} outside 1..{len(u)}")
    return math.fsum(np.abs(u.values[:N])) / N


def mean_variation(u: ArithmeticSequence, N: Optional[int] = None) -> float:
    """(1/N) sum |u(n+1) - u(n)|; small for mean slowly varying sequences"""
    N = len(u) if N is None else int(N)
    if N < 1 or N > len(u):
        raise InvalidArgumentError(f"N={N} outside 1..{len(u)}")
    return math.fsum(np.abs(np.diff(u.values[:N]))) / N


def default_delta_schedule(scales: int = DEFAULT_SCALES) -> List[float]:
    return [4.0 ** -j for j in range(1, scales + 1)]


def _effective_scales(jumps: np.ndarray, deltas: np.ndarray, N: int) -> np.ndarray:
    """
    j(n) = max{j : M_j <= n} (1 when no scale is active), where M_j is the first
    index from which the running density of delta_j-jumps stays below 2^-j.
    """
    scale = np.ones(N, dtype=np.int64)
    if jumps.size == 0:
        return scale
    seen = np.arange(1, jumps.size + 1, dtype=np.float64)
    onset_prev = 1
    for j in range(1, deltas.size + 1):
        density = np.cumsum(jumps >= deltas[j - 1]) / seen
        tail = np.maximum.accumulate(density[::-1])[::-1]
        settled = np.flatnonzero(tail < 2.0 ** -j)
        if settled.size == 0:
            break
        onset = max(int(settled[0]) + 1, onset_prev)
        scale[onset - 1:] = j
        onset_prev = onset
    return scale


def msv_blockify(
    v: ArithmeticSequence, delta_schedule: Optional[Sequence[float]] = None
) -> Tuple[ArithmeticSequence, BlockStructure]:
    """
    Replace a mean slowly varying v by a blockwise almost constant v~.

    Large jumps are marked at the effective scale j(n); consecutive markers closer
    than j(n) are merged and v~ is frozen on the merged runs. Blocks start after
    every remaining large jump of v~ and are otherwise cut greedily into gaps of
    j..2j-1, except on stretches where v~ is exactly constant.

    Returns:
        (v~, BlockStructure) with |v~(n) - z_k| < eps_k on [b_k, b_{k+1}) and the
        Besicovitch distance (1/N) sum |v - v~| recorded.
    """
    deltas = np.asarray(default_delta_schedule() if delta_schedule is None else delta_schedule, dtype=np.float64)
    if deltas.size == 0 or np.any(deltas <= 0) or np.any(np.diff(deltas) >= 0):
        raise InvalidArgumentError("delta schedule must be positive and strictly decreasing")

    u = v.values
    N = len(v)
    jumps = np.abs(np.diff(u))
    scale = _effective_scales(jumps, deltas, N)
    thresholds = deltas[scale[:-1] - 1]

    flat = u.copy()
    markers = np.flatnonzero(jumps >= thresholds) + 1
    if markers.size > 1:
        close = np.diff(markers) <= scale[markers[:-1] - 1]
        cover = np.zeros(N + 2, dtype=np.int64)
        np.add.at(cover, markers[:-1][close], 1)
        np.add.at(cover, markers[1:][close], -1)
        merged = np.cumsum(cover)[1:N + 1] > 0
        if merged.any():
            index = np.arange(N)
            run_start = merged & ~np.r_[False, merged[:-1]]
            anchor = np.maximum.accumulate(np.where(run_start, index, 0))
            flat[merged] = u[anchor[merged]]

    flat_jumps = np.abs(np.diff(flat))
    forced = np.unique(np.r_[1, np.flatnonzero(flat_jumps >= thresholds) + 2])
    forced = forced[forced <= N]
    ends = np.r_[forced[1:], N + 1]

    boundaries: List[int] = []
    for start, end in zip(forced.tolist(), ends.tolist()):
        boundaries.append(start)
        segment = flat[start - 1:end - 1]
        if np.all(segment == segment[0]):
            continue
        j = int(scale[start - 1])
        cursor = start
        while end - cursor >= 2 * j:
            cursor += j
            boundaries.append(cursor)

    b = np.asarray(boundaries, dtype=np.int64)
    z = flat[b - 1]
    lengths = np.diff(np.r_[b, N + 1])
    deviation = np.maximum.reduceat(np.abs(flat - np.repeat(z, lengths)), b - 1)
    tolerances = np.maximum.accumulate(deviation[::-1])[::-1] + 1e-12

    gaps = np.diff(b)
    gap_floor = np.minimum.accumulate(gaps[::-1])[::-1] if gaps.size else gaps
    drops = np.flatnonzero(gaps[:-1] > gaps[1:]) if gaps.size > 1 else np.zeros(0, dtype=np.int64)
    threshold = int(drops[-1]) + 1 if drops.size else 0

    distance = math.fsum(np.abs(u - flat)) / N
    density = float(np.count_nonzero(jumps >= deltas[0])) / max(jumps.size, 1)
    suspect = distance > MSV_DISTANCE_LIMIT or density > MSV_DENSITY_LIMIT
    if suspect:
        logger.warning(
            f"msv_blockify: {v.label or 'sequence'} does not look mean slowly varying "
            f"(distance={distance:.4f}, jump density={density:.4f})"
        )

    structure = BlockStructure(
        boundaries=b,
        block_values=z,
        tolerances=tolerances,
        gap_floor=gap_floor,
        threshold=threshold,
        distance=distance,
        jump_density=density,
        not_slowly_varying=suspect,
    )
    flattened = ArithmeticSequence(flat, f"msv({v.label})", dict(v.params, blocks=int(b.size)))
    return flattened, structure
