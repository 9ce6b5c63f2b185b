# utils/empirics_utils.py

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from utils.errors import InvalidArgumentError, OverflowAlphabetError, ResourceLimitError
from utils.sequence_utils import ArithmeticSequence, MODULUS_SLACK

logger = logging.getLogger(__name__)

DEFAULT_PHASE_BINS = 16
MAX_VALUE_SET = 256
MAX_BLOCK_LENGTH = 12
MAX_TABLE_CELLS = 10 ** 7
UNIMODULAR_SLACK = 1e-9


@dataclass(frozen=True)
class SymbolicSequence:
    symbols: np.ndarray
    alphabet_size: int
    symbol_values: np.ndarray
    quantization: str = "signs"

    def __post_init__(self):
        symbols = np.asarray(self.symbols, dtype=np.int64)
        if symbols.size and (symbols.min() < 0 or symbols.max() >= self.alphabet_size):
            raise InvalidArgumentError("symbols must lie in 0..M-1")
        if np.any(np.abs(self.symbol_values) > 1.0 + MODULUS_SLACK):
            raise InvalidArgumentError("symbol representatives must lie in the unit disc")
        object.__setattr__(self, "symbols", symbols)

    def __len__(self) -> int:
        return int(self.symbols.size)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.symbols, minlength=self.alphabet_size) / max(len(self), 1)


def _block_key(code: int, length: int, M: int) -> str:
    digits = []
    for _ in range(length):
        code, digit = divmod(code, M)
        digits.append(digit)
    digits.reverse()
    separator = "" if M <= 10 else "."
    return separator.join(str(d) for d in digits)


def _block_codes(symbols: np.ndarray, length: int, M: int) -> np.ndarray:
    """Base-M code of every window s[n..n+length-1], n = 0..N-length"""
    codes = symbols[: symbols.size - length + 1].copy()
    for offset in range(1, length):
        codes = codes * M + symbols[offset: symbols.size - length + 1 + offset]
    return codes


@dataclass
class CylinderTable:
    """Empirical cylinder frequencies; levels[l] is a Series indexed by block code"""

    k_max: int
    N: int
    alphabet_size: int
    levels: Dict[int, pd.Series] = field(default_factory=dict)

    def freq(self, block: Tuple[int, ...]) -> float:
        code = 0
        for symbol in block:
            code = code * self.alphabet_size + int(symbol)
        return float(self.levels[len(block)].get(code, 0.0))

    def level_array(self, length: int) -> np.ndarray:
        dense = np.zeros(self.alphabet_size ** length)
        series = self.levels[length]
        dense[series.index.to_numpy()] = series.to_numpy()
        return dense

    def to_dict(self) -> dict:
        freq = {}
        for length, series in self.levels.items():
            for code, value in series.items():
                freq[_block_key(int(code), length, self.alphabet_size)] = float(value)
        return {"k": self.k_max, "N": self.N, "freq": freq}


@dataclass
class CouplingTable:
    """Empirical pair frequencies freq(B, C) keyed by pair code code(B) * M^l + code(C)"""

    k_max: int
    N: int
    alphabet_size: int
    levels: Dict[int, pd.Series] = field(default_factory=dict)
    edge_loss: Dict[int, float] = field(default_factory=dict)
    marginals: Tuple[Optional[CylinderTable], Optional[CylinderTable]] = (None, None)

    def freq(self, first: Tuple[int, ...], second: Tuple[int, ...]) -> float:
        if len(first) != len(second):
            raise InvalidArgumentError("paired blocks must have equal length")
        M = self.alphabet_size
        code = 0
        for symbol in tuple(first) + tuple(second):
            code = code * M + int(symbol)
        return float(self.levels[len(first)].get(code, 0.0))

    def level_matrix(self, length: int) -> np.ndarray:
        size = self.alphabet_size ** length
        dense = np.zeros(size * size)
        series = self.levels[length]
        dense[series.index.to_numpy()] = series.to_numpy()
        return dense.reshape(size, size)

    def to_dict(self) -> dict:
        M = self.alphabet_size
        freq = {}
        for length, series in self.levels.items():
            for code, value in series.items():
                first, second = divmod(int(code), M ** length)
                key = f"{_block_key(first, length, M)}|{_block_key(second, length, M)}"
                freq[key] = float(value)
        return {"k": self.k_max, "N": self.N, "freq": freq, "edge_loss": {str(k): v for k, v in self.edge_loss.items()}}


def quantize(u: ArithmeticSequence, mode: str = "signs", bins: int = DEFAULT_PHASE_BINS) -> SymbolicSequence:
    """
    Map a sequence to a finite alphabet.

    Args:
        u: Input sequence
        mode: 'signs', 'phase_bins' or 'value_set'
        bins: Number of phase bins M for 'phase_bins'

    Returns:
        SymbolicSequence whose quantization field names the scheme used
    """
    values = u.values
    if mode == "signs":
        if np.any(np.abs(values.imag) > UNIMODULAR_SLACK) or np.any(np.abs(np.abs(values.real) - 1.0) > UNIMODULAR_SLACK):
            raise InvalidArgumentError("signs quantization needs a +-1 valued sequence")
        symbols = (values.real > 0).astype(np.int64)
        return SymbolicSequence(symbols, 2, np.array([-1.0 + 0j, 1.0 + 0j]), "signs")

    if mode == "phase_bins":
        M = int(bins)
        if M < 1:
            raise InvalidArgumentError(f"phase bin count must be positive, got {bins}")
        modulus = np.abs(values)
        zero = modulus == 0.0
        if np.any(~zero & (modulus < 1.0 - UNIMODULAR_SLACK)):
            raise InvalidArgumentError("phase_bins needs |u(n)| in {0} or [1-1e-9, 1]")
        theta = np.mod(np.angle(values) / (2.0 * np.pi), 1.0)
        symbols = np.minimum(np.floor(M * theta).astype(np.int64), M - 1)
        centres = np.exp(2j * np.pi * (np.arange(M) + 0.5) / M)
        if zero.any():
            symbols[zero] = M
            centres = np.r_[centres, 0.0]
        logger.warning(f"phase_bins({M}) quantization in use; cylinder statistics depend on this choice")
        return SymbolicSequence(symbols, centres.size, centres, f"phase_bins({M})")

    if mode == "value_set":
        rounded = np.round(values, 12)
        distinct, symbols = np.unique(rounded, return_inverse=True)
        if distinct.size > MAX_VALUE_SET:
            raise OverflowAlphabetError(f"{distinct.size} distinct values exceed the {MAX_VALUE_SET}-symbol limit")
        return SymbolicSequence(symbols.reshape(-1), int(distinct.size), distinct, "value_set")

    raise InvalidArgumentError(f"unknown quantization mode '{mode}'")


def _check_blowup(M: int, k_max: int):
    if k_max < 1:
        raise InvalidArgumentError(f"k_max must be positive, got {k_max}")
    if k_max > MAX_BLOCK_LENGTH or M ** k_max > MAX_TABLE_CELLS:
        raise ResourceLimitError(f"k_max={k_max} over a {M}-letter alphabet exceeds the table guard")


def cylinder_frequencies(s: SymbolicSequence, k_max: int) -> CylinderTable:
    """freq(B) = #{n <= N-|B| : s[n..n+|B|-1] = B} / (N-|B|+1) for every |B| <= k_max"""
    M = s.alphabet_size
    _check_blowup(M, k_max)
    N = len(s)
    table = CylinderTable(k_max=k_max, N=N, alphabet_size=M)
    for length in range(1, k_max + 1):
        if length > N:
            table.levels[length] = pd.Series(dtype=np.float64)
            continue
        codes, counts = np.unique(_block_codes(s.symbols, length, M), return_counts=True)
        table.levels[length] = pd.Series(counts / (N - length + 1), index=codes)
    return table


def check_permutation(phi: np.ndarray, N: int) -> np.ndarray:
    """Validate a 0-based permutation array of length N"""
    phi = np.asarray(phi, dtype=np.int64)
    if phi.shape != (N,):
        raise InvalidArgumentError(f"permutation has length {phi.size}, expected {N}")
    if N and (phi.min() < 0 or phi.max() >= N or np.any(np.bincount(phi, minlength=N) != 1)):
        raise InvalidArgumentError("phi is not a bijection of {1..N}")
    return phi


def coupling_from_pairs(s: SymbolicSequence, phi, k_max: int) -> CouplingTable:
    """
    freq(B, C) = #{n : s[n..] = B and s[phi(n)..] = C} / N. Pairs whose window runs past
    the end on either side are skipped and counted as edge loss.

    Args:
        s: Symbolic sequence
        phi: PermutationPlan or 0-based permutation array
        k_max: Maximal block length
    """
    M = s.alphabet_size
    _check_blowup(M, k_max)
    N = len(s)
    perm = check_permutation(getattr(phi, "phi", phi), N)
    table = CouplingTable(k_max=k_max, N=N, alphabet_size=M)
    first_margin = CylinderTable(k_max=k_max, N=N, alphabet_size=M)
    second_margin = CylinderTable(k_max=k_max, N=N, alphabet_size=M)

    for length in range(1, k_max + 1):
        last = N - length
        if last < 0:
            for target in (table, first_margin, second_margin):
                target.levels[length] = pd.Series(dtype=np.float64)
            table.edge_loss[length] = 1.0
            continue
        codes = _block_codes(s.symbols, length, M)
        valid = perm <= last
        valid[last + 1:] = False
        left = codes[np.flatnonzero(valid)]
        right = codes[perm[valid]]
        pair_codes, counts = np.unique(left * (M ** length) + right, return_counts=True)
        table.levels[length] = pd.Series(counts / N, index=pair_codes)
        table.edge_loss[length] = (N - int(valid.sum())) / N

        for margin, side in ((first_margin, left), (second_margin, right)):
            side_codes, side_counts = np.unique(side, return_counts=True)
            margin.levels[length] = pd.Series(side_counts / N, index=side_codes)

    table.marginals = (first_margin, second_margin)
    return table


def cylinder_labels(s: SymbolicSequence, length: int) -> Tuple[np.ndarray, int]:
    """
    Length-l cylinder code per index; the last l-1 indices get the extra edge label M^l.

    Returns:
        (labels, number of labels including the edge label)
    """
    M = s.alphabet_size
    _check_blowup(M, length)
    N = len(s)
    edge = M ** length
    labels = np.full(N, edge, dtype=np.int64)
    if length <= N:
        labels[: N - length + 1] = _block_codes(s.symbols, length, M)
    return labels, edge + 1
