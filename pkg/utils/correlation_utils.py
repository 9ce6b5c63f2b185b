# utils/correlation_utils.py

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import fft as sp_fft

from utils.empirics_utils import check_permutation
from utils.errors import InvalidArgumentError
from utils.reports import StatReport
from utils.sequence_utils import ArithmeticSequence

logger = logging.getLogger(__name__)

AVERAGING_MODES = ("cesaro", "logarithmic")
DEFAULT_TREND_H = (10, 100, 1000)


@dataclass(frozen=True)
class AutocorrTable:
    """gamma[h] = (1/N') sum_{n <= N'} u(n+h) conj(u(n)), h = 0..H_max, N' = N - H_max"""

    H_max: int
    gamma: np.ndarray
    N: int
    N_prime: int
    averaging: str = "cesaro"
    sequence_hash: str = ""

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "h": np.arange(self.H_max + 1),
            "re": self.gamma.real,
            "im": self.gamma.imag,
        })

    def truncated(self, H: int) -> np.ndarray:
        if H > self.H_max:
            raise InvalidArgumentError(f"table depth {self.H_max} is below the requested H={H}")
        return self.gamma[: H + 1]


def _resolve_length(u: ArithmeticSequence, N: Optional[int]) -> int:
    N = len(u) if N is None else int(N)
    if N < 1 or N > len(u):
        raise InvalidArgumentError(f"N={N} outside 1..{len(u)}")
    return N


def _log_weights(count: int) -> Tuple[np.ndarray, float]:
    weights = 1.0 / np.arange(1, count + 1, dtype=np.float64)
    return weights, math.fsum(weights)


def autocorrelation(
    u: ArithmeticSequence,
    H: int,
    averaging: str = "cesaro",
    N: Optional[int] = None,
    method: str = "fft",
    workers: int = 1,
) -> AutocorrTable:
    """
    Empirical autocorrelations of u up to lag H.

    Args:
        u: Input sequence
        H: Maximal lag, H < N/2
        averaging: 'cesaro' (weights 1/N') or 'logarithmic' (weights 1/n over the
            harmonic sum of 1..N')
        N: Prefix length, defaults to len(u)
        method: 'fft' (zero padded cross-correlation) or 'direct' (math.fsum per lag)
        workers: Threads handed to scipy.fft

    Returns:
        AutocorrTable
    """
    N = _resolve_length(u, N)
    H = int(H)
    if averaging not in AVERAGING_MODES:
        raise InvalidArgumentError(f"unknown averaging '{averaging}'")
    if H < 1 or 2 * H >= N:
        raise InvalidArgumentError(f"need 1 <= H < N/2, got H={H}, N={N}")

    values = u.values[:N]
    N_prime = N - H
    head = values[:N_prime]
    if averaging == "logarithmic":
        weights, norm = _log_weights(N_prime)
        head = head * weights
    else:
        norm = float(N_prime)

    if method == "fft":
        size = sp_fft.next_fast_len(N + N_prime, real=False)
        spectrum = sp_fft.fft(values, size, workers=workers) * np.conj(sp_fft.fft(head, size, workers=workers))
        gamma = sp_fft.ifft(spectrum, workers=workers)[: H + 1] / norm
    elif method == "direct":
        conj_head = np.conj(head)
        gamma = np.empty(H + 1, dtype=np.complex128)
        for h in range(H + 1):
            terms = values[h: h + N_prime] * conj_head
            gamma[h] = complex(math.fsum(terms.real), math.fsum(terms.imag)) / norm
    else:
        raise InvalidArgumentError(f"unknown method '{method}'")

    gamma = np.ascontiguousarray(gamma, dtype=np.complex128)
    gamma[0] = complex(min(max(gamma[0].real, 0.0), 1.0), 0.0)
    logger.debug(f"autocorrelation: N={N}, H={H}, averaging={averaging}, method={method}")
    return AutocorrTable(H_max=H, gamma=gamma, N=N, N_prime=N_prime, averaging=averaging,
                         sequence_hash=u.content_hash())


def trend_depth(H: int, N: int, trend: Iterable[int] = DEFAULT_TREND_H) -> int:
    """Deepest lag needed to serve H and every trend value that fits below N/2"""
    usable = [h for h in trend if 2 * h < N]
    return max([int(H)] + usable)


def short_interval_stat(u: ArithmeticSequence, H: int, N: Optional[int] = None) -> StatReport:
    """(1/N') sum_{n <= N'} |(1/H) sum_{h=1..H} u(n+h)|^2 with N' = N - H"""
    N = _resolve_length(u, N)
    H = int(H)
    if H < 1 or H >= N:
        raise InvalidArgumentError(f"need 1 <= H < N, got H={H}, N={N}")
    if H * H > N:
        logger.warning(f"short_interval_stat: H={H} exceeds sqrt(N)={math.sqrt(N):.1f}")
    N_prime = N - H
    partial = np.concatenate(([0.0 + 0.0j], np.cumsum(u.values[:N])))
    # window for 1-based n covers u(n+1..n+H), i.e. 0-based slots n..n+H-1
    starts = np.arange(1, N_prime + 1)
    windows = (partial[starts + H] - partial[starts]) / H
    value = math.fsum(np.abs(windows) ** 2) / N_prime
    return StatReport(stat="short_interval", params={"H": H, "N": N}, value=value)


def u1_norm_estimate(
    u: ArithmeticSequence, H: int, N: Optional[int] = None, acf: Optional[AutocorrTable] = None
) -> StatReport:
    """max(0, Re (1/H) sum_{h=1..H} gamma[h]), the squared u^1-norm estimate"""
    if acf is None:
        acf = autocorrelation(u, H, N=N)
    gamma = acf.truncated(int(H))[1:]
    value = math.fsum(gamma.real) / int(H)
    return StatReport(
        stat="u1_norm",
        params={"H": int(H), "N": acf.N, "averaging": acf.averaging},
        value=max(0.0, value),
    )


def averaged_chowla_stat(
    u: ArithmeticSequence,
    H: int,
    N: Optional[int] = None,
    acf: Optional[AutocorrTable] = None,
    trend: Sequence[int] = DEFAULT_TREND_H,
) -> StatReport:
    """(1/H) sum_{h=1..H} |gamma[h]| with a trend over H taken from one table"""
    N = _resolve_length(u, N)
    if acf is None:
        acf = autocorrelation(u, trend_depth(H, N, trend), N=N)
    acf.truncated(int(H))
    modulus = np.abs(acf.gamma)

    def level(depth: int) -> float:
        return math.fsum(modulus[1: depth + 1]) / depth

    points = [(float(h), level(h)) for h in trend if h <= acf.H_max]
    return StatReport(
        stat="averaged_chowla",
        params={"H": int(H), "N": acf.N, "averaging": acf.averaging},
        value=level(int(H)),
        trend=points,
    )


def _progression_term(values: np.ndarray, H: int, q: int, N_prime: int) -> float:
    """(1/N') sum_{n <= N'} |(1/H) sum_{h=1..H} u(n + hq)|^2 from strided prefix sums"""
    rows = -(-values.size // q)
    padded = np.zeros(rows * q, dtype=np.complex128)
    padded[: values.size] = values
    columns = np.vstack([np.zeros((1, q), dtype=np.complex128), np.cumsum(padded.reshape(rows, q), axis=0)])
    p = np.arange(N_prime)  # 0-based n - 1
    row, residue = np.divmod(p, q)
    sums = columns[row + H + 1, residue] - columns[row + 1, residue]
    return math.fsum(np.abs(sums / H) ** 2) / N_prime


def progression_stat(
    u: ArithmeticSequence, H: int, Q: int, N: Optional[int] = None, workers: int = 1
) -> StatReport:
    """(1/Q) sum_{q <= Q} (1/N') sum_{n <= N'} |(1/H) sum_{h <= H} u(hq + n)|^2, N' = N - HQ"""
    N = _resolve_length(u, N)
    H, Q = int(H), int(Q)
    if H < 1 or Q < 1 or H * Q >= N:
        raise InvalidArgumentError(f"need H*Q < N, got H={H}, Q={Q}, N={N}")
    N_prime = N - H * Q
    values = np.asarray(u.values[:N])

    def term(q: int) -> float:
        return _progression_term(values, H, q, N_prime)

    if workers > 1 and Q > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            terms = list(executor.map(term, range(1, Q + 1)))
    else:
        terms = [term(q) for q in range(1, Q + 1)]

    return StatReport(
        stat="progression",
        params={"H": H, "Q": Q, "N": N},
        value=math.fsum(terms) / Q,
        trend=[(float(q), t) for q, t in enumerate(terms, start=1)],
    )


def relative_vn_stat(u: ArithmeticSequence, phi, L: int, N: Optional[int] = None) -> StatReport:
    """
    (1/N') sum_{n <= N'} |(1/L) sum_{l <= L} u(n+l) u(phi(n)+l)|^2 with N' = N - L; terms
    with phi(n)+l > N are skipped and counted.

    Args:
        phi: PermutationPlan or 0-based permutation array of {0..N-1}
    """
    N = _resolve_length(u, N)
    L = int(L)
    if L < 1 or L >= N:
        raise InvalidArgumentError(f"need 1 <= L < N, got L={L}, N={N}")
    perm = check_permutation(getattr(phi, "phi", phi), N)
    N_prime = N - L
    padded = np.concatenate((u.values[:N], np.zeros(L, dtype=np.complex128)))
    n = np.arange(N_prime)
    target = perm[:N_prime]
    acc = np.zeros(N_prime, dtype=np.complex128)
    for ell in range(1, L + 1):
        acc += padded[n + ell] * padded[target + ell]
    skipped = int(np.maximum(target + L - (N - 1), 0).sum())
    value = math.fsum(np.abs(acc / L) ** 2) / N_prime
    return StatReport(stat="relative_vn", params={"L": L, "N": N, "skipped": skipped}, value=value)
