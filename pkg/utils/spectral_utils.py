# utils/spectral_utils.py

import logging
import math
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy import fft as sp_fft

from utils.correlation_utils import AutocorrTable
from utils.errors import InvalidArgumentError
from utils.reports import SpectralSummary, StatReport

logger = logging.getLogger(__name__)

MIN_DEPTH = 10
MAX_PROFILE_Q = 12
PARSEVAL_SLACK = 0.01


def _lags(acf: AutocorrTable, H: Optional[int] = None) -> np.ndarray:
    H = acf.H_max if H is None else int(H)
    return acf.truncated(H)[1:]


def rational_atom_mass(acf: AutocorrTable, q: int) -> float:
    """|(1/J) sum_{j <= J} gamma(qj)|, J = floor(H/q): estimated sigma-mass on the q-th roots of unity"""
    q = int(q)
    if q < 1 or 10 * q > acf.H_max:
        raise InvalidArgumentError(f"q={q} needs q <= H/10 (H={acf.H_max})")
    J = acf.H_max // q
    picked = acf.gamma[q: q * J + 1: q]
    return abs(complex(math.fsum(picked.real), math.fsum(picked.imag)) / J)


def wiener_atom_mass(acf: AutocorrTable, max_q: int = MAX_PROFILE_Q) -> SpectralSummary:
    """
    Wiener-lemma summary of the spectral measure.

    mean_sq = (1/H) sum |gamma(h)|^2 estimates the total squared atom mass,
    mean_abs_sq = |(1/H) sum gamma(h)|^2 the squared atom at 1; their difference
    (clamped at 0) is the mass carried by atoms away from 1.
    """
    H = acf.H_max
    if H < MIN_DEPTH:
        raise InvalidArgumentError(f"wiener_atom_mass needs H >= {MIN_DEPTH}, got {H}")
    gamma = _lags(acf)
    mean_sq = math.fsum(np.abs(gamma) ** 2) / H
    mean = complex(math.fsum(gamma.real), math.fsum(gamma.imag)) / H
    mean_abs_sq = abs(mean) ** 2
    gap = mean_sq - mean_abs_sq
    profile = {q: rational_atom_mass(acf, q) for q in range(1, min(max_q, H // 10) + 1)}
    return SpectralSummary(
        H=H,
        mean_sq=min(mean_sq, 1.0),
        mean_abs_sq=min(mean_abs_sq, 1.0),
        nontrivial_atom_mass=min(max(gap, 0.0), 1.0),
        equality_gap=gap,
        rational_profile=profile,
    )


def atom_mass_at(acf: AutocorrTable, theta: float) -> float:
    """|(1/H) sum_{h=1..H} gamma(h) e^{-2 pi i h theta}|, the estimated sigma({e^{2 pi i theta}})"""
    theta = float(theta)
    if not 0.0 <= theta < 1.0:
        raise InvalidArgumentError(f"theta must lie in [0, 1), got {theta!r}")
    gamma = _lags(acf)
    h = np.arange(1, acf.H_max + 1)
    terms = gamma * np.exp(-2j * np.pi * h * theta)
    return abs(complex(math.fsum(terms.real), math.fsum(terms.imag))) / acf.H_max


def atom_mass_scan(acf: AutocorrTable, grid: int, workers: int = 1) -> pd.DataFrame:
    """
    Atom masses at theta = k/grid, k = 0..grid-1, from one zero padded FFT of gamma.

    Returns:
        DataFrame with columns theta, mass; attrs carry the square sum and mean_sq
    """
    grid = int(grid)
    if grid < 1:
        raise InvalidArgumentError(f"grid must be positive, got {grid}")
    H = acf.H_max
    stride = -(-(H + 1) // grid)
    padded = np.zeros(grid * stride, dtype=np.complex128)
    padded[1: H + 1] = _lags(acf)
    masses = np.abs(sp_fft.fft(padded, workers=workers)[::stride][:grid]) / H
    frame = pd.DataFrame({"theta": np.arange(grid) / grid, "mass": masses})
    square_sum = math.fsum(masses ** 2)
    mean_sq = math.fsum(np.abs(_lags(acf)) ** 2) / H
    frame.attrs["square_sum"] = square_sum
    frame.attrs["mean_sq"] = mean_sq
    if square_sum > mean_sq + PARSEVAL_SLACK:
        logger.warning(f"atom scan: square sum {square_sum:.4f} exceeds mean_sq + {PARSEVAL_SLACK} ({mean_sq:.4f})")
    return frame


def rational_grid(acf: AutocorrTable, Hs: Iterable[int], qs: Iterable[int]) -> pd.DataFrame:
    """Rational atom masses on a finite (H, q) grid, each H a truncation of the same table"""
    rows = []
    for H in Hs:
        truncated = AutocorrTable(H_max=int(H), gamma=acf.truncated(int(H)), N=acf.N,
                                  N_prime=acf.N_prime, averaging=acf.averaging,
                                  sequence_hash=acf.sequence_hash)
        for q in qs:
            if 10 * int(q) > int(H):
                continue
            rows.append({"H": int(H), "q": int(q), "mass": rational_atom_mass(truncated, q)})
    return pd.DataFrame(rows, columns=["H", "q", "mass"])


def atom_report(acf: AutocorrTable, thetas: Iterable[float]) -> StatReport:
    """Largest single-atom estimate over the given angles, each angle as a trend point"""
    points = [(float(theta), atom_mass_at(acf, theta)) for theta in thetas]
    if not points:
        raise InvalidArgumentError("atom_mass_at needs at least one theta")
    return StatReport(
        stat="atom_mass_at",
        params={"H": acf.H_max, "N": acf.N, "averaging": acf.averaging},
        value=max(mass for _, mass in points),
        trend=points,
    )


def rational_report(acf: AutocorrTable, qs: Iterable[int]) -> StatReport:
    points = [(float(q), rational_atom_mass(acf, q)) for q in qs]
    if not points:
        raise InvalidArgumentError("rational_atom_mass needs at least one q")
    return StatReport(
        stat="rational_atom_mass",
        params={"H": acf.H_max, "N": acf.N, "averaging": acf.averaging},
        value=max(mass for _, mass in points),
        trend=points,
    )

