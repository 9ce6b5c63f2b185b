# utils/io_utils.py

import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from utils.errors import InvalidArgumentError
from utils.sequence_utils import ArithmeticSequence

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEQUENCE_MAGIC = b"FSLAB001"
PERMUTATION_MAGIC = b"FSPERM01"


def _ensure_parent(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# Sequences: CSV n,re,im or the FSLAB001 binary (magic, then little-endian complex128)

def write_sequence_csv(path: PathLike, u: ArithmeticSequence) -> Path:
    path = _ensure_parent(path)
    frame = pd.DataFrame({"n": np.arange(1, len(u) + 1), "re": u.values.real, "im": u.values.imag})
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_sequence_csv(path: PathLike) -> ArithmeticSequence:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise InvalidArgumentError(f"cannot read sequence file {path}: {e}")
    if list(frame.columns[:3]) != ["n", "re", "im"]:
        raise InvalidArgumentError(f"{path}: expected columns n,re,im")
    n = frame["n"].to_numpy()
    if n.size == 0 or np.any(n != np.arange(1, n.size + 1)):
        raise InvalidArgumentError(f"{path}: indices must run 1..N")
    values = frame["re"].to_numpy(dtype=np.float64) + 1j * frame["im"].to_numpy(dtype=np.float64)
    return ArithmeticSequence(values, f"file:{Path(path).name}", {"path": str(path)})


def write_sequence_binary(path: PathLike, u: ArithmeticSequence) -> Path:
    path = _ensure_parent(path)
    with open(path, "wb") as handle:
        handle.write(SEQUENCE_MAGIC)
        handle.write(np.ascontiguousarray(u.values, dtype="<c16").tobytes())
    return path


def read_sequence_binary(path: PathLike) -> ArithmeticSequence:
    raw = Path(path).read_bytes()
    if raw[: len(SEQUENCE_MAGIC)] != SEQUENCE_MAGIC:
        raise InvalidArgumentError(f"{path}: not an FSLAB001 sequence file")
    body = raw[len(SEQUENCE_MAGIC):]
    if len(body) % 16:
        raise InvalidArgumentError(f"{path}: truncated sequence payload")
    return ArithmeticSequence(np.frombuffer(body, dtype="<c16"), f"file:{Path(path).name}", {"path": str(path)})


def read_sequence(path: PathLike) -> ArithmeticSequence:
    """Load a sequence file, CSV or binary by content"""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"sequence file {path} does not exist")
    with open(path, "rb") as handle:
        head = handle.read(len(SEQUENCE_MAGIC))
    if head == SEQUENCE_MAGIC:
        return read_sequence_binary(path)
    return read_sequence_csv(path)


# Permutations: FSPERM01, N as int64, then phi(1..N) 1-based as int64

def write_permutation(path: PathLike, phi: np.ndarray) -> Path:
    """Write a 0-based permutation array in the 1-based FSPERM01 layout"""
    path = _ensure_parent(path)
    phi = np.asarray(phi, dtype=np.int64)
    with open(path, "wb") as handle:
        handle.write(PERMUTATION_MAGIC)
        handle.write(np.array([phi.size], dtype="<i8").tobytes())
        handle.write((phi + 1).astype("<i8").tobytes())
    return path


def read_permutation(path: PathLike) -> np.ndarray:
    """Read an FSPERM01 file back to a 0-based array"""
    raw = Path(path).read_bytes()
    if raw[: len(PERMUTATION_MAGIC)] != PERMUTATION_MAGIC:
        raise InvalidArgumentError(f"{path}: not an FSPERM01 permutation file")
    N = int(np.frombuffer(raw, dtype="<i8", count=1, offset=len(PERMUTATION_MAGIC))[0])
    values = np.frombuffer(raw, dtype="<i8", offset=len(PERMUTATION_MAGIC) + 8)
    if values.size != N:
        raise InvalidArgumentError(f"{path}: header says N={N}, payload holds {values.size}")
    return values.astype(np.int64) - 1


def write_autocorr_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = _ensure_parent(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_trend_csv(path: PathLike, trend: Sequence[Tuple[float, float]]) -> Path:
    """Plot data: one x,y row per trend point"""
    path = _ensure_parent(path)
    pd.DataFrame(list(trend), columns=["x", "y"]).to_csv(path, index=False, float_format="%.17g")
    return path


def write_json(path: PathLike, payload) -> Path:
    path = _ensure_parent(path)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def append_jsonl(path: PathLike, records: Iterable[BaseModel]) -> Path:
    path = _ensure_parent(path)
    with open(path, "a") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")
    return path


def read_jsonl(path: PathLike) -> List[dict]:
    rows = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
