# utils/experiment_utils.py

import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.cache_utils import AutocorrCache
from utils.correlation_utils import (
    DEFAULT_TREND_H,
    AutocorrTable,
    autocorrelation,
    averaged_chowla_stat,
    progression_stat,
    relative_vn_stat,
    short_interval_stat,
    trend_depth,
    u1_norm_estimate,
)
from utils.dynamics_utils import (
    OrbitSystem,
    multiplier_test,
    orthogonality_test,
    schedule_from_blocks,
    square_schedule,
    strong_momo_test,
)
from utils.empirics_utils import quantize
from utils.errors import ConfigError, FSLabError
from utils.io_utils import append_jsonl, read_sequence, write_autocorr_csv, write_json, write_trend_csv
from utils.joining_utils import JoiningTarget, product_projection_check, self_joining_pipeline
from utils.reports import ResultRecord, StatReport
from utils.sequence_utils import (
    GOLDEN,
    ArithmeticSequence,
    besicovitch_mean,
    default_delta_schedule,
    gen_archimedean,
    gen_constant,
    gen_iid_signs,
    gen_liouville,
    gen_power_decay,
    gen_root_of_unity,
    gen_skew_sequence,
    msv_blockify,
)
from utils.spectral_utils import atom_mass_scan, atom_report, rational_report, wiener_atom_mass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

GENERATORS = ("liouville", "skew", "archimedean", "power_decay", "iid_signs", "root_of_unity", "constant", "file")
STATISTICS = (
    "short_interval", "u1_norm", "averaged_chowla", "progression", "relative_vn",
    "wiener_atom_mass", "rational_atom_mass", "atom_mass_at", "besicovitch_mean", "msv_blockify",
)
SYSTEMS = tuple(OrbitSystem.DIMENSIONS)
NEEDS = {
    "short_interval": ("H",),
    "u1_norm": ("H",),
    "averaged_chowla": ("H",),
    "progression": ("H", "Q"),
    "relative_vn": ("L",),
    "wiener_atom_mass": ("H",),
    "rational_atom_mass": ("H", "q"),
    "atom_mass_at": ("H", "theta"),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SequenceConfig(_Strict):
    generator: str
    N: Optional[int] = Field(default=None, gt=0)
    seed: int = 0
    alpha: float = GOLDEN
    L: int = Field(default=150, gt=0)
    t: float = 1.0
    r: float = Field(default=0.5, gt=0)
    q: int = Field(default=2, gt=0)
    a: int = 1
    c: Tuple[float, float] = (1.0, 0.0)
    path: Optional[str] = None

    @field_validator("generator")
    @classmethod
    def _known_generator(cls, value: str) -> str:
        if value not in GENERATORS:
            raise ValueError(f"unknown generator '{value}' (known: {', '.join(GENERATORS)})")
        return value

    @model_validator(mode="after")
    def _complete(self):
        if self.generator == "file" and not self.path:
            raise ValueError("the file generator needs a path")
        if self.generator not in ("file", "skew") and self.N is None:
            raise ValueError(f"generator '{self.generator}' needs N")
        if abs(complex(*self.c)) > 1.0:
            raise ValueError("the constant must lie in the unit disc")
        return self


class StatisticConfig(_Strict):
    name: str
    H: Optional[int] = Field(default=None, gt=0)
    Q: Optional[int] = Field(default=None, gt=0)
    L: Optional[int] = Field(default=None, gt=0)
    N: Optional[int] = Field(default=None, gt=0)
    q: List[int] = Field(default_factory=list)
    theta: List[float] = Field(default_factory=list)
    shift: Optional[int] = None
    trend: List[int] = Field(default_factory=lambda: list(DEFAULT_TREND_H))
    grid: Optional[int] = Field(default=None, gt=0)
    scales: int = Field(default=12, gt=0)

    @field_validator("name")
    @classmethod
    def _known_statistic(cls, value: str) -> str:
        if value not in STATISTICS:
            raise ValueError(f"unknown statistic '{value}'")
        return value

    @model_validator(mode="after")
    def _complete(self):
        missing = [key for key in NEEDS.get(self.name, ()) if not getattr(self, key)]
        if missing:
            raise ValueError(f"statistic '{self.name}' needs {', '.join(missing)}")
        return self


class SystemConfig(_Strict):
    kind: str
    alpha: float = 0.0
    beta: float = 0.0
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    observable: Optional[str] = None
    x0: List[float] = Field(default_factory=list)
    Ns: List[int] = Field(default_factory=list)
    test: Literal["orthogonality", "strong_momo", "multiplier"] = "orthogonality"
    schedule: Literal["square", "msv"] = "square"
    K: Optional[int] = Field(default=None, gt=1)
    restarts: Literal["random", "orbit"] = "random"
    seed: int = 0
    multiplier: Optional[SequenceConfig] = None

    @field_validator("kind")
    @classmethod
    def _known_system(cls, value: str) -> str:
        if value not in SYSTEMS:
            raise ValueError(f"unknown system '{value}'")
        return value

    @model_validator(mode="after")
    def _complete(self):
        self.build()
        if self.test in ("orthogonality", "multiplier") and not self.Ns:
            raise ValueError(f"the {self.test} test needs Ns")
        if self.test == "multiplier" and self.multiplier is None:
            raise ValueError("the multiplier test needs a [systems.multiplier] sequence")
        if self.test == "strong_momo" and self.schedule == "square" and self.K is None:
            raise ValueError("a square schedule needs K")
        return self

    def build(self) -> OrbitSystem:
        defaults = {"circle": "char:1", "torus": "char:1,0", "skew": "vertical", "heisenberg": "heisenberg"}
        return OrbitSystem(self.kind, alpha=self.alpha, beta=self.beta, a=self.a, b=self.b, c=self.c,
                           observable=self.observable or defaults[self.kind])


class JoiningConfig(_Strict):
    target: str
    Ns: List[int]
    quantization: Literal["signs", "phase_bins", "value_set"] = "signs"
    bins: int = Field(default=16, gt=0)
    with_rotation: bool = False
    rotation_bins: int = Field(default=8, gt=0)
    projection_M: Optional[int] = Field(default=None, gt=0)

    @field_validator("target")
    @classmethod
    def _parse_target(cls, value: str) -> str:
        JoiningTarget.parse(value)
        return value


class OutputConfig(_Strict):
    dir: str = "results"
    cache: bool = True
    threads: int = Field(default=1, gt=0)
    averaging: Literal["cesaro", "logarithmic"] = "cesaro"


class ExperimentConfig(_Strict):
    sequence: SequenceConfig
    statistics: List[StatisticConfig] = Field(default_factory=list)
    systems: List[SystemConfig] = Field(default_factory=list)
    joining: Optional[JoiningConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    path = ".".join(str(part) for part in first["loc"])
    return ConfigError(first["msg"], field=path)


def parse_config(payload: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise _config_error(e)


def load_config(path) -> ExperimentConfig:
    """Read and validate a TOML experiment config"""
    try:
        with open(path, "rb") as handle:
            payload = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}")
    return parse_config(payload)


def apply_overrides(config: ExperimentConfig, out: Optional[str] = None, threads: Optional[int] = None,
                    no_cache: bool = False, log_averaging: bool = False) -> ExperimentConfig:
    update: Dict[str, Any] = {}
    if out is not None:
        update["dir"] = str(out)
    if threads is not None:
        if threads < 1:
            raise ConfigError("thread count must be positive", field="output.threads")
        update["threads"] = int(threads)
    if no_cache:
        update["cache"] = False
    if log_averaging:
        update["averaging"] = "logarithmic"
    if not update:
        return config
    return config.model_copy(update={"output": config.output.model_copy(update=update)})


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; output location, threads and cache do not count"""
    payload = config.model_dump(mode="json", exclude={"output": {"dir", "threads", "cache"}})
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_sequence(spec: SequenceConfig, workers: int = 1) -> ArithmeticSequence:
    name = spec.generator
    if name == "liouville":
        return gen_liouville(spec.N, workers=workers)
    if name == "skew":
        u = gen_skew_sequence(spec.alpha, spec.L)
        return u.prefix(spec.N) if spec.N is not None and spec.N < len(u) else u
    if name == "archimedean":
        return gen_archimedean(spec.t, spec.N)
    if name == "power_decay":
        return gen_power_decay(spec.r, spec.N)
    if name == "iid_signs":
        return gen_iid_signs(spec.N, seed=spec.seed)
    if name == "root_of_unity":
        return gen_root_of_unity(spec.q, spec.N, a=spec.a)
    if name == "constant":
        return gen_constant(complex(*spec.c), spec.N)
    u = read_sequence(spec.path)
    return u.prefix(spec.N) if spec.N is not None and spec.N < len(u) else u


class ExperimentRunner:
    """State shared by the blocks of one experiment run"""

    def __init__(self, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.workers = config.output.threads
        self.averaging = config.output.averaging
        self.cache = AutocorrCache(enabled=config.output.cache)
        self.artifacts: Dict[str, str] = {}

    def table(self, u: ArithmeticSequence, H: int) -> AutocorrTable:
        def compute() -> AutocorrTable:
            return autocorrelation(u, H, averaging=self.averaging, workers=self.workers)

        acf = self.cache.get_or_compute(u.content_hash(), H, self.averaging, compute)
        name = f"autocorr_H{H}_{self.averaging}"
        if name not in self.artifacts:
            self.artifacts[name] = str(write_autocorr_csv(self.out_dir / "tables" / f"{name}.csv", acf.to_frame()))
        return acf

    def statistic(self, stat: StatisticConfig, u: ArithmeticSequence) -> StatReport:
        seq = u.prefix(stat.N) if stat.N is not None and stat.N < len(u) else u
        name = stat.name
        if name == "short_interval":
            return short_interval_stat(seq, stat.H)
        if name == "u1_norm":
            return u1_norm_estimate(seq, stat.H, acf=self.table(seq, stat.H))
        if name == "averaged_chowla":
            acf = self.table(seq, trend_depth(stat.H, len(seq), stat.trend))
            return averaged_chowla_stat(seq, stat.H, acf=acf, trend=stat.trend)
        if name == "progression":
            return progression_stat(seq, stat.H, stat.Q, workers=self.workers)
        if name == "relative_vn":
            N = len(seq)
            shift = stat.shift if stat.shift is not None else N // 2
            phi = (np.arange(N) + shift) % N
            report = relative_vn_stat(seq, phi, stat.L)
            report.params["shift"] = shift
            return report
        if name == "wiener_atom_mass":
            acf = self.table(seq, stat.H)
            report = wiener_atom_mass(acf).to_report()
            if stat.grid:
                scan = atom_mass_scan(acf, stat.grid, workers=self.workers)
                path = self.out_dir / "tables" / "atom_scan.csv"
                scan.to_csv(path, index=False, float_format="%.17g")
                self.artifacts["atom_scan"] = str(path)
                report.params["square_sum"] = scan.attrs["square_sum"]
            return report
        if name == "rational_atom_mass":
            return rational_report(self.table(seq, stat.H), stat.q)
        if name == "atom_mass_at":
            return atom_report(self.table(seq, stat.H), stat.theta)
        if name == "besicovitch_mean":
            return StatReport(stat=name, params={"N": len(seq)}, value=besicovitch_mean(seq))
        _, blocks = msv_blockify(seq, default_delta_schedule(stat.scales))
        return StatReport(stat=name, params=dict(blocks.to_dict(), N=len(seq)), value=blocks.distance)

    def system(self, spec: SystemConfig, u: ArithmeticSequence) -> StatReport:
        sys_ = spec.build()
        if spec.test == "orthogonality":
            return orthogonality_test(u, sys_, spec.x0 or None, spec.Ns, averaging=self.averaging)
        if spec.test == "multiplier":
            v = build_sequence(spec.multiplier, self.workers)
            return multiplier_test(u, v, sys_, spec.x0 or None, spec.Ns)
        if spec.schedule == "square":
            schedule = square_schedule(spec.K)
        else:
            schedule = schedule_from_blocks(msv_blockify(u)[1])
        return strong_momo_test(u, sys_, schedule, K=spec.K, restarts=spec.restarts, seed=spec.seed,
                                x0=spec.x0 or None)


def _failure(block: str, name: str, error: FSLabError) -> Dict[str, Any]:
    logger.error(f"{block} '{name}' failed: {error}")
    return dict({"success": False, "stat": name}, **error.to_dict())


def run_experiment(config: ExperimentConfig) -> ResultRecord:
    """
    Generate the sequence, run every statistic, system test and the joining pipeline,
    and write results.jsonl, record.json, CSV tables and x,y plot data under the
    output directory. A failing block is logged and recorded; the others still run.
    """
    started = time.time()
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = ResultRecord(config_hash=config_hash(config), started_at=datetime.now(timezone.utc).isoformat())
    runner = ExperimentRunner(config, out_dir)

    u = build_sequence(config.sequence, runner.workers)
    logger.info(f"sequence {u.label}: N={len(u)} ({time.time() - started:.2f}s)")

    for stat in config.statistics:
        try:
            record.reports.append(runner.statistic(stat, u))
        except FSLabError as e:
            record.failures.append(_failure("statistic", stat.name, e))

    for spec in config.systems:
        try:
            report = runner.system(spec, u)
            report.stat = f"{report.stat}:{spec.kind}"
            record.reports.append(report)
        except FSLabError as e:
            record.failures.append(_failure("system", spec.kind, e))

    if config.joining is not None:
        joining = config.joining
        try:
            stages = self_joining_pipeline(
                u, joining.Ns, joining.target,
                quantization=joining.quantization, bins=joining.bins, averaging=runner.averaging,
                with_rotation=joining.with_rotation, rotation_bins=joining.rotation_bins,
                out_dir=out_dir / "joining", workers=runner.workers,
            )
            record.stages = [report for _, report in stages]
            runner.artifacts["joining_report"] = str(out_dir / "joining" / "report.json")
            if joining.projection_M:
                plan, last = stages[-1]
                symbols = quantize(u.prefix(last.N), joining.quantization, joining.bins)
                record.reports.append(product_projection_check(symbols, plan, joining.projection_M))
        except FSLabError as e:
            record.failures.append(_failure("joining", joining.target, e))

    results_path = out_dir / "results.jsonl"
    results_path.unlink(missing_ok=True)
    append_jsonl(results_path, record.reports)
    runner.artifacts["results"] = str(results_path)
    for index, report in enumerate(record.reports):
        if report.trend:
            name = f"{index:02d}_{report.stat.replace(':', '_')}"
            runner.artifacts[name] = str(write_trend_csv(out_dir / "plots" / f"{name}.csv", report.trend))

    record.artifacts = runner.artifacts
    record.cache_hits = runner.cache.hits
    record.cache_misses = runner.cache.misses
    record.finished_at = datetime.now(timezone.utc).isoformat()
    write_json(out_dir / "record.json", record)
    logger.info(f"experiment {record.config_hash[:12]}: {len(record.reports)} report(s), "
                f"{len(record.failures)} failure(s), {time.time() - started:.2f}s")
    return record
