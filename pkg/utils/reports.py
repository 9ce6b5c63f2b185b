# utils/reports.py

from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class StatReport(BaseModel):
    stat: str
    params: Dict[str, Any] = Field(default_factory=dict)
    value: float = Field(ge=0.0)
    trend: List[Tuple[float, float]] = Field(default_factory=list)


class SpectralSummary(BaseModel):
    H: int
    mean_sq: float = Field(ge=0.0)
    mean_abs_sq: float = Field(ge=0.0)
    nontrivial_atom_mass: float = Field(ge=0.0, le=1.0)
    equality_gap: float  # mean_sq - mean_abs_sq, unclamped
    rational_profile: Dict[int, float] = Field(default_factory=dict)

    def to_report(self) -> StatReport:
        return StatReport(
            stat="wiener_atom_mass",
            params={
                "H": self.H,
                "mean_sq": self.mean_sq,
                "mean_abs_sq": self.mean_abs_sq,
                "equality_gap": self.equality_gap,
                "rational_profile": {str(q): v for q, v in self.rational_profile.items()},
            },
            value=self.nontrivial_atom_mass,
            trend=[(float(q), v) for q, v in self.rational_profile.items()],
        )


class StageReport(BaseModel):
    stage: int
    N: int
    epsilon: float
    height: int
    target: str
    resolution: str  # 'word' when the fine table was used, 'tower' otherwise
    outside_fraction: float
    tower_base: str = ""
    cell_error: float
    cell_bound: float
    length2_error: float
    defect_fraction: float
    defect_bound: float
    ti_violations: int
    unplaced_segments: int
    bounds_hold: bool
    permutation_path: Optional[str] = None


class ResultRecord(BaseModel):
    config_hash: str
    started_at: str
    finished_at: str = ""
    reports: List[StatReport] = Field(default_factory=list)
    stages: List[StageReport] = Field(default_factory=list)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    cache_hits: int = 0
    cache_misses: int = 0
    failures: List[Dict[str, Any]] = Field(default_factory=list)

    @property
    def success(self) -> bool:
        return not self.failures
