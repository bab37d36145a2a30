"""
Pydantic models for test results, penalty selection, confidence sets,
simulation configuration and simulation output.
"""

import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)


class TestName(str, Enum):
    RJAR = "RJAR"
    CMS = "CMS"
    MS = "MS"
    SUPSCORE = "SUPSCORE"

    @classmethod
    def parse(cls, value: str) -> "TestName":
        key = value.strip().upper().replace("-", "").replace("_", "")
        aliases = {"SUP": "SUPSCORE", "BCCH": "SUPSCORE"}
        return cls(aliases.get(key, key))


class TestFlag(str, Enum):
    NEGATIVE_VARIANCE_NO_REJECT = "NEGATIVE_VARIANCE_NO_REJECT"
    ASSUMPTION3_QUESTIONABLE = "ASSUMPTION3_QUESTIONABLE"


# keep pytest from collecting the Test* enums
TestName.__test__ = False
TestFlag.__test__ = False


class SupScoreScaling(str, Enum):
    AS_WRITTEN = "AS_WRITTEN"
    SCALE_CONSISTENT = "SCALE_CONSISTENT"


class Design(str, Enum):
    SPARSE = "SPARSE"
    DENSE = "DENSE"


class TestOptions(BaseModel):
    """Knobs shared by the four tests."""

    __test__ = False

    c_bcch: float = Field(1.1, gt=1)
    supscore_scaling: SupScoreScaling = SupScoreScaling.SCALE_CONSISTENT
    gamma: Optional[float] = Field(None, ge=0)


class TestResult(BaseModel):
    """Outcome of one test at one null value."""

    __test__ = False

    test_name: TestName
    statistic: Optional[float]
    critical_value: float
    alpha: float = Field(gt=0, lt=1)
    reject: bool
    variance_estimate: Optional[float] = None
    gamma_used: Optional[float] = None
    flags: List[TestFlag] = Field(default_factory=list)
    sidedness: str = "upper"

    @model_validator(mode="after")
    def _decision_matches_statistic(self):
        if TestFlag.NEGATIVE_VARIANCE_NO_REJECT in self.flags:
            if self.reject:
                raise ValueError("negative-variance results never reject")
        elif self.statistic is None or self.reject != (
            self.statistic > self.critical_value
        ):
            raise ValueError("reject must equal statistic > critical_value")
        return self

    def to_output(self) -> dict:
        """Flat record used by the CLI `test` output."""
        return {
            "name": self.test_name.value,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "alpha": self.alpha,
            "reject": self.reject,
            "flags": [flag.value for flag in self.flags],
            "gamma_star": self.gamma_used,
            "variance": self.variance_estimate,
            "sidedness": self.sidedness,
        }


class PenaltySelection(BaseModel):
    """Chosen penalty and the search that produced it."""

    gamma_star: float = Field(ge=0)
    s_at_star: float = Field(gt=0)
    s_at_zero_or_floor: float
    implied_c: float
    search_trace: List[Tuple[float, float]]
    tie_set_width: float = Field(ge=0)
    lower_endpoint: float = Field(ge=0)
    gamma_floor: float = Field(gt=0)
    rank_deficient: bool
    evaluations: int

    @model_validator(mode="after")
    def _admissible(self):
        if self.rank_deficient and self.gamma_star < self.gamma_floor:
            raise ValueError("gamma_star below the floor for a rank-deficient design")
        # ties within the plateau tolerance may sit just below the endpoint value
        if self.s_at_star < self.s_at_zero_or_floor - 1e-10 * self.s_at_star:
            raise ValueError("S(gamma_star) below S at the lower endpoint")
        return self


class Diagnostics(BaseModel):
    """Assumption-3 diagnostics for a chosen penalty."""

    n: int
    k: int
    r: int
    gamma_star: float
    s_at_star: float
    implied_c: float
    max_diag: float
    questionable: bool
    lower_endpoint: float
    rank_deficient: bool
    tie_set_width: float
    d_max: float
    d_min: float
    rank_tol: float
    balanced_delta: Optional[float] = None
    ratio_series: List[Tuple[float, float]] = Field(default_factory=list)


class ConfidenceSet(BaseModel):
    """Accepted region of a grid scan."""

    test_name: TestName
    alpha: float
    grid: List[List[float]]
    accepted: List[bool]
    statistics: List[Optional[float]]
    critical_values: List[float]
    components: List[Tuple[int, int]]
    gamma_star: Optional[float] = None

    @computed_field
    @property
    def level(self) -> float:
        return 1.0 - self.alpha

    @property
    def is_empty(self) -> bool:
        return not any(self.accepted)

    @property
    def touches_boundary(self) -> bool:
        """True when an accepted point sits on either end of the grid."""
        return bool(self.accepted) and (self.accepted[0] or self.accepted[-1])

    def intervals(self) -> List[Tuple[List[float], List[float]]]:
        return [(self.grid[start], self.grid[end]) for start, end in self.components]


def _default_alpha_grid() -> List[float]:
    return [round(0.01 * i, 2) for i in range(1, 100)]


def _all_tests() -> List[TestName]:
    return [TestName.RJAR, TestName.CMS, TestName.MS, TestName.SUPSCORE]


class SimConfig(BaseModel):
    """Monte-Carlo experiment description."""

    n: int = Field(100, ge=2)
    k: int = Field(30, ge=1)
    design: Design = Design.SPARSE
    mu2: float = Field(0.0, ge=0)
    sigma_eps2: float = Field(2.0, gt=0)
    sigma_v2: float = Field(1.0, gt=0)
    corr_ev: float = 0.6
    z_var: float = Field(0.3, gt=0)
    z_rho: float = 0.5
    beta_true: float = 1.0
    reps: int = Field(10000, ge=1)
    seed: int = Field(0, ge=0)
    alpha_grid: List[float] = Field(default_factory=_default_alpha_grid)
    tests: List[TestName] = Field(default_factory=_all_tests)
    redraw_instruments: bool = True
    gamma_floor: float = Field(1.0, gt=0)
    c_bcch: float = Field(1.1, gt=1)
    supscore_scaling: SupScoreScaling = SupScoreScaling.SCALE_CONSISTENT
    power_alpha: float = Field(0.05, gt=0, lt=1)
    keep_traces: bool = False
    n_jobs: Optional[int] = Field(None, ge=1)

    @field_validator("corr_ev", "z_rho")
    @classmethod
    def _inside_unit_interval(cls, value: float) -> float:
        if not abs(value) < 1:
            raise ValueError("must satisfy |value| < 1")
        return value

    @field_validator("alpha_grid")
    @classmethod
    def _probabilities(cls, value: List[float]) -> List[float]:
        if not value or any(not 0 < a < 1 for a in value):
            raise ValueError("alpha_grid must be non-empty with entries in (0, 1)")
        return value

    @model_validator(mode="after")
    def _design_fits_k(self):
        if self.design == Design.SPARSE and self.k < 5:
            raise ValueError("SPARSE design requires k >= 5")
        if not any(math.isclose(a, self.power_alpha, rel_tol=1e-12) for a in self.alpha_grid):
            self.alpha_grid = sorted([*self.alpha_grid, self.power_alpha])
        return self

    @computed_field
    @property
    def kappa_ones(self) -> int:
        if self.design == Design.SPARSE:
            return 5
        return (2 * self.k) // 5

    @computed_field
    @property
    def dense_rounded(self) -> bool:
        return self.design == Design.DENSE and (2 * self.k) % 5 != 0

    def test_options(self):
        return TestOptions(c_bcch=self.c_bcch, supscore_scaling=self.supscore_scaling)


class RejectionCell(BaseModel):
    test: TestName
    beta0: float
    alpha: float
    rejections: int
    reps: int

    @computed_field
    @property
    def frequency(self) -> float:
        return self.rejections / self.reps


class GammaSummary(BaseModel):
    median: float
    q25: float
    q75: float
    iqr: float
    minimum: float
    maximum: float


class SimResult(BaseModel):
    """Rejection frequencies of one experiment."""

    config: SimConfig
    beta0_grid: List[float]
    cells: List[RejectionCell]
    skipped: Dict[str, str] = Field(default_factory=dict)
    gamma_summary: GammaSummary
    ms_negative_variance: int = 0
    error_counts: Dict[str, int] = Field(default_factory=dict)
    traces: Optional[Dict[str, List[List[Optional[float]]]]] = None

    def frequency(self, test: TestName, beta0: float, alpha: float) -> Optional[float]:
        """Rejection frequency of one cell, None when the test was skipped."""
        test = TestName(test)
        for cell in self.cells:
            if (
                cell.test == test
                and math.isclose(cell.beta0, beta0, rel_tol=1e-12, abs_tol=1e-12)
                and math.isclose(cell.alpha, alpha, rel_tol=1e-12, abs_tol=1e-12)
            ):
                return cell.frequency
        return None

    def size_rows(self) -> List[dict]:
        """PP-plot rows at the true coefficient."""
        beta_true = self.config.beta_true
        return [
            {
                "mu2": self.config.mu2,
                "alpha": cell.alpha,
                "test": cell.test.value,
                "frequency": cell.frequency,
            }
            for cell in self.cells
            if math.isclose(cell.beta0, beta_true, rel_tol=1e-12, abs_tol=1e-12)
        ]

    def power_rows(self) -> List[dict]:
        """Power-curve rows at the configured power level."""
        return [
            {
                "beta0": cell.beta0,
                "mu2": self.config.mu2,
                "test": cell.test.value,
                "frequency": cell.frequency,
            }
            for cell in self.cells
            if math.isclose(cell.alpha, self.config.power_alpha, rel_tol=1e-12)
        ]


class SweepRow(BaseModel):
    n: int
    k: int
    r: int
    gamma_star: float
    ratio: float


class CliConfig(BaseModel):
    """Fully resolved command-line configuration, echoed into sidecars."""

    model_config = ConfigDict(use_enum_values=True)

    subcommand: str
    input: Optional[Path] = None
    outcome: Optional[str] = None
    endogenous: List[str] = Field(default_factory=list)
    instruments: List[str] = Field(default_factory=list)
    covariates: List[str] = Field(default_factory=list)
    intercept: bool = False
    interact: bool = False
    beta0: Optional[List[float]] = None
    grid_min: Optional[List[float]] = None
    grid_max: Optional[List[float]] = None
    grid_points: int = Field(100, ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    tests: List[TestName] = Field(default_factory=lambda: [TestName.RJAR])
    gamma_floor: float = Field(1.0, gt=0)
    c_bcch: float = Field(1.1, gt=1)
    supscore_scaling: SupScoreScaling = SupScoreScaling.SCALE_CONSISTENT
    gamma: Optional[float] = Field(None, ge=0)
    seed: int = Field(0, ge=0)
    reps: int = Field(10000, ge=1)
    n: int = Field(100, ge=2)
    k: int = Field(30, ge=1)
    design: Design = Design.SPARSE
    mu2: List[float] = Field(default_factory=lambda: [0.0])
    fixed_instruments: bool = False
    n_grid: List[int] = Field(default_factory=list)
    ratio: float = Field(1.9, gt=0)
    curve: bool = False
    output: Optional[Path] = None
    size_output: Path = Path("size.csv")
    power_output: Path = Path("power.csv")
    output_dir: Path = Path(".")
    threads: int = Field(1, ge=1)
    materialize_threshold: int = Field(4096, ge=2)
