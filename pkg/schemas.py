from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from config import DEFAULT_SEED

DeltaScheme = Literal["equal", "trace_inverse", "blup_optimal"]
ErrorKind = Literal["none", "normal", "t", "uniform_add", "gamma_mult", "uniform_mult"]
TreatmentForm = Literal["linear", "quadratic", "exponential", "mixed"]
TreatmentFreeForm = Literal["linear", "quadratic", "cubic", "exponential", "complex"]
ProxyMode = Literal["first_proxy", "mean_proxies"]
Family = Literal["one_stage", "multistage", "coverage", "prediction", "stard_like"]
PredictMode = Literal["one-at-a-time", "pooled", "true"]


# Data and model sections

class ProxyGroupConfig(BaseModel):
    covariates: List[str]
    proxies: List[List[str]]
    z_columns: List[str] = []

    @field_validator("proxies", mode="before")
    @classmethod
    def scalar_proxies(cls, value):
        # ["X_p1", "X_p2"] is shorthand for one-column proxies
        if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
            return [[v] for v in value]
        return value

    @model_validator(mode="after")
    def proxies_match_covariates(self):
        for p in self.proxies:
            if len(p) != len(self.covariates):
                raise ValueError(f"proxy {p} does not match covariates {self.covariates}")
        return self


class DataConfig(BaseModel):
    path: Optional[str] = None
    proxy_groups: List[ProxyGroupConfig] = []
    error_free_columns: List[str] = []
    treatment_columns: List[str]
    outcome_column: str
    oracle_columns: List[str] = []
    column_stage: Dict[str, int] = {}


class StageModelConfig(BaseModel):
    treatment: str
    treatment_free: str
    blip: str


class ModelConfig(BaseModel):
    stages: List[StageModelConfig]
    formulation: Literal["regret", "blip"] = "regret"


class CalibrationConfig(BaseModel):
    enabled: bool = True
    delta_scheme: DeltaScheme = "trace_inverse"
    conditional: bool = False


# Bootstrap

class ZetaGrid(BaseModel):
    start: float = Field(0.025, gt=0)
    step: float = Field(0.025, gt=0)
    max: float = Field(0.30, gt=0)

    @model_validator(mode="after")
    def ordered(self):
        if self.max < self.start:
            raise ValueError("zeta_grid.max must not be below zeta_grid.start")
        return self

    def values(self) -> List[float]:
        count = int((self.max - self.start) / self.step + 1e-9) + 1
        return [round(self.start + i * self.step, 10) for i in range(count)]


class BootstrapConfig(BaseModel):
    B: int = Field(1000, ge=1)
    B1: int = Field(100, ge=1)
    B2: int = Field(250, ge=1)
    Bp: int = Field(100, ge=1)
    zeta_grid: ZetaGrid = ZetaGrid()
    level: float = Field(0.95, gt=0, lt=1)
    p_level: float = Field(0.05, gt=0, lt=1)
    zeta: Optional[float] = Field(None, gt=0)
    p_hat: Optional[float] = Field(None, ge=0, le=1)
    standard: bool = False
    seed: int = DEFAULT_SEED
    threads: Optional[int] = Field(None, ge=1)


# Simulation

class ErrorModelSpec(BaseModel):
    kind: ErrorKind
    variance: Optional[float] = None
    df: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    shape: Optional[float] = None
    rate: Optional[float] = None

    @model_validator(mode="after")
    def valid_parameters(self):
        if self.kind == "normal" and not (self.variance and self.variance > 0):
            raise ValueError("normal error needs variance > 0")
        if self.kind == "t" and not (self.df and self.df > 2):
            raise ValueError("t error needs df > 2")
        if self.kind in ("uniform_add", "uniform_mult"):
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError(f"{self.kind} error needs lo < hi")
        if self.kind == "gamma_mult":
            if not (self.shape and self.shape > 0 and self.rate and self.rate > 0):
                raise ValueError("gamma_mult error needs shape > 0 and rate > 0")
        return self

    @property
    def label(self) -> str:
        return {
            "none": "None",
            "normal": "Normal",
            "t": "Approx. Normal",
            "uniform_add": "Uniform",
            "gamma_mult": "Gamma",
            "uniform_mult": "Uniform",
        }[self.kind]

    @classmethod
    def normal(cls, variance: float) -> "ErrorModelSpec":
        return cls(kind="normal", variance=variance)

    @classmethod
    def t(cls, df: float) -> "ErrorModelSpec":
        return cls(kind="t", df=df)

    @classmethod
    def uniform_add(cls, lo: float, hi: float) -> "ErrorModelSpec":
        return cls(kind="uniform_add", lo=lo, hi=hi)

    @classmethod
    def gamma_mult(cls, shape: float = 1.0, rate: float = 1.0) -> "ErrorModelSpec":
        return cls(kind="gamma_mult", shape=shape, rate=rate)

    @classmethod
    def uniform_mult(cls, lo: float = 0.5, hi: float = 1.5) -> "ErrorModelSpec":
        return cls(kind="uniform_mult", lo=lo, hi=hi)

    @classmethod
    def none(cls) -> "ErrorModelSpec":
        return cls(kind="none")


class ScenarioConfig(BaseModel):
    family: Family = "multistage"
    number: Optional[int] = None
    row: Optional[str] = None
    n: int = Field(1000, ge=1)
    replicates: int = Field(100, ge=1)
    # errors[stage][proxy]
    errors: List[List[ErrorModelSpec]] = [
        [ErrorModelSpec.normal(0.25), ErrorModelSpec.normal(0.25)],
        [ErrorModelSpec.normal(0.25), ErrorModelSpec.normal(0.25)],
    ]
    treatment_forms: List[TreatmentForm] = ["linear", "linear"]
    alpha: List[List[float]] = [[0.0, 1.0], [0.0, 1.0]]
    treatment_free_form: TreatmentFreeForm = "linear"
    psi: List[float] = [1.0, 1.0, 1.0, 1.0]
    proxy_modes: List[ProxyMode] = ["first_proxy", "first_proxy"]
    noise_variance: float = Field(1.0, ge=0)
    delta_scheme: DeltaScheme = "trace_inverse"
    seed: int = DEFAULT_SEED

    @field_validator("number")
    @classmethod
    def known_number(cls, value, info):
        if value is None:
            return value
        family = info.data.get("family")
        limits = {"multistage": 5, "coverage": 3}
        if family in limits and not 1 <= value <= limits[family]:
            raise ValueError(f"{family} scenarios are numbered 1..{limits[family]}")
        return value

    @field_validator("alpha")
    @classmethod
    def alpha_pairs(cls, value):
        for pair in value:
            if len(pair) != 2:
                raise ValueError("alpha entries are (intercept, slope) pairs")
        return value


class SimulateConfig(BaseModel):
    scenario: str = "multistage-1"
    row: Optional[str] = None
    n: Optional[int] = Field(None, ge=1)
    replicates: Optional[int] = Field(None, ge=1)
    overrides: Dict[str, Any] = {}
    methods: List[str] = ["nn", "mn_0.05", "mn_0.1"]
    predict_n: int = Field(5000, ge=1)


class PredictConfig(BaseModel):
    mode: PredictMode = "pooled"
    corrector_path: Optional[str] = None
    rule_path: Optional[str] = None
    available_proxies: Optional[List[int]] = None


class RunConfig(BaseModel):
    data: Optional[DataConfig] = None
    model: Optional[ModelConfig] = None
    calibration: CalibrationConfig = CalibrationConfig()
    bootstrap: BootstrapConfig = BootstrapConfig()
    simulate: SimulateConfig = SimulateConfig()
    predict: PredictConfig = PredictConfig()
    seed: int = DEFAULT_SEED
    threads: Optional[int] = Field(None, ge=1)


# Artifacts

class StageRuleArtifact(BaseModel):
    stage: int
    treatment_column: str
    blip_formula: str
    terms: List[str]
    psi: List[float]


class DecisionRuleArtifact(BaseModel):
    tool: str
    version: str
    formulation: str
    stages: List[StageRuleArtifact]
