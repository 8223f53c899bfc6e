from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple, Union

FORMAT_VERSION = "1"

MaskMode = Literal['rank-mask', 'output-mask']
ClassOverride = Literal['content', 'style', 'neutral']


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- CONFIG DOCUMENTS ---

class Thresholds(StrictModel):
    t_content: float = Field(0.1, ge=0.0, le=1.0)
    t_style: float = Field(0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        # The dominant concept's merger uses the lower threshold
        if self.t_style > self.t_content:
            raise ValueError(f"t_style ({self.t_style}) must not exceed t_content ({self.t_content})")
        return self


# Published (T_content, T_style) pairs
THRESHOLD_PRESETS: Dict[str, Thresholds] = {
    'default': Thresholds(t_content=0.1, t_style=0.0),
    'mid': Thresholds(t_content=0.75, t_style=0.5),
    'high': Thresholds(t_content=1.0, t_style=0.75),
}


class MergeConfig(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION

    # --- LOSS ---
    lambda_layer_prior: float = Field(0.1, ge=0.0)
    similarity_coefficient: float = Field(0.01, ge=0.0)

    # --- OPTIMIZER ---
    learning_rate: float = Field(0.01, gt=0.0)
    steps: int = Field(100, ge=1)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    max_backtracks: int = Field(10, ge=0)
    mask_clamp: Tuple[float, float] = (0.0, 1.0)

    # --- MASKS ---
    seed: int = Field(0, ge=0)
    probe_count: int = Field(256, ge=1)
    binarize_threshold: float = Field(0.05, ge=0.0, lt=1.0)
    thresholds: Thresholds = Field(default_factory=Thresholds)
    init_strategy: Literal['layer_prior', 'ones'] = 'layer_prior'
    baseline_mode: MaskMode = 'rank-mask'

    @field_validator("mask_clamp")
    @classmethod
    def _clamp_range(cls, v):
        lo, hi = v
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"mask_clamp must satisfy 0 <= lo < hi <= 1, got {v}")
        return v


class SyntheticSpec(StrictModel):
    layers: Union[int, List[str]] = 8
    d_out: int = Field(64, ge=1)
    d_in: int = Field(64, ge=1)
    rank: int = Field(16, ge=1)
    alpha: Optional[float] = Field(None, gt=0.0)
    spectrum: Optional[List[float]] = None
    role: Literal['content', 'style', 'merged'] = 'content'

    @model_validator(mode="after")
    def _consistent(self):
        if isinstance(self.layers, int) and self.layers < 1:
            raise ValueError("layers must be positive")
        if self.rank > min(self.d_out, self.d_in):
            raise ValueError(f"rank {self.rank} exceeds min(d_out, d_in) = {min(self.d_out, self.d_in)}")
        if self.spectrum is not None:
            if len(self.spectrum) != self.rank:
                raise ValueError(f"spectrum has {len(self.spectrum)} values for rank {self.rank}")
            if any(s < 0 for s in self.spectrum):
                raise ValueError("spectrum values must be non-negative")
        return self


# --- LAYER MANIFEST ---

class ManifestEntry(StrictModel):
    name: str = Field(min_length=1)
    resolution: Optional[int] = Field(None, ge=1)
    class_override: Optional[ClassOverride] = None
    d_out: Optional[int] = Field(None, ge=1)
    d_in: Optional[int] = Field(None, ge=1)


class LayerManifest(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION
    entries: List[ManifestEntry] = []

    @field_validator("entries")
    @classmethod
    def _unique_names(cls, v):
        seen = set()
        for entry in v:
            if entry.name in seen:
                raise ValueError(f"duplicate manifest entry '{entry.name}'")
            seen.add(entry.name)
        return v

    def lookup(self) -> Dict[str, ManifestEntry]:
        return {e.name: e for e in self.entries}


# --- MERGE REPORT ---

class LayerReport(StrictModel):
    name: str
    layer_class: ClassOverride
    status: Literal['trained', 'copied']
    source: Literal['both', 'content', 'style']
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    alignment_loss: Optional[float] = None
    penalty_loss: Optional[float] = None
    rank_content: Optional[int] = None
    rank_style: Optional[int] = None
    steps_run: int = 0
    accepted_steps: int = 0
    skipped_steps: int = 0
    trainable_parameters: int = 0


class MergeReport(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION
    mode: MaskMode
    config: MergeConfig
    layers: List[LayerReport]
    copied_layers: List[str] = []
    total_trainable_parameters: int
    rank_histograms: Dict[str, Dict[str, int]]
    wall_time_seconds: Optional[float] = None


# --- MASKING THEORY ---

class BudgetSpec(StrictModel):
    d_out: int = Field(ge=1)
    d_in: int = Field(ge=1)
    r: int = Field(ge=1)
    d_s: int = Field(ge=0)
    s: int = Field(ge=0)

    @model_validator(mode="after")
    def _bounds(self):
        if self.d_s > self.d_out:
            raise ValueError(f"d_s ({self.d_s}) exceeds d_out ({self.d_out})")
        if self.s > self.r:
            raise ValueError(f"s ({self.s}) exceeds r ({self.r})")
        return self

    @property
    def f(self) -> float:
        return (self.d_out - self.d_s) / self.d_out

    @property
    def slack(self) -> int:
        """Output-mask parameters left over after rounding s down; 0 when the budgets are truly equal."""
        return self.r * (self.d_s + self.d_in) - self.s * (self.d_out + self.d_in)


class TheoremCheckResult(StrictModel):
    budget: BudgetSpec
    e_rank: float = Field(ge=0.0)
    e_out: float = Field(ge=0.0)
    e_out_lower_bound: float = Field(ge=0.0)
    method: Literal['exhaustive', 'greedy']
    holds: bool
    bound_holds: bool
    degenerate: bool


class TheoremInstance(StrictModel):
    index: int
    seed: int
    d_out: int
    d_in: int
    r: int
    d_s: int
    s: int
    budget_slack: int = Field(0, ge=0)
    e_rank: float
    e_out: float
    e_out_lower_bound: float
    method: Literal['exhaustive', 'greedy']
    holds: bool
    bound_holds: bool
    degenerate: bool
    matrix: Optional[List[List[float]]] = None


class TheoremAggregate(StrictModel):
    trials: int
    holds_fraction: float
    bound_holds_fraction: float
    counterexamples: List[int]
    bound_violations: List[int]
    degenerate: List[int]
    # counterexamples whose budgets were unequal after rounding s down
    slack_counterexamples: List[int] = Field(default_factory=list)


class TheoremReport(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION
    ensemble: Literal['gaussian', 'geometric']
    instances: List[TheoremInstance]
    aggregate: TheoremAggregate


class SweepReport(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION
    ensemble: Literal['gaussian', 'geometric']
    seed: int
    results: List[TheoremCheckResult]


class RankAnalysis(StrictModel):
    format_version: Literal["1"] = FORMAT_VERSION
    threshold: float
    histograms: Dict[str, Dict[str, int]]
    mean_ranks: Dict[str, Optional[float]]
