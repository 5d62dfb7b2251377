import hashlib
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.config import (
    ADAM_LR,
    DEFAULT_HEADS,
    DEFAULT_IMAGE_SIDE,
    DEFAULT_LAYERS,
    DEFAULT_MAX_ANSWER_LEN,
    DEFAULT_MAX_SEQ_LEN,
    DEFAULT_PATCH_SIZE,
    DEFAULT_VOCAB,
    DEFAULT_WIDTH,
    KNOWN_METHODS,
    KNOWN_METRICS,
    OUTPUT_DIR,
    SCHEMA_VERSION,
)
from app.errors import ConfigError


class Architecture(str, Enum):
    DECODER_ONLY = "decoder_only"
    PREFIX_LM = "prefix_lm"
    ENCODER_DECODER = "encoder_decoder"


class HeadScoring(str, Enum):
    MAX = "max"
    TOPK = "topk"
    AVG = "avg"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: int = Field(DEFAULT_LAYERS, ge=1)
    heads: int = Field(DEFAULT_HEADS, ge=1)
    width: int = Field(DEFAULT_WIDTH, ge=1)
    vocab_size: int = Field(DEFAULT_VOCAB, ge=1)
    image_side: int = Field(DEFAULT_IMAGE_SIDE, ge=1)
    patch_size: int = Field(DEFAULT_PATCH_SIZE, ge=1)
    channels: int = Field(3, ge=1)
    max_seq_len: int = Field(DEFAULT_MAX_SEQ_LEN, ge=2)
    max_answer_len: int = Field(DEFAULT_MAX_ANSWER_LEN, ge=1)
    arch: Architecture = Architecture.DECODER_ONLY
    seed: int = Field(0, ge=0)
    lens_normalize: bool = True  # apply the final norm before the LM head in the logit lens

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ValueError(f"image_side {self.image_side} is not divisible by patch_size {self.patch_size}")
        return self

    @property
    def grid_w(self) -> int:
        return self.image_side // self.patch_size

    @property
    def grid_h(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_visual(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


class AttributionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    relu_on_grad: bool = True
    layers_used: Optional[List[int]] = None  # None means every layer
    head_scoring_mode: HeadScoring = HeadScoring.MAX
    topk_fraction: float = Field(0.1, gt=0.0, le=1.0)
    head_filtering: bool = True
    filler_filtering: bool = True
    score_magnitude: bool = False  # score heads on |grad| instead of signed grad
    aggregate_raw: bool = False    # sum raw per-token maps instead of normalized ones
    gradcam_layer: Optional[int] = None  # None means the last layer

    @field_validator("layers_used")
    @classmethod
    def _layers_nonempty(cls, value):
        if value is not None:
            if not value:
                raise ValueError("layers_used must not be empty")
            if min(value) < 1:
                raise ValueError("layers are numbered from 1")
            value = sorted(set(value))
        return value

    def resolve_layers(self, n_layers: int) -> List[int]:
        return list(range(1, n_layers + 1)) if self.layers_used is None else list(self.layers_used)


class DatasetSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_train: int = Field(2000, ge=0)
    n_eval: int = Field(200, ge=0)
    seed: int = Field(0, ge=0)
    min_objects: int = Field(1, ge=1, le=3)
    max_objects: int = Field(3, ge=1, le=3)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_range(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        return self

    def without_path(self) -> "DatasetSpec":
        """The fields that decide which samples get generated"""
        return self.model_copy(update={"path": None})


class TrainingSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(40, ge=0)
    lr: float = Field(ADAM_LR, ge=0.0)
    batch_size: int = Field(16, ge=1)
    target_loss: Optional[float] = Field(None, gt=0.0)  # stop once the epoch mean falls below


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    model: ModelConfig = ModelConfig()
    dataset: DatasetSpec = DatasetSpec()
    training: TrainingSpec = TrainingSpec()
    attribution: AttributionConfig = AttributionConfig()
    methods: List[str] = Field(default_factory=lambda: list(KNOWN_METHODS))
    metrics: List[str] = Field(default_factory=lambda: list(KNOWN_METRICS))
    force_answer: bool = True
    exp_normalization: bool = False
    export_heatmaps: bool = True
    heatmap_scale: int = Field(1, ge=1)  # nearest-neighbour upsampling of exported PGMs
    output_dir: str = OUTPUT_DIR
    checkpoint: Optional[str] = None

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value):
        unknown = [m for m in value if m not in KNOWN_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; known: {list(KNOWN_METHODS)}")
        if not value:
            raise ValueError("at least one method is required")
        return value

    @field_validator("metrics")
    @classmethod
    def _known_metrics(cls, value):
        unknown = [m for m in value if m not in KNOWN_METRICS]
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; known: {list(KNOWN_METRICS)}")
        return value

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the run, dataset and initialisation seeds all set to ``seed``"""
        if seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {seed}")
        return self.model_copy(update={
            "seed": seed,
            "dataset": self.dataset.model_copy(update={"seed": seed}),
            "model": self.model.model_copy(update={"seed": seed}),
        })


# --- reports -----------------------------------------------------------------

class MetricRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: int
    method: str
    metric: str
    value: float


class MetricAggregate(BaseModel):
    method: str
    metric: str
    mean: float
    count: int


class MetricReport(BaseModel):
    schema_version: int = SCHEMA_VERSION
    model_arch: str
    config_digest: str
    rows: List[MetricRow] = Field(default_factory=list)
    aggregates: List[MetricAggregate] = Field(default_factory=list)
    flagged_samples: Dict[int, List[str]] = Field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: List[MetricRow], model_arch: str, config_digest: str,
                  flagged_samples: Optional[Dict[int, List[str]]] = None) -> "MetricReport":
        """Sort rows and compute per (method, metric) means in a fixed order"""
        ordered = sorted(rows, key=lambda r: (r.sample_id, r.method, r.metric))
        sums: Dict[tuple, List[float]] = {}
        for row in ordered:
            sums.setdefault((row.method, row.metric), []).append(row.value)
        aggregates = [
            MetricAggregate(method=method, metric=metric, mean=sum(values) / len(values), count=len(values))
            for (method, metric), values in sorted(sums.items())
        ]
        return cls(model_arch=model_arch, config_digest=config_digest, rows=ordered,
                   aggregates=aggregates, flagged_samples=dict(sorted((flagged_samples or {}).items())))

    def mean(self, method: str, metric: str) -> float:
        for agg in self.aggregates:
            if agg.method == method and agg.metric == metric:
                return agg.mean
        raise KeyError(f"no aggregate for {method}/{metric}")

    def summary(self, method: str) -> Dict[str, float]:
        return {agg.metric: agg.mean for agg in self.aggregates if agg.method == method}


# --- on-disk manifests ---------------------------------------------------------------

class ObjectEntry(BaseModel):
    class_name: str
    shape: str
    color: str
    row: int
    col: int
    size: int


class SampleEntry(BaseModel):
    index: int
    seed: int
    objects: List[ObjectEntry]
    prompt: List[str]
    answer: List[str]
    filler_mask: List[int]
    content_objects: List[int]  # object index per answer position, -1 for filler
    image_offset: int
    image_length: int
    mask_offset: int
    mask_length: int


class DatasetManifest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    image_side: int
    channels: int
    spec: Optional[DatasetSpec] = None  # generating spec, path cleared
    count: int
    entries: List[SampleEntry]


class ParameterEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int
    length: int


class TrainingRecord(BaseModel):
    """What a checkpoint was trained on"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int
    training: TrainingSpec
    dataset: DatasetSpec


class CheckpointHeader(BaseModel):
    schema_version: int = SCHEMA_VERSION
    config: ModelConfig
    record: Optional[TrainingRecord] = None
    parameters: List[ParameterEntry]
