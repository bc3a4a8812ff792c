import json
from pathlib import Path
from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Any, Literal, Tuple


# Feature extraction
class FeatureConfig(BaseModel):
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    clip_seconds: float = 10.0
    fmin: float = 0.0
    fmax: Optional[float] = None
    energy_floor: float = 1e-10

    @model_validator(mode="after")
    def check_timing(self):
        if not (self.window_ms > self.hop_ms > 0):
            raise ValueError("window_ms > hop_ms > 0 required")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.sample_rate <= 0 or self.clip_seconds <= 0:
            raise ValueError("sample_rate and clip_seconds must be positive")
        return self

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def clip_samples(self) -> int:
        return int(round(self.sample_rate * self.clip_seconds))

    @property
    def n_frames(self) -> int:
        """Frames per clip after length normalization (1000 for 10 s / 10 ms)"""
        return int(round(self.clip_seconds * 1000.0 / self.hop_ms))


# Backbone
class BackboneConfig(BaseModel):
    channels: List[int] = Field(default_factory=lambda: [64, 64, 128, 128])
    conv_kernel: int = 3
    pool_kernel: int = 3
    embedding_dim: int = 128
    input_frames: int = 1000
    input_mels: int = 64

    @model_validator(mode="after")
    def check_shape(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("channels must be non-empty positive counts")
        if self.conv_kernel < 1 or self.pool_kernel < 1:
            raise ValueError("kernel sizes must be >= 1")
        # global average pooling: the embedding is the last block's channels
        if self.embedding_dim != self.channels[-1]:
            raise ValueError("embedding_dim must equal the last block's channel count")
        return self

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @classmethod
    def for_features(cls, features: FeatureConfig, **overrides) -> "BackboneConfig":
        return cls(input_frames=features.n_frames, input_mels=features.n_mels, **overrides)


# Episodes
class EpisodeConfig(BaseModel):
    ways: int = 5
    shots: int = 1
    query_positives: int = 15
    neg_support: int = 10
    neg_query: int = 150
    seed: int = 0

    @field_validator("ways", "shots", "query_positives", "neg_support", "neg_query")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("episode counts must be >= 1")
        return value

    @classmethod
    def audioset(cls, shots: int, seed: int = 0) -> "EpisodeConfig":
        """5-way setting used for AudioSet: 10/50 support negatives for 1/5 shots"""
        return cls(ways=5, shots=shots, query_positives=15,
                   neg_support=10 if shots == 1 else 50, neg_query=150, seed=seed)


# Training
OptimizerName = Literal["sgd", "momentum", "adam"]
Reduction = Literal["mean", "sum"]


class PretrainConfig(BaseModel):
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: OptimizerName = "adam"
    holdout_fraction: float = 0.1
    patience: int = 5
    pos_weight: float = 1.0

    @field_validator("holdout_fraction")
    @classmethod
    def check_fraction(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")
        return value


class FinetuneConfig(BaseModel):
    epochs: int = 20
    lr_all: float = 1e-3
    lr_linear: float = 1e-2
    optimizer: OptimizerName = "adam"
    pos_weight: float = 1.0


class NNConfig(BaseModel):
    metric: Literal["l2", "cosine", "dot", "sqeuclidean"] = "cosine"
    select_on_validation: bool = False


class ProtoConfig(BaseModel):
    metric: Literal["l2", "cosine", "dot", "sqeuclidean"] = "cosine"
    distance_mode: Literal["average", "prototype"] = "average"


class MetaOptConfig(BaseModel):
    lam: float = 0.1
    lam_grid: List[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    select_lambda: bool = False
    max_iter: int = 1000
    tol: float = 1e-6
    jitter: float = 1e-8

    @field_validator("lam")
    @classmethod
    def positive_lambda(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("lambda must be > 0")
        return value


class MamlConfig(BaseModel):
    inner_steps: int = 5
    inner_lr: float = 0.01
    first_order: bool = False

    @field_validator("inner_steps")
    @classmethod
    def non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("inner_steps must be >= 0")
        return value


class MetaTrainConfig(BaseModel):
    episodes: int = 5000
    validate_every: int = 500
    episode_batch: int = 1
    lr: float = 1e-3
    optimizer: OptimizerName = "adam"
    pos_weight: float = 1.0
    reduction: Reduction = "mean"
    weight_negatives: bool = False


class EvaluationConfig(BaseModel):
    pooled_auc: bool = False
    workers: int = 1


MethodName = Literal["ft-all", "ft-linear", "nn", "proto", "metaopt", "maml"]
SUPERVISED_METHODS: Tuple[str, ...] = ("ft-all", "ft-linear", "nn")
META_METHODS: Tuple[str, ...] = ("proto", "metaopt", "maml")
ALL_METHODS: Tuple[str, ...] = SUPERVISED_METHODS + META_METHODS


class SyntheticConfig(BaseModel):
    n_events: int = 20
    clips_per_event: int = 40
    cooccurrence_rate: float = 0.0
    n_domains: int = 2
    noise_std: float = 1.0
    pattern_gain: float = 3.0


class ExperimentSpec(BaseModel):
    name: str = "main"
    split: str = "random"
    shots: List[int] = Field(default_factory=lambda: [1, 5])
    methods: List[MethodName] = Field(default_factory=lambda: list(ALL_METHODS))
    init: List[Literal["random", "pretrained"]] = Field(default_factory=lambda: ["random"])
    class_sizes: Tuple[int, int, int] = (99, 21, 21)
    ways: int = 5
    query_positives: int = 15
    neg_support: Optional[Dict[int, int]] = None
    neg_query: int = 150
    n_train_tasks: int = 5000
    n_val_tasks: int = 200
    n_test_tasks: int = 200
    seeds: List[int] = Field(default_factory=lambda: [0])
    dataset: Literal["disk", "synthetic"] = "disk"

    @field_validator("split")
    @classmethod
    def check_split(cls, value: str) -> str:
        if value != "random" and not (value.startswith("domain:") and len(value) > len("domain:")):
            raise ValueError("split must be 'random' or 'domain:<id>'")
        return value

    @field_validator("shots")
    @classmethod
    def check_shots(cls, value: List[int]) -> List[int]:
        if not value or any(s < 1 for s in value):
            raise ValueError("shots must be a non-empty list of positive counts")
        return value

    @model_validator(mode="after")
    def check_combination(self):
        if "pretrained" in self.init and not any(m in META_METHODS for m in self.methods):
            raise ValueError("pretrained init only applies to meta-learners")
        return self

    @property
    def target_domain(self) -> Optional[str]:
        return self.split.split(":", 1)[1] if self.split.startswith("domain:") else None

    def episode_config(self, shots: int, seed: int = 0) -> EpisodeConfig:
        negatives = self.neg_support or {1: 10, 5: 50}
        neg_support = negatives.get(shots, 10 * shots)
        return EpisodeConfig(ways=self.ways, shots=shots, query_positives=self.query_positives,
                             neg_support=neg_support, neg_query=self.neg_query, seed=seed)


class RunConfig(BaseModel):
    """Every knob of a run; echoed as resolved_config.json"""
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    nn: NNConfig = Field(default_factory=NNConfig)
    proto: ProtoConfig = Field(default_factory=ProtoConfig)
    metaopt: MetaOptConfig = Field(default_factory=MetaOptConfig)
    maml: MamlConfig = Field(default_factory=MamlConfig)
    meta_train: MetaTrainConfig = Field(default_factory=MetaTrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    experiment: ExperimentSpec = Field(default_factory=ExperimentSpec)
    accuracy_threshold: float = 0.8

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        return cls.model_validate(json.loads(Path(path).read_text()))

    def dump(self, path: str):
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")


# API payloads
class SampleRequest(BaseModel):
    data_dir: Optional[str] = None
    split: str = "random"
    ways: int = 5
    shots: int = 1
    tasks: int = 200
    seed: int = 0
    partition: Literal["train", "val", "test", "held_out"] = "test"
    out: str


class ExperimentRequest(BaseModel):
    preset: Literal["main", "domain", "pretrain", "desk", "desk-domain"] = "desk"
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    config_path: Optional[str] = None


# Response Models
class SuccessResponse(BaseModel):
    status: str = "success"
    message: str
    data: Optional[Any] = None
