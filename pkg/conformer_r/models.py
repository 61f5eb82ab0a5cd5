"""
Pydantic models for run configuration and manifests.
"""
import hashlib
import json
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

FEATURE_DIMS = 80


class FrontendConfig(BaseModel):
    """Fbank extraction parameters."""

    sample_rate_hz: int = Field(16000, gt=0)
    window_ms: float = Field(25.0, gt=0)
    hop_ms: float = Field(10.0, gt=0)
    n_fft: int = Field(512, gt=0)
    n_mels: int = Field(FEATURE_DIMS, gt=0)
    fmin_hz: float = Field(20.0, ge=0)
    fmax_hz: float = Field(7600.0, gt=0)
    log_floor: float = Field(1e-10, gt=0)
    preemphasis: float = Field(0.97, ge=0, lt=1)
    cmvn: bool = True

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_band(self) -> "FrontendConfig":
        if not self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("frequency band must satisfy fmin_hz < fmax_hz <= sample_rate_hz / 2")
        if self.n_mels != FEATURE_DIMS:
            raise ValueError(f"n_mels must equal the feature width {FEATURE_DIMS}")
        if self.window_samples < 1 or self.hop_samples < 1:
            raise ValueError("window_ms and hop_ms must each span at least one sample")
        if self.window_samples > self.n_fft:
            raise ValueError("window_ms is longer than n_fft samples")
        return self

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))


class AttentionConfig(BaseModel):
    """Multi-head attention geometry."""

    d_model: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    dropout_p: float = Field(0.0, ge=0, lt=1)

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_heads(self) -> "AttentionConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


class ConformerConfig(BaseModel):
    """Encoder hyperparameters (desk-scale defaults; 8 blocks / d_model 512 at full scale)."""

    n_blocks: int = Field(2, gt=0)
    d_model: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    ff_expansion: int = Field(4, gt=0)
    depthwise_kernel: int = Field(15, gt=0)
    dropout_p: float = Field(0.1, ge=0, lt=1)
    attention_dropout_p: float = Field(0.0, ge=0, lt=1)
    subsample_factor: Literal[4] = 4
    subsample_channels: Optional[int] = Field(None, gt=0)

    model_config = {"extra": "forbid"}

    @field_validator("depthwise_kernel")
    @classmethod
    def validate_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("depthwise_kernel must be odd")
        return v

    @model_validator(mode="after")
    def check_heads(self) -> "ConformerConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, dropout_p=self.attention_dropout_p)

    @property
    def channels(self) -> int:
        return self.subsample_channels or self.d_model


class DecoderConfig(BaseModel):
    """Transformer decoder hyperparameters (4 layers at full scale)."""

    n_layers: int = Field(2, gt=0)
    d_model: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    ff_expansion: int = Field(4, gt=0)
    dropout_p: float = Field(0.1, ge=0, lt=1)
    attention_dropout_p: float = Field(0.0, ge=0, lt=1)

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_heads(self) -> "DecoderConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, dropout_p=self.attention_dropout_p)


class LossWeights(BaseModel):
    """R-Drop and hybrid CTC/AED weighting."""

    alpha: float = Field(0.3, ge=0)
    beta: float = Field(0.7, ge=0, le=1)
    smoothing: float = Field(0.1, ge=0, lt=1)
    kl_form: Literal["convex", "additive"] = "convex"
    rdrop: bool = True

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_alpha(self) -> "LossWeights":
        if self.kl_form == "convex" and self.alpha > 1:
            raise ValueError("alpha must be in [0, 1] for the convex R-Drop form")
        return self


class ScheduleConfig(BaseModel):
    """Warmup learning-rate schedule (d_m 512 / warmup 12000 at full scale)."""

    k: float = Field(1.0, gt=0)
    d_m: int = Field(64, gt=0)
    warmup_steps: int = Field(200, gt=0)

    model_config = {"extra": "forbid"}


class BatchingConfig(BaseModel):
    """Frame-budget batching (batch_bins 150000 / accum 4 at full scale)."""

    batch_bins: int = Field(4000, gt=0)
    accum_steps: int = Field(1, gt=0)

    model_config = {"extra": "forbid"}


class SeedConfig(BaseModel):
    """Root seed for initialization, dropout masks and batch shuffling."""

    seed: int = Field(0, ge=0, lt=2 ** 63)

    model_config = {"extra": "forbid"}


class RunConfig(BaseModel):
    """Complete, validated configuration of one experiment."""

    experiment: str = Field(..., min_length=1)
    output_dir: str = "exp"
    epochs: int = Field(10, ge=0)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    encoder: ConformerConfig = Field(default_factory=ConformerConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    batching: BatchingConfig = Field(default_factory=BatchingConfig)
    seed: SeedConfig = Field(default_factory=SeedConfig)

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_widths(self) -> "RunConfig":
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError(
                f"encoder.d_model {self.encoder.d_model} != decoder.d_model {self.decoder.d_model}"
            )
        return self

    def hashed_view(self) -> Dict[str, Any]:
        """The part of the config that determines model and training behavior."""
        return self.model_dump(exclude={"experiment", "output_dir", "epochs"})

    def config_hash(self) -> str:
        canonical = json.dumps(self.hashed_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_diff(old: Dict[str, Any], new: Dict[str, Any], prefix: str = "") -> List[str]:
    """Dotted-key differences between two config dicts."""
    lines: List[str] = []
    for key in sorted(set(old) | set(new)):
        path = f"{prefix}{key}"
        a, b = old.get(key), new.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            lines.extend(config_diff(a, b, path + "."))
        elif a != b:
            lines.append(f"{path}: {a!r} -> {b!r}")
    return lines


class ManifestRow(BaseModel):
    """One utterance: audio or feature path plus transcript."""

    utt_id: str = Field(..., min_length=1)
    path: str = Field(..., min_length=1)
    text: str = ""
    frames: Optional[int] = Field(None, ge=1)

    model_config = {"extra": "forbid"}
