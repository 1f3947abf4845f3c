"""Pipeline configuration schema (YAML or JSON on disk)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .domainroute import DomainLabel, RoutePlan, Strategy, default_route_table
from .errors import ConfigInvalid

OUTPUT_ROOT_ENV = "DIARKIT_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSession(_Strict):
    recording_id: str
    num_speakers: int = Field(2, ge=1)
    duration: float = Field(120.0, gt=0)
    overlap_ratio: float = Field(0.1, ge=0, lt=1)
    noise_level: float = Field(0.1, ge=0)
    seed: int = 0
    domain: Optional[DomainLabel] = None
    embed_dim: int = Field(128, ge=2)


class FileRecording(_Strict):
    recording_id: str
    embeddings: Path
    features: Path
    in_plda: Path
    out_plda: Path
    reference: Optional[Path] = None
    sad_posteriors: list[Path] = []
    domain: Optional[DomainLabel] = None


class Inputs(_Strict):
    sessions: list[SyntheticSession] = []
    recordings: list[FileRecording] = []
    tokens: Optional[Path] = None

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [s.recording_id for s in self.sessions] + [r.recording_id for r in self.recordings]
        if not ids:
            raise ValueError("at least one session or recording is required")
        if len(set(ids)) != len(ids):
            raise ValueError("recording ids must be unique")
        return self


class DomainConfig(_Strict):
    classifier: Literal["oracle", "centroid"] = "oracle"
    chunk: float = Field(10.0, gt=0)
    default: DomainLabel = DomainLabel.MEETING


class RouteEntry(_Strict):
    strategy: Strategy
    iteration_count: int = Field(0, ge=0)
    fusion_members: list[str] = []


class ClusteringConfig(_Strict):
    alpha: float = Field(0.57, ge=0, le=1)
    threshold_bias: float = 0.5
    target_energy: float = Field(0.3, gt=0, le=1)
    max_iters: int = Field(7, ge=1)
    smoothing_factor: float = Field(4.0, gt=0)
    lda_dim: int = Field(512, ge=1)
    loop_probability: float = Field(0.99, gt=0, lt=1)


class SadConfig(_Strict):
    weights: Optional[list[float]] = None
    threshold: float = Field(0.5, gt=0, lt=1)
    min_speech: float = Field(0.2, ge=0)
    min_silence: float = Field(0.3, ge=0)
    include_energy: bool = False


class BackendConfig(_Strict):
    name: Literal["oracle", "noisy-oracle", "external"] = "oracle"
    fidelity: float = Field(0.6, ge=0, le=1)
    adapt_step: float = Field(0.2, ge=0, le=1)
    max_flip: float = Field(0.3, ge=0, le=1)
    sad_fidelity: Optional[float] = Field(None, ge=0, le=1)
    path: Optional[Path] = None

    @model_validator(mode="after")
    def _external_needs_path(self):
        if self.name == "external" and self.path is None:
            raise ValueError("external backend requires 'path'")
        return self


class AdaptConfig(_Strict):
    preset: Literal["desk", "full"] = "desk"
    mixtures_per_stage: int = Field(50, ge=1)
    mixture_duration: float = Field(4.0, gt=0)
    snr_range: tuple[float, float] = (-5.0, 5.0)
    dialogue_duration: float = Field(600.0, gt=0)
    pause_rate: float = Field(0.3, ge=0, le=1)
    overlap_rate: float = Field(0.1, ge=0, le=1)
    num_nodes: int = Field(8, ge=1)
    activity_threshold: float = Field(0.5, gt=0, lt=1)
    median_filter: int = Field(11, ge=1)

    @field_validator("median_filter")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("median_filter must be odd")
        return v

    @model_validator(mode="after")
    def _apply_preset(self):
        if self.preset == "full":
            from .adapt import FULL_DIALOGUE_SECONDS, FULL_MIXTURES_PER_SESSION

            self.mixtures_per_stage = FULL_MIXTURES_PER_SESSION
            self.dialogue_duration = FULL_DIALOGUE_SECONDS
        return self


class FusionSettings(_Strict):
    rank_exponent: float = Field(1.0, ge=0)
    speaker_count_rounding: Literal["nearest-even", "floor", "ceil"] = "nearest-even"
    epoch_fusion: bool = True


class PostprocConfig(_Strict):
    laughter_neighborhood: float = Field(2.0, ge=0)
    token: str = "[laugh]"


class PipelineConfig(_Strict):
    output_dir: Optional[Path] = None
    seed: int = 0
    track: Literal[1, 2] = 1
    workers: Optional[int] = Field(None, ge=1)
    frame_step: float = Field(0.01, gt=0)
    inputs: Inputs
    domain: DomainConfig = DomainConfig()
    routing: dict[DomainLabel, RouteEntry] = {}
    itsvad_iterations: int = Field(1, ge=1)
    iss_stages: int = Field(2, ge=1)
    clustering: ClusteringConfig = ClusteringConfig()
    sad: SadConfig = SadConfig()
    backend: BackendConfig = BackendConfig()
    adapt: AdaptConfig = AdaptConfig()
    fusion: FusionSettings = FusionSettings()
    postproc: PostprocConfig = PostprocConfig()

    def route_table(self) -> dict[DomainLabel, RoutePlan]:
        table = default_route_table(self.itsvad_iterations, self.iss_stages)
        for dom, entry in self.routing.items():
            table[dom] = RoutePlan(entry.strategy, entry.iteration_count, tuple(entry.fusion_members))
        return table

    def resolved_output_dir(self) -> Path:
        if self.output_dir is not None:
            return self.output_dir
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "diarkit_out"))


def _key_path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigInvalid(_key_path(err["loc"]), err["msg"]) from None
    except ValueError as exc:
        raise ConfigInvalid("<root>", str(exc)) from None
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    return cfg


def _resolve_paths(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    def fix(p: Path | None) -> Path | None:
        return None if p is None or p.is_absolute() else base / p

    for rec in cfg.inputs.recordings:
        for name in ("embeddings", "features", "in_plda", "out_plda", "reference"):
            value = getattr(rec, name)
            if value is not None and not value.is_absolute():
                setattr(rec, name, base / value)
        rec.sad_posteriors = [p if p.is_absolute() else base / p for p in rec.sad_posteriors]
    if cfg.inputs.tokens is not None:
        cfg.inputs.tokens = fix(cfg.inputs.tokens) or cfg.inputs.tokens
    if cfg.backend.path is not None:
        cfg.backend.path = fix(cfg.backend.path) or cfg.backend.path
    if cfg.output_dir is not None and not cfg.output_dir.is_absolute():
        cfg.output_dir = base / cfg.output_dir
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(str(path), "config file not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigInvalid(str(path), f"unparseable: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "config must be a mapping")
    return parse_config(data, path.parent)
