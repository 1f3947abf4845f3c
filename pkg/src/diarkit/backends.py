"""Backend selection, plus file-exchange backends for externally computed model outputs.

External files use the SAD posterior frame format:
``<dir>/<rec>.stream0.post`` and ``<dir>/<rec>.stream1.post`` for separation,
``<dir>/<rec>.<speaker>.post`` for target-speaker activity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import SessionFrames, SpeakerPrior, SpeakerProfile
from .clustering import Embedding
from .errors import EstimatorFailure, SeparatorFailure
from .formats import spans_membership
from .sad import parse_stream


def _read_row(path: Path, n_frames: int) -> np.ndarray:
    _, _, values = parse_stream(path.read_text())
    if values.size != n_frames:
        raise ValueError(f"{path}: {values.size} frames, expected {n_frames}")
    return np.clip(values, 0.0, 1.0)


@dataclass(frozen=True)
class ExternalSeparator:
    path: Path

    def separate(self, frames: SessionFrames) -> np.ndarray:
        try:
            return np.stack(
                [_read_row(self.path / f"{frames.recording_id}.stream{k}.post", frames.num_frames) for k in range(2)]
            )
        except (OSError, ValueError) as exc:
            raise SeparatorFailure(str(exc)) from exc

    def adapt(self, mixtures) -> "ExternalSeparator":
        return self


@dataclass(frozen=True)
class ExternalActivityEstimator:
    """Reads one posterior file per profile; profiles without a file (dummies) are silent."""

    path: Path

    def estimate(self, frames: SessionFrames, profiles: Sequence[SpeakerProfile]) -> np.ndarray:
        rows = []
        for p in profiles:
            f = self.path / f"{frames.recording_id}.{p.speaker_id}.post"
            try:
                rows.append(_read_row(f, frames.num_frames) if f.exists() else np.zeros(frames.num_frames))
            except ValueError as exc:
                raise EstimatorFailure(str(exc)) from exc
        return np.stack(rows)

    def adapt(self, sessions) -> "ExternalActivityEstimator":
        return self


@dataclass(frozen=True)
class EmbeddingProfileExtractor:
    """Profile = normalized mean of the embeddings centred inside the speaker's prior segments."""

    embeddings: tuple[Embedding, ...]

    def extract(self, frames: SessionFrames, prior: SpeakerPrior) -> list[SpeakerProfile]:
        if not self.embeddings:
            raise ValueError("no embeddings to build profiles from")
        X = np.stack([e.vector for e in self.embeddings])
        mids = np.array([(e.source_interval.onset + e.source_interval.offset) / 2 for e in self.embeddings])
        out = []
        for spk in prior.speakers:
            inside = spans_membership(prior.spans(spk), mids)
            vec = X[inside].mean(axis=0) if inside.any() else np.zeros(X.shape[1])
            n = np.linalg.norm(vec)
            out.append(SpeakerProfile(spk, tuple((vec / n if n > 0 else vec).tolist()), prior.total_voice(spk)))
        return out
