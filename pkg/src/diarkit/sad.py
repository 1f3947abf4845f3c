"""Framewise speech activity detection and multi-system posterior fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyStream, LengthMismatch, MalformedLine, StepMismatch
from .formats import RttmDocument, Turn, smooth_runs

SPEECH_LABEL = "speech"


@dataclass(frozen=True, eq=False)
class SadPosterior:
    recording_id: str
    frame_step: float
    speech_prob: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.speech_prob, dtype=float).ravel()
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ValueError("speech probabilities must lie in [0, 1]")
        if self.frame_step <= 0:
            raise ValueError("frame_step must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "speech_prob", p)

    def __len__(self) -> int:
        return self.speech_prob.size

    def __eq__(self, other):
        if not isinstance(other, SadPosterior):
            return NotImplemented
        return (
            self.recording_id == other.recording_id
            and self.frame_step == other.frame_step
            and self.start == other.start
            and np.array_equal(self.speech_prob, other.speech_prob)
        )


@dataclass(frozen=True)
class SadFusionConfig:
    weights: tuple[float, ...] | None = None  # None: equal weights
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, float)
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("weights must be non-negative and not all zero")
        if not 0 < self.decision_threshold < 1:
            raise ValueError("decision_threshold must be in (0, 1)")


def energy_sad(energy: Sequence[float], frame_step: float, recording_id: str = "rec") -> SadPosterior:
    """Logistic of the per-recording z-scored log energy."""
    e = np.asarray(energy, dtype=float).ravel()
    if e.size == 0:
        raise EmptyStream("empty feature stream")
    log_e = np.log(np.maximum(e, 1e-12))
    std = log_e.std()
    z = np.zeros_like(log_e) if std <= 1e-12 else (log_e - log_e.mean()) / std
    return SadPosterior(recording_id, frame_step, 1.0 / (1.0 + np.exp(-z)))


def fuse_sad(systems: Sequence[SadPosterior], config: SadFusionConfig = SadFusionConfig()) -> SadPosterior:
    """Weighted average of speech posteriors (a majority vote for binary inputs)."""
    if not systems:
        raise EmptyStream("no systems to fuse")
    first = systems[0]
    for s in systems[1:]:
        if len(s) != len(first):
            raise LengthMismatch(f"{s.recording_id}: {len(s)} frames vs {len(first)}")
        if not math.isclose(s.frame_step, first.frame_step) or s.recording_id != first.recording_id:
            raise StepMismatch("systems must share recording and frame step")
    w = np.ones(len(systems)) if config.weights is None else np.asarray(config.weights, float)
    if w.size != len(systems):
        raise LengthMismatch("one weight per system required")
    P = np.stack([s.speech_prob for s in systems])
    # offsets from the first system keep identical inputs bit-exact
    fused = P[0] + (w[:, None] * (P - P[0])).sum(axis=0) / w.sum()
    return SadPosterior(first.recording_id, first.frame_step, np.clip(fused, 0.0, 1.0), first.start)


def binarize_and_smooth(
    post: SadPosterior,
    threshold: float = 0.5,
    min_speech: float = 0.2,
    min_silence: float = 0.3,
    speaker_id: str = SPEECH_LABEL,
) -> RttmDocument:
    """Threshold (strictly above), bridge silences shorter than ``min_silence``,
    then drop speech runs shorter than ``min_speech``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    step = post.frame_step
    bridge_max = max(0, math.ceil(min_silence / step - 1e-9) - 1)
    min_len = math.ceil(min_speech / step - 1e-9)
    runs = smooth_runs(post.speech_prob > threshold, bridge_max, min_len)
    return RttmDocument(
        tuple(Turn.make(post.recording_id, speaker_id, post.start + s * step, post.start + e * step) for s, e in runs)
    )


def frame_error(hyp: np.ndarray, ref: np.ndarray) -> float:
    return float(np.mean(np.asarray(hyp, bool) != np.asarray(ref, bool)))


# ---------------------------------------------------------------- posterior files


def write_stream(recording_id: str, frame_step: float, values, fmt: str = ".6f") -> str:
    """Frame-stream file: header ``<rec> <step>`` then one value per line."""
    lines = [f"{recording_id} {frame_step!r}"]
    lines.extend(format(float(v), fmt) for v in values)
    return "\n".join(lines) + "\n"


def parse_stream(text: str) -> tuple[str, float, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyStream("empty posterior file")
    header = lines[0].split()
    if len(header) != 2:
        raise MalformedLine(1, "expected header '<rec> <step>'")
    try:
        step = float(header[1])
    except ValueError:
        raise MalformedLine(1, "non-numeric frame step") from None
    probs = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            probs.append(float(ln))
        except ValueError:
            raise MalformedLine(k, "non-numeric value") from None
    return header[0], step, np.array(probs)


def write_posterior(post: SadPosterior) -> str:
    return write_stream(post.recording_id, post.frame_step, post.speech_prob)


def parse_posterior(text: str) -> SadPosterior:
    rec, step, values = parse_stream(text)
    return SadPosterior(rec, step, values)
