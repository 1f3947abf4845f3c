"""Iterative front-end adaptation loops over pluggable model backends.

Speaker priors are harvested from a diarization hypothesis, turned into
simulated training material (two-speaker mixtures or multi-speaker dialogues),
used to adapt a separator or target-speaker activity estimator for the session,
and the adapted model re-diarizes the session.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .errors import (
    AllSpeechOverlapped,
    DegeneratePrior,
    EmptyPrior,
    EmptyProfiles,
    EstimatorFailure,
    NoSpeechForRecording,
    SeparatorFailure,
    TooFewSpeakers,
)
from .formats import (
    FrameLabels,
    RttmDocument,
    Span,
    TimeInterval,
    Turn,
    frames_to_turns,
    intersect_spans,
    overlap_spans,
    subtract_spans,
    total_duration,
    turns_to_frames,
    union_spans,
)
from .metrics import optimal_mapping
from .sad import SadPosterior, binarize_and_smooth

log = logging.getLogger(__name__)

DUMMY_PREFIX = "__dummy"
# Dummy speaker vectors are pinned to this seed so decoding is reproducible.
DUMMY_POOL_SEED = 20210
DUMMY_POOL_SIZE = 64

# Full-scale simulation magnitudes; the desk-scale defaults are smaller.
FULL_MIXTURES_PER_SESSION = 5000
FULL_DIALOGUE_SECONDS = 4 * 3600.0


@dataclass(frozen=True)
class SpeakerPrior:
    recording_id: str
    segments: Mapping[str, tuple[TimeInterval, ...]]

    @classmethod
    def from_spans(cls, recording_id: str, spans: Mapping[str, Sequence[Span]]) -> "SpeakerPrior":
        segs = {}
        for spk in sorted(spans):
            merged = union_spans(spans[spk])
            if merged:
                segs[spk] = tuple(TimeInterval(a, b) for a, b in merged)
        return cls(recording_id, segs)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.segments)

    def spans(self, speaker_id: str) -> list[Span]:
        return [iv.as_span() for iv in self.segments[speaker_id]]

    def total_voice(self, speaker_id: str) -> float:
        return total_duration(self.spans(speaker_id))

    def to_doc(self) -> RttmDocument:
        return RttmDocument.from_spans(self.recording_id, {s: self.spans(s) for s in self.speakers})


@dataclass(frozen=True)
class MixtureComponent:
    speaker_id: str
    source: TimeInterval
    placement_offset: float
    gain_db: float

    @property
    def placed(self) -> Span:
        return (self.placement_offset, self.placement_offset + self.source.duration)


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[MixtureComponent, ...]
    duration: float
    reference: FrameLabels

    def to_json(self) -> str:
        return json.dumps(
            {
                "duration": self.duration,
                "components": [asdict(c) for c in self.components],
                "speakers": list(self.reference.speaker_ids),
                "reference": np.packbits(self.reference.activity).tobytes().hex(),
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    vector: tuple[float, ...]
    total_voice: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("profile vector must be finite")
        if self.total_voice < 0:
            raise ValueError("total_voice must be >= 0")


@dataclass(frozen=True)
class TsVadDecodeConfig:
    num_nodes: int = 8
    activity_threshold: float = 0.5
    median_filter: int = 11

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if not 0 < self.activity_threshold < 1:
            raise ValueError("activity_threshold must be in (0, 1)")
        if self.median_filter < 1 or self.median_filter % 2 == 0:
            raise ValueError("median_filter must be a positive odd integer")


@dataclass(frozen=True, eq=False)
class SessionFrames:
    """Feature frames of one recording; backends decide what the features mean."""

    recording_id: str
    frame_step: float
    features: np.ndarray
    start: float = 0.0

    @property
    def num_frames(self) -> int:
        return int(np.asarray(self.features).shape[0])

    @property
    def span(self) -> TimeInterval:
        return TimeInterval(self.start, self.start + self.num_frames * self.frame_step)


class Separator(Protocol):
    def separate(self, frames: SessionFrames) -> np.ndarray:
        """Two per-frame stream activity traces, shape [2, T], values in [0, 1]."""

    def adapt(self, mixtures: Sequence[MixtureSpec]) -> "Separator": ...


class ActivityEstimator(Protocol):
    def estimate(self, frames: SessionFrames, profiles: Sequence[SpeakerProfile]) -> np.ndarray:
        """Per-profile speech posteriors, shape [len(profiles), T]."""

    def adapt(self, sessions: Sequence[MixtureSpec]) -> "ActivityEstimator": ...


class ProfileExtractor(Protocol):
    def extract(self, frames: SessionFrames, prior: SpeakerPrior) -> list[SpeakerProfile]: ...


@dataclass
class AdaptResult:
    final: RttmDocument
    epochs: list[RttmDocument]
    flags: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- priors


def extract_speaker_priors(diar: RttmDocument, recording_id: str, exclude_overlap: bool = True) -> SpeakerPrior:
    spans = diar.speaker_spans(recording_id)
    if not spans:
        raise NoSpeechForRecording(recording_id)
    if exclude_overlap:
        ov = overlap_spans(spans)
        spans = {s: subtract_spans(ss, ov) for s, ss in spans.items()}
    prior = SpeakerPrior.from_spans(recording_id, spans)
    if not prior.segments:
        raise AllSpeechOverlapped(recording_id)
    return prior


def purify(decoded: RttmDocument, previous: RttmDocument, recording_id: str) -> SpeakerPrior:
    """Keep each speaker's time where both hypotheses agree, minus any overlapped region."""
    dec = decoded.speaker_spans(recording_id)
    prev = previous.speaker_spans(recording_id)
    if not dec:
        raise NoSpeechForRecording(recording_id)
    both = {s: intersect_spans(dec[s], prev[s]) for s in dec if s in prev}
    both = {s: v for s, v in both.items() if v}
    if not both:
        raise AllSpeechOverlapped(recording_id)
    ov = union_spans(overlap_spans(dec) + overlap_spans(prev))
    return extract_speaker_priors(RttmDocument.from_spans(recording_id, {s: subtract_spans(v, ov) for s, v in both.items()}), recording_id, exclude_overlap=False)


# ---------------------------------------------------------------- simulation


def _pick_source(rng: np.random.Generator, spans: list[Span], max_len: float) -> TimeInterval:
    lengths = np.array([b - a for a, b in spans])
    k = int(rng.choice(len(spans), p=lengths / lengths.sum()))
    a, b = spans[k]
    length = min(b - a, max_len)
    start = a + rng.uniform(0.0, (b - a) - length) if (b - a) > length else a
    return TimeInterval(start, start + length)


def _placed_reference(
    components: Sequence[MixtureComponent], speaker_ids: Sequence[str], duration: float, frame_step: float
) -> FrameLabels:
    doc = RttmDocument(tuple(Turn.make("sim", c.speaker_id, *c.placed) for c in components))
    return turns_to_frames(doc, "sim", frame_step, TimeInterval(0.0, duration), speaker_ids=list(speaker_ids))


def simulate_mixtures(
    prior: SpeakerPrior,
    count: int,
    duration: float = 4.0,
    snr_range: tuple[float, float] = (-5.0, 5.0),
    seed: int = 0,
    frame_step: float = 0.01,
) -> list[MixtureSpec]:
    """Two-speaker mixtures built from the prior's segment pools."""
    speakers = [s for s in prior.speakers if prior.segments[s]]
    if len(speakers) < 2:
        raise TooFewSpeakers(f"{prior.recording_id}: need 2 speakers, have {len(speakers)}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        pair = sorted(rng.choice(len(speakers), size=2, replace=False).tolist())
        comps = []
        for n, idx in enumerate(pair):
            spk = speakers[idx]
            src = _pick_source(rng, prior.spans(spk), duration * rng.uniform(0.5, 1.0))
            offset = float(rng.uniform(0.0, duration - src.duration)) if duration > src.duration else 0.0
            gain = 0.0 if n == 0 else float(rng.uniform(*snr_range))
            comps.append(MixtureComponent(spk, src, offset, gain))
        ids = [speakers[i] for i in pair]
        out.append(MixtureSpec(tuple(comps), duration, _placed_reference(comps, ids, duration, frame_step)))
    return out


def simulate_dialogue(
    prior: SpeakerPrior,
    total_duration: float = 600.0,
    pause_rate: float = 0.3,
    overlap_rate: float = 0.1,
    seed: int = 0,
    frame_step: float = 0.01,
    max_turn: float = 4.0,
) -> MixtureSpec:
    """Alternating-turn dialogue session drawn from the prior's segment pools."""
    speakers = [s for s in prior.speakers if prior.segments[s]]
    if not speakers:
        raise EmptyPrior(prior.recording_id)
    rng = np.random.default_rng(seed)
    comps: list[MixtureComponent] = []
    prev_end = 0.0
    prev_len = 0.0
    prev_spk: str | None = None
    while True:
        choices = [s for s in speakers if s != prev_spk] or speakers
        spk = choices[int(rng.integers(len(choices)))]
        src = _pick_source(rng, prior.spans(spk), rng.uniform(1.0, max_turn))
        length = src.duration
        start = prev_end
        if comps and len(speakers) > 1 and rng.random() < overlap_rate:
            start = prev_end - rng.uniform(0.1, 0.5) * min(prev_len, length)
        elif comps and rng.random() < pause_rate:
            start = prev_end + rng.uniform(0.1, 1.0)
        if start >= total_duration - frame_step:
            break
        if start + length > total_duration:
            length = total_duration - start
            src = TimeInterval(src.onset, src.onset + length)
        comps.append(MixtureComponent(spk, src, float(start), 0.0))
        prev_end, prev_len, prev_spk = start + length, length, spk
    return MixtureSpec(tuple(comps), total_duration, _placed_reference(comps, speakers, total_duration, frame_step))


# ---------------------------------------------------------------- ISS


def _name_streams(doc: RttmDocument, prior: SpeakerPrior) -> RttmDocument:
    """Rename stream speakers after the prior speakers they overlap most."""
    rec = prior.recording_id
    streams = doc.speaker_spans(rec)
    names = list(streams)
    pri = prior.speakers
    C = np.array([[total_duration(intersect_spans(streams[s], prior.spans(p))) for p in pri] for s in names])
    mapping = {names[r]: pri[c] for r, c in optimal_mapping(C.reshape(len(names), len(pri)))}
    return doc.rename(mapping)


def iss_diarize(
    frames: SessionFrames,
    prior0: SpeakerPrior,
    separator: Separator,
    stages: int = 2,
    *,
    mixtures_per_stage: int = 50,
    mixture_duration: float = 4.0,
    snr_range: tuple[float, float] = (-5.0, 5.0),
    sad_threshold: float = 0.5,
    min_speech: float = 0.2,
    min_silence: float = 0.3,
    seed: int = 0,
) -> AdaptResult:
    """Separation-based diarization, re-adapting the separator on priors from each stage."""
    if stages < 1:
        raise ValueError("stages must be >= 1")
    rec = frames.recording_id
    prior = prior0
    epochs: list[RttmDocument] = []
    flags: list[str] = []
    for stage in range(stages):
        mixtures = simulate_mixtures(prior, mixtures_per_stage, mixture_duration, snr_range, seed=seed + 7919 * stage, frame_step=frames.frame_step)
        separator = separator.adapt(mixtures)
        streams = np.asarray(separator.separate(frames), dtype=float)
        if streams.shape != (2, frames.num_frames) or not np.all(np.isfinite(streams)):
            raise SeparatorFailure(f"{rec}: expected [2, {frames.num_frames}] streams, got {streams.shape}")
        parts = [
            binarize_and_smooth(
                SadPosterior(rec, frames.frame_step, np.clip(streams[k], 0, 1), frames.start),
                sad_threshold,
                min_speech,
                min_silence,
                speaker_id=f"stream{k}",
            )
            for k in range(2)
        ]
        doc = _name_streams(parts[0].merged_with(parts[1]), prior)
        epochs.append(doc)
        try:
            prior = extract_speaker_priors(doc, rec, exclude_overlap=True)
            if len(prior.speakers) < 2:
                raise TooFewSpeakers(rec)
        except (NoSpeechForRecording, AllSpeechOverlapped, TooFewSpeakers) as exc:
            flags.append(f"stage{stage + 1}: prior kept from previous stage ({type(exc).__name__})")
            log.warning("%s: stage %d produced a degenerate prior", rec, stage + 1)
    return AdaptResult(epochs[-1], epochs, flags)


# ---------------------------------------------------------------- TS-VAD


def dummy_profiles(dim: int, count: int) -> list[SpeakerProfile]:
    if count > DUMMY_POOL_SIZE:
        raise ValueError(f"at most {DUMMY_POOL_SIZE} dummy profiles available")
    rng = np.random.default_rng(DUMMY_POOL_SEED + dim)
    pool = rng.standard_normal((DUMMY_POOL_SIZE, dim))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    return [SpeakerProfile(f"{DUMMY_PREFIX}{k}", tuple(pool[k].tolist()), 0.0) for k in range(count)]


def select_profiles(profiles: Sequence[SpeakerProfile], num_nodes: int) -> list[SpeakerProfile]:
    """Keep the ``num_nodes`` profiles with the most voice, then pad with dummies."""
    real = sorted(profiles, key=lambda p: (-p.total_voice, p.speaker_id))[:num_nodes]
    pad = num_nodes - len(real)
    return real + (dummy_profiles(len(real[0].vector), pad) if pad else [])


def tsvad_decode(
    frames: SessionFrames,
    profiles: Sequence[SpeakerProfile],
    estimator: ActivityEstimator,
    config: TsVadDecodeConfig = TsVadDecodeConfig(),
) -> RttmDocument:
    if not profiles:
        raise EmptyProfiles(frames.recording_id)
    nodes = select_profiles(profiles, config.num_nodes)
    post = np.asarray(estimator.estimate(frames, nodes), dtype=float)
    if post.shape != (config.num_nodes, frames.num_frames) or not np.all(np.isfinite(post)):
        raise EstimatorFailure(f"expected [{config.num_nodes}, {frames.num_frames}] posteriors, got {post.shape}")
    keep = [i for i, p in enumerate(nodes) if not p.speaker_id.startswith(DUMMY_PREFIX)]
    post = post[keep]
    if config.median_filter > 1:
        post = median_filter(post, size=(1, config.median_filter), mode="nearest")
    labels = FrameLabels(
        frames.recording_id,
        frames.frame_step,
        tuple(nodes[i].speaker_id for i in keep),
        post > config.activity_threshold,
        start=frames.start,
    )
    return frames_to_turns(labels)


def itsvad_diarize(
    frames: SessionFrames,
    init_diar: RttmDocument,
    estimator: ActivityEstimator,
    profile_extractor: ProfileExtractor,
    iterations: int = 1,
    *,
    decode: TsVadDecodeConfig = TsVadDecodeConfig(),
    dialogue_duration: float = 600.0,
    pause_rate: float = 0.3,
    overlap_rate: float = 0.1,
    seed: int = 0,
) -> AdaptResult:
    """Decode, purify the prior against the previous hypothesis, adapt on simulated
    dialogue, re-extract profiles and decode again; ``iterations`` times.

    ``epochs`` holds the first decode and every re-decode, for cross-epoch fusion.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rec = frames.recording_id
    previous = init_diar.for_recording(rec)
    prior = extract_speaker_priors(previous, rec, exclude_overlap=True)
    hyp = tsvad_decode(frames, profile_extractor.extract(frames, prior), estimator, decode)
    epochs = [hyp]
    flags: list[str] = []
    for it in range(iterations):
        try:
            prior = purify(hyp, previous, rec)
            dialogue = simulate_dialogue(
                prior, dialogue_duration, pause_rate, overlap_rate, seed=seed + 104729 * it, frame_step=frames.frame_step
            )
            estimator = estimator.adapt([dialogue])
            new = tsvad_decode(frames, profile_extractor.extract(frames, prior), estimator, decode)
            if not new.turns:
                raise DegeneratePrior(f"{rec}: no speaker survived iteration {it + 1}")
        except (NoSpeechForRecording, AllSpeechOverlapped, EmptyPrior, DegeneratePrior) as exc:
            flags.append(f"iteration{it + 1}: DegeneratePrior fallback ({type(exc).__name__})")
            log.warning("%s: iteration %d fell back to the previous hypothesis", rec, it + 1)
            new = hyp
        previous, hyp = hyp, new
        epochs.append(hyp)
    return AdaptResult(hyp, epochs, flags)
