"""Seeded synthetic sessions with ground truth, and oracle / noisy model backends.

Backends corrupt ground truth by flipping fixed-length blocks. The flip pattern
is a fixed uniform field per (session, backend, row): a block is flipped when
its field value falls below ``(1 - fidelity) * max_flip``. Raising fidelity can
therefore only remove flips, never add them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapt import MixtureSpec, SessionFrames, SpeakerPrior, SpeakerProfile
from .clustering import Embedding, PldaModel
from .domainroute import DOMAIN_ORDER, DomainLabel
from .errors import InfeasibleOverlap
from .formats import FrameLabels, RttmDocument, TimeInterval, Turn, UemDocument, frame_midpoints, spans_membership, turns_to_frames
from .sad import SadPosterior


@dataclass(frozen=True)
class SynthSessionSpec:
    num_speakers: int = 2
    duration: float = 120.0
    overlap_ratio: float = 0.1
    noise_level: float = 0.1
    seed: int = 0
    recording_id: str = "synth"
    embed_dim: int = 128
    frame_step: float = 0.01
    window: float = 1.0
    snr_db: float = 20.0
    domain: DomainLabel | None = None

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.overlap_ratio < 1:
            raise ValueError("overlap_ratio must be in [0, 1)")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.domain is not None:
            object.__setattr__(self, "domain", DomainLabel(self.domain))


@dataclass(frozen=True, eq=False)
class SynthSession:
    spec: SynthSessionSpec
    reference: RttmDocument
    labels: FrameLabels
    embeddings: tuple[Embedding, ...]
    embedding_truth: tuple[str, ...]
    features: np.ndarray
    directions: dict[str, np.ndarray]

    @property
    def recording_id(self) -> str:
        return self.spec.recording_id

    @property
    def frames(self) -> SessionFrames:
        return SessionFrames(self.recording_id, self.spec.frame_step, self.features)

    @property
    def uem(self) -> UemDocument:
        return UemDocument.from_spans({self.recording_id: [(0.0, self.labels.duration)]})

    @property
    def speech_mask(self) -> np.ndarray:
        return self.labels.activity.any(axis=0)


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])


def _sample_turns(spec: SynthSessionSpec, rng: np.random.Generator, speakers: list[str]) -> list[tuple[str, int, int]]:
    """Turn-taking in integer frames with overlap steered toward the target ratio."""
    step = spec.frame_step
    n_total = int(round(spec.duration / step))
    f = lambda sec: int(round(sec / step))  # noqa: E731
    turns: list[tuple[str, int, int]] = []
    overlap = speech = 0
    prev_spk = None
    prev_end = 0
    prev_len = 0
    cursor = f(rng.uniform(0.2, 1.0))
    while True:
        choices = [s for s in speakers if s != prev_spk] or speakers
        spk = choices[int(rng.integers(len(choices)))]
        length = f(rng.uniform(2.0, 5.0))
        start = cursor
        if turns and spk != prev_spk and speech > 0 and overlap / speech < spec.overlap_ratio:
            # at most 35% of the shorter turn, so no speaker's own turns come closer than 0.6 s
            start = prev_end - int(round(rng.uniform(0.2, 0.35) * min(prev_len, length)))
        elif turns:
            start = prev_end + f(rng.uniform(0.4, 1.2))
        if start >= n_total - f(0.5):
            break
        end = min(start + length, n_total)
        ov = max(0, prev_end - start) if turns else 0
        overlap += ov
        speech += (end - start) - ov
        turns.append((spk, start, end))
        prev_spk, prev_end, prev_len, cursor = spk, end, end - start, end
    return turns


def gen_session(spec: SynthSessionSpec) -> SynthSession:
    if spec.num_speakers == 1 and spec.overlap_ratio > 0:
        raise InfeasibleOverlap("overlap needs at least two speakers")
    step = spec.frame_step
    speakers = [f"S{k}" for k in range(spec.num_speakers)]
    rng_dir = _rng(spec.seed, "directions")
    dirs = rng_dir.standard_normal((spec.num_speakers, spec.embed_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    directions = {s: dirs[k] for k, s in enumerate(speakers)}

    raw = _sample_turns(spec, _rng(spec.seed, "turns"), speakers)
    rec = spec.recording_id
    reference = RttmDocument(tuple(Turn.make(rec, s, a * step, b * step) for s, a, b in raw))
    n_frames = int(round(spec.duration / step))
    act = np.zeros((len(speakers), n_frames), dtype=bool)
    for s, a, b in raw:
        act[speakers.index(s), a:b] = True
    labels = FrameLabels(rec, step, tuple(speakers), act)

    rng_emb = _rng(spec.seed, "embeddings")
    embeddings, truth = [], []
    win = int(round(spec.window / step))
    for w0 in range(0, n_frames, win):
        block = act[:, w0 : w0 + win]
        counts = block.sum(axis=1)
        if counts.sum() == 0:
            continue
        k = int(np.argmax(counts))
        active = np.flatnonzero(block.any(axis=0))
        iv = TimeInterval((w0 + active[0]) * step, (w0 + active[-1] + 1) * step)
        vec = dirs[k] + spec.noise_level * rng_emb.standard_normal(spec.embed_dim)
        embeddings.append(Embedding(vec, iv, rec))
        truth.append(speakers[k])

    rng_feat = _rng(spec.seed, "features")
    floor_db = 3.0 * DOMAIN_ORDER.index(spec.domain) if spec.domain is not None else 0.0
    floor = 10 ** (floor_db / 10)
    energy = floor * np.exp(0.3 * rng_feat.standard_normal(n_frames))
    speech_gain = floor * 10 ** (spec.snr_db / 10)
    energy = energy + speech_gain * act.sum(axis=0) * np.exp(0.15 * rng_feat.standard_normal(n_frames))
    return SynthSession(spec, reference, labels, tuple(embeddings), tuple(truth), energy, directions)


def overlap_fraction(labels: FrameLabels) -> float:
    """Time with two or more speakers over time with at least one."""
    n = labels.activity.sum(axis=0)
    speech = int((n >= 1).sum())
    return float((n >= 2).sum() / speech) if speech else 0.0


def synth_plda_models(spec: SynthSessionSpec) -> tuple[PldaModel, PldaModel]:
    """(in-domain, out-of-domain) PLDA for synthlab embeddings.

    The in-domain model matches the generator; the out-of-domain one has an
    inflated within-speaker covariance and a shifted mean.
    """
    d = spec.embed_dim
    sigma2 = max(spec.noise_level, 1e-2) ** 2
    in_domain = PldaModel(np.zeros(d), np.eye(d) / d, sigma2 * np.eye(d))
    out_domain = PldaModel(np.full(d, 0.02), np.eye(d) / d, 4 * sigma2 * np.eye(d))
    return in_domain, out_domain


# ---------------------------------------------------------------- backends


def _flip_mask(seed: int, tag: str, n_frames: int, block: int, rate: float) -> np.ndarray:
    n_blocks = -(-n_frames // block)
    u = _rng(seed, tag).random(n_blocks)
    return np.repeat(u < rate, block)[:n_frames]


@dataclass(frozen=True, eq=False)
class _NoisyBackend:
    session: SynthSession
    fidelity: float = 1.0
    adapt_step: float = 0.25
    max_flip: float = 0.3
    block: float = 0.5

    def __post_init__(self):
        if not 0 <= self.fidelity <= 1:
            raise ValueError("fidelity must be in [0, 1]")

    @property
    def flip_rate(self) -> float:
        return (1.0 - self.fidelity) * self.max_flip

    def _corrupt(self, row: np.ndarray, tag: str) -> np.ndarray:
        block = max(1, int(round(self.block / self.session.spec.frame_step)))
        flips = _flip_mask(self.session.spec.seed, tag, row.size, block, self.flip_rate)
        return np.where(flips, ~row, row).astype(float)

    def _adapted(self, material: Sequence) -> "_NoisyBackend":
        if not material:
            return self
        return replace(self, fidelity=min(1.0, self.fidelity + self.adapt_step))

    def _check(self, frames: SessionFrames) -> None:
        if frames.num_frames != self.session.labels.num_frames:
            raise ValueError("frames do not belong to this backend's session")


class NoisySeparator(_NoisyBackend):
    """Two streams: the two most talkative reference speakers, block-corrupted."""

    def separate(self, frames: SessionFrames) -> np.ndarray:
        self._check(frames)
        act = self.session.labels.activity
        order = np.argsort(-act.sum(axis=1), kind="stable")[:2]
        rows = [act[i] for i in order]
        while len(rows) < 2:
            rows.append(np.zeros(act.shape[1], dtype=bool))
        return np.stack([self._corrupt(r, f"separator{k}") for k, r in enumerate(rows)])

    def adapt(self, mixtures: Sequence[MixtureSpec]) -> "NoisySeparator":
        return self._adapted(mixtures)


class NoisyActivityEstimator(_NoisyBackend):
    """Each profile is matched to the closest reference speaker (cosine >= 0.5)
    whose activity row is returned, block-corrupted; unmatched profiles get silence."""

    def match(self, profile: SpeakerProfile) -> str | None:
        v = np.asarray(profile.vector, float)
        norm = np.linalg.norm(v)
        if norm == 0:
            return None
        best, best_cos = None, 0.5
        for spk, d in self.session.directions.items():
            c = float(v @ d / norm)
            if c >= best_cos:
                best, best_cos = spk, c
        return best

    def estimate(self, frames: SessionFrames, profiles: Sequence[SpeakerProfile]) -> np.ndarray:
        self._check(frames)
        labels = self.session.labels
        rows = []
        for p in profiles:
            spk = self.match(p)
            truth = labels.row(spk) if spk else np.zeros(labels.num_frames, dtype=bool)
            rows.append(self._corrupt(truth, f"estimator:{spk}"))
        return np.stack(rows) if rows else np.zeros((0, labels.num_frames))

    def adapt(self, sessions: Sequence[MixtureSpec]) -> "NoisyActivityEstimator":
        return self._adapted(sessions)


@dataclass(frozen=True, eq=False)
class OracleProfileExtractor:
    """Profile = activity-weighted mean of the reference directions inside the prior's segments."""

    session: SynthSession

    def extract(self, frames: SessionFrames, prior: SpeakerPrior) -> list[SpeakerProfile]:
        labels = self.session.labels
        mids = frame_midpoints(labels.start, labels.frame_step, labels.num_frames)
        D = np.stack([self.session.directions[s] for s in labels.speaker_ids])
        out = []
        for spk in prior.speakers:
            inside = spans_membership(prior.spans(spk), mids)
            weights = labels.activity[:, inside].sum(axis=1).astype(float)
            vec = weights @ D
            n = np.linalg.norm(vec)
            vec = vec / n if n > 0 else vec
            out.append(SpeakerProfile(spk, tuple(vec.tolist()), prior.total_voice(spk)))
        return out


@dataclass(frozen=True, eq=False)
class NoisySadDetector(_NoisyBackend):
    name: str = "det0"

    def posterior(self) -> SadPosterior:
        speech = self.session.speech_mask
        p = self._corrupt(speech, f"sad:{self.name}")
        return SadPosterior(self.session.recording_id, self.session.spec.frame_step, 0.1 + 0.8 * p)


@dataclass
class Backends:
    separator: NoisySeparator
    estimator: NoisyActivityEstimator
    profile_extractor: OracleProfileExtractor
    sad_systems: list[SadPosterior] = field(default_factory=list)


def oracle_backends(
    session: SynthSession,
    fidelity: float = 1.0,
    adapt_step: float = 0.25,
    max_flip: float = 0.3,
    sad_fidelity: float | None = None,
    num_sad_systems: int = 3,
) -> Backends:
    kw = dict(fidelity=fidelity, adapt_step=adapt_step, max_flip=max_flip)
    sad_f = fidelity if sad_fidelity is None else sad_fidelity
    sad = [
        NoisySadDetector(session, fidelity=sad_f, max_flip=max_flip, block=0.2, name=f"det{k}").posterior()
        for k in range(num_sad_systems)
    ]
    return Backends(NoisySeparator(session, **kw), NoisyActivityEstimator(session, **kw), OracleProfileExtractor(session), sad)


def corrupt_hypothesis(
    reference: RttmDocument, seed: int, swap_rate: float = 0.15, drop_rate: float = 0.1, jitter: float = 0.2
) -> RttmDocument:
    """Independently corrupted copy of a reference: speaker swaps, dropped turns, boundary jitter."""
    rng = np.random.default_rng(seed)
    turns = []
    for rec in reference.recordings:
        spk_ids = reference.speakers(rec)
        for t in reference.for_recording(rec).turns:
            if rng.random() < drop_rate:
                continue
            spk = t.speaker_id
            if len(spk_ids) > 1 and rng.random() < swap_rate:
                spk = spk_ids[(spk_ids.index(spk) + 1 + int(rng.integers(len(spk_ids) - 1))) % len(spk_ids)]
            on = max(0.0, t.onset + rng.uniform(-jitter, jitter))
            off = t.offset + rng.uniform(-jitter, jitter)
            if off - on > 0.05:
                turns.append(Turn.make(rec, spk, on, off))
    return RttmDocument(tuple(turns))


def labels_from_reference(reference: RttmDocument, recording_id: str, duration: float, step: float) -> FrameLabels:
    return turns_to_frames(reference, recording_id, step, TimeInterval(0.0, duration))
