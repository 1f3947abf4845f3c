"""Diarization scoring: DER breakdown, JER, and SAD overall error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyReferenceSpeech, EmptyUem, UnknownRecording
from .formats import (
    RttmDocument,
    Span,
    UemDocument,
    intersect_spans,
    spans_membership,
    subtract_spans,
    total_duration,
    union_spans,
)

SpeakerKey = tuple[str, str]  # (recording_id, speaker_id)


@dataclass(frozen=True)
class DerBreakdown:
    """Error times in seconds; percentages are derived from them."""

    miss_time: float
    fa_time: float
    spkerr_time: float
    scored_speaker_time: float
    speaker_map: dict[SpeakerKey, str] = field(default_factory=dict)

    def _pct(self, t: float) -> float:
        if self.scored_speaker_time <= 0:
            raise EmptyReferenceSpeech("no scored reference speech")
        return 100.0 * t / self.scored_speaker_time

    @property
    def miss_pct(self) -> float:
        return self._pct(self.miss_time)

    @property
    def fa_pct(self) -> float:
        return self._pct(self.fa_time)

    @property
    def spkerr_pct(self) -> float:
        return self._pct(self.spkerr_time)

    @property
    def error_time(self) -> float:
        return self.miss_time + self.fa_time + self.spkerr_time

    @property
    def der_pct(self) -> float:
        return self._pct(self.error_time)

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(
            self.miss_time + other.miss_time,
            self.fa_time + other.fa_time,
            self.spkerr_time + other.spkerr_time,
            self.scored_speaker_time + other.scored_speaker_time,
            {**self.speaker_map, **other.speaker_map},
        )

    def report(self) -> dict[str, float]:
        return {
            "miss_pct": self.miss_pct,
            "fa_pct": self.fa_pct,
            "spkerr_pct": self.spkerr_pct,
            "der_pct": self.der_pct,
            "scored_speaker_time": self.scored_speaker_time,
        }


@dataclass(frozen=True)
class JerResult:
    jer_pct: float
    per_speaker: dict[SpeakerKey, float]


@dataclass(frozen=True)
class SadError:
    miss_pct: float
    fa_pct: float
    total_pct: float
    normalizer: str = "uem"


# ---------------------------------------------------------------- atomic segmentation


@dataclass
class _Segmentation:
    durations: np.ndarray
    ref: np.ndarray  # bool [n_ref, m]
    hyp: np.ndarray  # bool [n_hyp, m]
    ref_ids: list[str]
    hyp_ids: list[str]


def _segment_recording(
    ref_spans: dict[str, list[Span]],
    hyp_spans: dict[str, list[Span]],
    scored: list[Span],
    collar: float,
    score_overlap: bool,
) -> _Segmentation:
    bounds = {b for s in scored for b in s}
    for spans in (ref_spans, hyp_spans):
        for ss in spans.values():
            for on, off in ss:
                bounds.update((on, off))
    no_score: list[Span] = []
    if collar > 0:
        for ss in ref_spans.values():
            for on, off in ss:
                no_score.append((max(0.0, on - collar), on + collar))
                no_score.append((max(0.0, off - collar), off + collar))
        no_score = union_spans(no_score)
        for s in no_score:
            bounds.update(s)
    b = np.array(sorted(bounds))
    if len(b) < 2:
        b = np.zeros(2)
    mids = 0.5 * (b[:-1] + b[1:])
    dur = np.diff(b)
    keep = spans_membership(scored, mids) & (dur > 0)
    if no_score:
        keep &= ~spans_membership(no_score, mids)
    ref_ids = sorted(ref_spans)
    # order hypothesis speakers by content so tie-breaking in the mapping ignores their names
    hyp_ids = sorted(hyp_spans, key=lambda s: (hyp_spans[s], s))
    R = np.zeros((len(ref_ids), mids.size), dtype=bool)
    for i, s in enumerate(ref_ids):
        R[i] = spans_membership(ref_spans[s], mids)
    H = np.zeros((len(hyp_ids), mids.size), dtype=bool)
    for i, s in enumerate(hyp_ids):
        H[i] = spans_membership(hyp_spans[s], mids)
    if not score_overlap and len(ref_ids):
        keep &= R.sum(axis=0) <= 1
    return _Segmentation(dur[keep], R[:, keep], H[:, keep], ref_ids, hyp_ids)


def optimal_mapping(correct: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight one-to-one matching of a ref x hyp overlap matrix (zero pairs dropped)."""
    if correct.size == 0:
        return []
    rows, cols = linear_sum_assignment(correct, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if correct[r, c] > 0]


def _scored_regions(uem: UemDocument | None, rec: str, ref: RttmDocument, hyp: RttmDocument) -> list[Span]:
    if uem is None:
        end = max(ref.extent(rec), hyp.extent(rec))
        return [(0.0, end)] if end > 0 else []
    if rec not in uem.regions:
        raise UnknownRecording(rec)
    return uem.spans(rec)


def _recordings(ref: RttmDocument, hyp: RttmDocument, uem: UemDocument | None) -> list[str]:
    recs = set(ref.recordings) | set(hyp.recordings)
    if uem is not None:
        missing = set(hyp.recordings) - set(uem.recordings)
        if missing:
            raise UnknownRecording(sorted(missing)[0])
    return sorted(recs)


def score_der(
    ref: RttmDocument,
    hyp: RttmDocument,
    uem: UemDocument | None = None,
    collar: float = 0.0,
    score_overlap: bool = True,
    *,
    allow_empty: bool = False,
) -> DerBreakdown:
    """Diarization error rate with an optimal one-to-one speaker mapping per recording.

    Without a UEM every recording is scored over ``[0, last offset)``.
    """
    if collar < 0:
        raise ValueError("collar must be non-negative")
    total = DerBreakdown(0.0, 0.0, 0.0, 0.0)
    for rec in _recordings(ref, hyp, uem):
        seg = _segment_recording(
            ref.speaker_spans(rec), hyp.speaker_spans(rec), _scored_regions(uem, rec, ref, hyp), collar, score_overlap
        )
        d = seg.durations
        n_ref = seg.ref.sum(axis=0)
        n_hyp = seg.hyp.sum(axis=0)
        correct = (seg.ref * d) @ seg.hyp.T.astype(float)
        pairs = optimal_mapping(correct)
        matched = np.zeros_like(d)
        for r, h in pairs:
            matched += seg.ref[r] & seg.hyp[h]
        miss = float(np.sum(d * np.maximum(n_ref - n_hyp, 0)))
        fa = float(np.sum(d * np.maximum(n_hyp - n_ref, 0)))
        conf = float(np.sum(d * (np.minimum(n_ref, n_hyp) - matched)))
        total = total + DerBreakdown(
            miss,
            fa,
            conf,
            float(np.sum(d * n_ref)),
            {(rec, seg.ref_ids[r]): seg.hyp_ids[h] for r, h in pairs},
        )
    if total.scored_speaker_time <= 0 and not allow_empty:
        raise EmptyReferenceSpeech("reference has no speech in the scored regions")
    return total


def score_jer(ref: RttmDocument, hyp: RttmDocument, uem: UemDocument | None = None) -> JerResult:
    mapping = score_der(ref, hyp, uem, collar=0.0, score_overlap=True).speaker_map
    per_speaker: dict[SpeakerKey, float] = {}
    for rec in sorted(ref.recordings):
        scored = _scored_regions(uem, rec, ref, hyp)
        ref_spans = ref.speaker_spans(rec)
        hyp_spans = hyp.speaker_spans(rec)
        for spk, spans in ref_spans.items():
            r = intersect_spans(spans, scored)
            if not r:
                continue
            h_id = mapping.get((rec, spk))
            if h_id is None:
                per_speaker[(rec, spk)] = 100.0
                continue
            h = intersect_spans(hyp_spans[h_id], scored)
            inter = total_duration(intersect_spans(r, h))
            union = total_duration(union_spans(r + h))
            per_speaker[(rec, spk)] = 100.0 * (1.0 - inter / union)
    if not per_speaker:
        raise EmptyReferenceSpeech("reference has no speech in the scored regions")
    return JerResult(float(np.mean(list(per_speaker.values()))), per_speaker)


def speech_spans(doc: RttmDocument, recording_id: str) -> list[Span]:
    return union_spans(
        (t.onset, t.offset) for t in doc.turns if t.recording_id == recording_id
    )


def score_sad(ref: RttmDocument, hyp_speech: RttmDocument, uem: UemDocument | None = None) -> SadError:
    """Speech/non-speech error; both components are normalized by total UEM duration."""
    recs = sorted(set(ref.recordings) | set(hyp_speech.recordings) | (set(uem.recordings) if uem else set()))
    miss = fa = denom = 0.0
    for rec in recs:
        scored = _scored_regions(uem, rec, ref, hyp_speech)
        r = intersect_spans(speech_spans(ref, rec), scored)
        h = intersect_spans(speech_spans(hyp_speech, rec), scored)
        miss += total_duration(subtract_spans(r, h))
        fa += total_duration(subtract_spans(h, r))
        denom += total_duration(scored)
    if denom <= 0:
        raise EmptyUem("no scored duration")
    m, f = 100.0 * miss / denom, 100.0 * fa / denom
    return SadError(m, f, m + f)
