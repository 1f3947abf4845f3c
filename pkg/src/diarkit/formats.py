"""Timeline interchange formats: RTTM, UEM, token annotations, frame labels.

Times are seconds as floats. Interval helpers work on plain ``(onset, offset)``
tuples so that the scoring and fusion code can stay allocation-light.
"""

from __future__ import annotations

import math
from decimal import Decimal, InvalidOperation
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    MalformedLine,
    NonPositiveDuration,
    OffsetNotAfterOnset,
    UnknownRecording,
)

Span = tuple[float, float]

# Frame-count arithmetic tolerance; guards against 3 / 0.1 = 30.000000000000004.
_EPS = 1e-9


@dataclass(frozen=True, order=True)
class TimeInterval:
    onset: float
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "onset", float(self.onset))
        object.__setattr__(self, "offset", float(self.offset))
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise ValueError("interval bounds must be finite")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} not after onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def as_span(self) -> Span:
        return (self.onset, self.offset)


@dataclass(frozen=True)
class Turn:
    recording_id: str
    speaker_id: str
    interval: TimeInterval

    def __post_init__(self):
        for name in ("recording_id", "speaker_id"):
            value = getattr(self, name)
            if not value or any(c.isspace() for c in value):
                raise ValueError(f"{name} must be non-empty without whitespace: {value!r}")

    @property
    def onset(self) -> float:
        return self.interval.onset

    @property
    def offset(self) -> float:
        return self.interval.offset

    @classmethod
    def make(cls, recording_id: str, speaker_id: str, onset: float, offset: float) -> "Turn":
        return cls(recording_id, speaker_id, TimeInterval(onset, offset))


def _sort_key(turn: Turn):
    return (turn.recording_id, turn.onset, turn.speaker_id, turn.offset)


def normalize_turns(turns: Iterable[Turn]) -> tuple[Turn, ...]:
    """Sort turns and merge strictly overlapping turns of the same speaker.

    Touching turns (one ends exactly where the next begins) are kept apart.
    """
    by_key: dict[tuple[str, str], list[Turn]] = defaultdict(list)
    for t in turns:
        by_key[(t.recording_id, t.speaker_id)].append(t)
    merged: list[Turn] = []
    for (rec, spk), group in by_key.items():
        group.sort(key=lambda t: (t.onset, t.offset))
        cur_on, cur_off = group[0].onset, group[0].offset
        for t in group[1:]:
            if t.onset < cur_off:
                cur_off = max(cur_off, t.offset)
            else:
                merged.append(Turn.make(rec, spk, cur_on, cur_off))
                cur_on, cur_off = t.onset, t.offset
        merged.append(Turn.make(rec, spk, cur_on, cur_off))
    merged.sort(key=_sort_key)
    return tuple(merged)


@dataclass(frozen=True)
class RttmDocument:
    """Speaker turns, always stored normalized."""

    turns: tuple[Turn, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "turns", normalize_turns(self.turns))

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self) -> Iterator[Turn]:
        return iter(self.turns)

    @property
    def recordings(self) -> list[str]:
        return sorted({t.recording_id for t in self.turns})

    def speakers(self, recording_id: str | None = None) -> list[str]:
        return sorted(
            {t.speaker_id for t in self.turns if recording_id is None or t.recording_id == recording_id}
        )

    def for_recording(self, recording_id: str) -> "RttmDocument":
        return RttmDocument(tuple(t for t in self.turns if t.recording_id == recording_id))

    def speaker_spans(self, recording_id: str) -> dict[str, list[Span]]:
        """Per-speaker sorted, disjoint spans (touching spans are joined)."""
        out: dict[str, list[Span]] = defaultdict(list)
        for t in self.turns:
            if t.recording_id == recording_id:
                out[t.speaker_id].append((t.onset, t.offset))
        return {spk: union_spans(spans) for spk, spans in sorted(out.items())}

    def extent(self, recording_id: str) -> float:
        return max((t.offset for t in self.turns if t.recording_id == recording_id), default=0.0)

    def rename(self, mapping: Mapping[str, str]) -> "RttmDocument":
        return RttmDocument(
            tuple(
                Turn(t.recording_id, mapping.get(t.speaker_id, t.speaker_id), t.interval)
                for t in self.turns
            )
        )

    @classmethod
    def from_spans(cls, recording_id: str, spans_by_speaker: Mapping[str, Iterable[Span]]) -> "RttmDocument":
        turns = [
            Turn.make(recording_id, spk, on, off)
            for spk, spans in spans_by_speaker.items()
            for on, off in spans
            if off > on
        ]
        return cls(tuple(turns))

    def merged_with(self, *others: "RttmDocument") -> "RttmDocument":
        turns = list(self.turns)
        for o in others:
            turns.extend(o.turns)
        return RttmDocument(tuple(turns))


@dataclass(frozen=True)
class UemDocument:
    regions: Mapping[str, tuple[TimeInterval, ...]] = field(default_factory=dict)

    def spans(self, recording_id: str) -> list[Span]:
        if recording_id not in self.regions:
            raise UnknownRecording(recording_id)
        return [r.as_span() for r in self.regions[recording_id]]

    @property
    def recordings(self) -> list[str]:
        return sorted(self.regions)

    @classmethod
    def from_spans(cls, spans: Mapping[str, Iterable[Span]]) -> "UemDocument":
        return cls({rec: tuple(TimeInterval(a, b) for a, b in union_spans(s)) for rec, s in spans.items()})

    @classmethod
    def covering(cls, *docs: RttmDocument) -> "UemDocument":
        """UEM spanning [0, last offset) of every recording in ``docs``."""
        ends: dict[str, float] = {}
        for d in docs:
            for t in d.turns:
                ends[t.recording_id] = max(ends.get(t.recording_id, 0.0), t.offset)
        return cls.from_spans({rec: [(0.0, end)] for rec, end in ends.items()})


@dataclass(frozen=True)
class TokenAnnotation:
    recording_id: str
    token: str
    interval: TimeInterval

    def __post_init__(self):
        if not self.token:
            raise ValueError("token must be non-empty")


@dataclass(frozen=True, eq=False)
class FrameLabels:
    """Boolean speaker activity sampled on a fixed frame grid.

    Frame ``f`` covers ``[start + f*step, start + (f+1)*step)``.
    """

    recording_id: str
    frame_step: float
    speaker_ids: tuple[str, ...]
    activity: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        if self.frame_step <= 0:
            raise ValueError("frame_step must be positive")
        act = np.asarray(self.activity, dtype=bool)
        if act.ndim != 2:
            act = act.reshape(len(self.speaker_ids), -1)
        if act.shape[0] != len(self.speaker_ids):
            raise ValueError("activity rows must match speaker_ids")
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise ValueError("speaker_ids must be unique")
        act.setflags(write=False)
        object.__setattr__(self, "activity", act)
        object.__setattr__(self, "speaker_ids", tuple(self.speaker_ids))

    @property
    def num_speakers(self) -> int:
        return len(self.speaker_ids)

    @property
    def num_frames(self) -> int:
        return self.activity.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_step

    def row(self, speaker_id: str) -> np.ndarray:
        return self.activity[self.speaker_ids.index(speaker_id)]

    def __eq__(self, other):
        if not isinstance(other, FrameLabels):
            return NotImplemented
        return (
            self.recording_id == other.recording_id
            and self.frame_step == other.frame_step
            and self.start == other.start
            and self.speaker_ids == other.speaker_ids
            and np.array_equal(self.activity, other.activity)
        )


# ---------------------------------------------------------------- interval algebra


def union_spans(spans: Iterable[Span]) -> list[Span]:
    """Union of spans; touching spans are joined."""
    out: list[list[float]] = []
    for on, off in sorted(spans):
        if off <= on:
            continue
        if out and on <= out[-1][1]:
            out[-1][1] = max(out[-1][1], off)
        else:
            out.append([on, off])
    return [(a, b) for a, b in out]


def intersect_spans(a: Sequence[Span], b: Sequence[Span]) -> list[Span]:
    """Intersection of two sorted disjoint span lists."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def subtract_spans(a: Sequence[Span], b: Sequence[Span]) -> list[Span]:
    """``a`` minus ``b``; both sorted and disjoint."""
    out = []
    j = 0
    for on, off in a:
        cur = on
        while j < len(b) and b[j][1] <= cur:
            j += 1
        k = j
        while k < len(b) and b[k][0] < off:
            if b[k][0] > cur:
                out.append((cur, b[k][0]))
            cur = max(cur, b[k][1])
            k += 1
        if cur < off:
            out.append((cur, off))
    return out


def total_duration(spans: Iterable[Span]) -> float:
    return float(sum(off - on for on, off in spans))


def overlap_spans(spans_by_speaker: Mapping[str, Sequence[Span]]) -> list[Span]:
    """Regions where two or more speakers are simultaneously active."""
    events = []
    for spans in spans_by_speaker.values():
        for on, off in union_spans(spans):
            events.append((on, 1))
            events.append((off, -1))
    events.sort(key=lambda e: (e[0], e[1]))
    out = []
    active = 0
    start = 0.0
    for t, delta in events:
        before = active
        active += delta
        if before < 2 <= active:
            start = t
        elif before >= 2 > active and t > start:
            out.append((start, t))
    return union_spans(out)


def spans_membership(spans: Sequence[Span], points: np.ndarray) -> np.ndarray:
    """Boolean mask of ``points`` lying in ``[on, off)`` of any disjoint sorted span."""
    if not spans:
        return np.zeros(len(points), dtype=bool)
    ons = np.fromiter((s[0] for s in spans), float, len(spans))
    offs = np.fromiter((s[1] for s in spans), float, len(spans))
    idx = np.searchsorted(ons, points, side="right") - 1
    ok = idx >= 0
    res = np.zeros(len(points), dtype=bool)
    res[ok] = points[ok] < offs[idx[ok]]
    return res


# ---------------------------------------------------------------- RTTM / UEM / tokens


def parse_rttm(text: str) -> RttmDocument:
    turns = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 9 or fields[0] != "SPEAKER":
            raise MalformedLine(line_no, "expected >= 9 fields starting with SPEAKER")
        try:
            onset = Decimal(fields[3])
            duration = Decimal(fields[4])
        except InvalidOperation:
            raise MalformedLine(line_no, "non-numeric onset/duration") from None
        if not (onset.is_finite() and duration.is_finite()) or onset < 0:
            raise MalformedLine(line_no, "invalid onset/duration")
        if duration <= 0:
            raise NonPositiveDuration(line_no)
        # decimal sum, so "0.1 0.2" ends exactly at the float nearest 0.3
        turns.append(Turn.make(fields[1], fields[7], float(onset), float(onset + duration)))
    return RttmDocument(tuple(turns))


def _ms(t: float) -> int:
    return int(round(t * 1000.0))


def write_rttm(doc: RttmDocument) -> str:
    """Serialize at millisecond resolution.

    Onset and offset are rounded independently, so disjoint turns stay disjoint;
    turns that collapse to zero length at this resolution are omitted.
    """
    rows = []
    for t in doc.turns:
        on, off = _ms(t.onset), _ms(t.offset)
        if off > on:
            rows.append((t.recording_id, on, t.speaker_id, off))
    rows.sort()
    return "".join(
        f"SPEAKER {rec} 1 {on / 1000:.3f} {(off - on) / 1000:.3f} <NA> <NA> {spk} <NA> <NA>\n"
        for rec, on, spk, off in rows
    )


def parse_uem(text: str) -> UemDocument:
    spans: dict[str, list[Span]] = defaultdict(list)
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise MalformedLine(line_no, "expected '<rec> <channel> <onset> <offset>'")
        try:
            onset, offset = float(fields[2]), float(fields[3])
        except ValueError:
            raise MalformedLine(line_no, "non-numeric times") from None
        if onset < 0:
            raise MalformedLine(line_no, "negative onset")
        if offset <= onset:
            raise OffsetNotAfterOnset(line_no)
        spans[fields[0]].append((onset, offset))
    return UemDocument.from_spans(spans)


def write_uem(uem: UemDocument) -> str:
    return "".join(
        f"{rec} 1 {r.onset:.3f} {r.offset:.3f}\n" for rec in uem.recordings for r in uem.regions[rec]
    )


def parse_tokens(text: str) -> list[TokenAnnotation]:
    """Token lines: ``<rec> <onset> <offset> <token>``."""
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise MalformedLine(line_no, "expected '<rec> <onset> <offset> <token>'")
        try:
            onset, offset = float(fields[1]), float(fields[2])
        except ValueError:
            raise MalformedLine(line_no, "non-numeric times") from None
        if offset <= onset:
            raise OffsetNotAfterOnset(line_no)
        out.append(TokenAnnotation(fields[0], fields[3], TimeInterval(onset, offset)))
    return out


# ---------------------------------------------------------------- frames <-> turns


def num_frames_for(duration: float, frame_step: float) -> int:
    return max(0, math.ceil(duration / frame_step - _EPS))


def frame_midpoints(start: float, frame_step: float, n: int) -> np.ndarray:
    return start + (np.arange(n) + 0.5) * frame_step


def turns_to_frames(
    doc: RttmDocument,
    recording_id: str,
    frame_step: float,
    span: TimeInterval,
    speaker_ids: Sequence[str] | None = None,
) -> FrameLabels:
    """Sample turns on a frame grid; a frame is active iff its midpoint is inside a turn.

    An empty document yields an empty-row matrix; pass ``speaker_ids`` to fix the rows.
    """
    if frame_step <= 0:
        raise ValueError("frame_step must be positive")
    rec_doc = doc.for_recording(recording_id)
    if speaker_ids is None:
        if doc.turns and not rec_doc.turns:
            raise UnknownRecording(recording_id)
        speaker_ids = rec_doc.speakers()
    n = num_frames_for(span.duration, frame_step)
    mids = frame_midpoints(span.onset, frame_step, n)
    spans = rec_doc.speaker_spans(recording_id)
    act = np.zeros((len(speaker_ids), n), dtype=bool)
    for i, spk in enumerate(speaker_ids):
        act[i] = spans_membership(spans.get(spk, []), mids)
    return FrameLabels(recording_id, frame_step, tuple(speaker_ids), act, start=span.onset)


def mask_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open ``(start, end)`` frame index pairs."""
    m = np.asarray(mask, dtype=np.int8)
    if m.size == 0:
        return []
    d = np.diff(np.concatenate(([0], m, [0])))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def smooth_runs(mask: np.ndarray, bridge_max: int, min_len: int) -> list[tuple[int, int]]:
    """Bridge internal gaps of at most ``bridge_max`` frames, then drop runs under ``min_len``."""
    runs = mask_runs(mask)
    bridged: list[list[int]] = []
    for s, e in runs:
        if bridged and s - bridged[-1][1] <= bridge_max:
            bridged[-1][1] = e
        else:
            bridged.append([s, e])
    return [(s, e) for s, e in bridged if e - s >= max(min_len, 1)]


def frames_to_turns(labels: FrameLabels, min_turn: float = 0.0, max_gap: float = 0.0) -> RttmDocument:
    if min_turn < 0 or max_gap < 0:
        raise ValueError("min_turn and max_gap must be non-negative")
    step = labels.frame_step
    bridge_max = int(math.floor(max_gap / step + _EPS))
    min_len = int(math.ceil(min_turn / step - _EPS))
    turns = []
    for i, spk in enumerate(labels.speaker_ids):
        for s, e in smooth_runs(labels.activity[i], bridge_max, min_len):
            turns.append(Turn.make(labels.recording_id, spk, labels.start + s * step, labels.start + e * step))
    return RttmDocument(tuple(turns))
