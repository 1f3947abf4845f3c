"""Session domain classification by chunk voting, and per-domain routing."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import EmptyPredictions, UnknownDomain
from .formats import TimeInterval


class DomainLabel(str, enum.Enum):
    AUDIOBOOKS = "AUDIOBOOKS"
    BROADCAST_INTERVIEW = "BROADCAST_INTERVIEW"
    CLINICAL = "CLINICAL"
    COURT = "COURT"
    CTS = "CTS"
    MAPTASK = "MAPTASK"
    MEETING = "MEETING"
    RESTAURANT = "RESTAURANT"
    SOCIO_FIELD = "SOCIO_FIELD"
    SOCIO_LAB = "SOCIO_LAB"
    WEBVIDEO = "WEBVIDEO"


DOMAIN_ORDER = list(DomainLabel)


class Strategy(str, enum.Enum):
    CLUSTERING_ONLY = "CLUSTERING_ONLY"
    SINGLE_SPEAKER_SAD = "SINGLE_SPEAKER_SAD"
    ISS = "ISS"
    ITS_VAD = "ITS_VAD"


ITERATIVE = (Strategy.ISS, Strategy.ITS_VAD)


@dataclass(frozen=True)
class RoutePlan:
    strategy: Strategy
    iteration_count: int = 0
    fusion_members: tuple[str, ...] = ()

    def __post_init__(self):
        if self.iteration_count < 0:
            raise ValueError("iteration_count must be >= 0")
        if self.iteration_count and self.strategy not in ITERATIVE:
            raise ValueError(f"{self.strategy.value} takes no iterations")


def default_route_table(itsvad_iterations: int = 1, iss_stages: int = 2) -> dict[DomainLabel, RoutePlan]:
    table = {d: RoutePlan(Strategy.ITS_VAD, itsvad_iterations, ("itsvad",)) for d in DomainLabel}
    table[DomainLabel.RESTAURANT] = RoutePlan(Strategy.CLUSTERING_ONLY, 0, ("clustering",))
    table[DomainLabel.WEBVIDEO] = RoutePlan(Strategy.CLUSTERING_ONLY, 0, ("clustering",))
    table[DomainLabel.AUDIOBOOKS] = RoutePlan(Strategy.SINGLE_SPEAKER_SAD, 0, ("sad",))
    table[DomainLabel.CTS] = RoutePlan(Strategy.ISS, iss_stages, ("iss",))
    return table


def route(domain: DomainLabel | str, table: Mapping[DomainLabel, RoutePlan] | None = None) -> RoutePlan:
    table = default_route_table() if table is None else table
    missing = [d for d in DomainLabel if d not in table]
    if missing:
        raise UnknownDomain(f"routing table lacks {', '.join(d.value for d in missing)}")
    return table[DomainLabel(domain)]


def chunk_session(duration: float, chunk: float = 10.0) -> list[TimeInterval]:
    """Consecutive fixed-length chunks; a short tail (< chunk/2) joins the previous chunk."""
    if duration <= 0 or chunk <= 0:
        raise ValueError("duration and chunk must be positive")
    n_full = int(duration // chunk)
    edges = [k * chunk for k in range(n_full + 1)]
    tail = duration - edges[-1]
    if tail > 1e-9:
        if tail >= chunk / 2 or n_full == 0:
            edges.append(duration)
        else:
            edges[-1] = duration
    else:
        edges[-1] = duration
    return [TimeInterval(a, b) for a, b in zip(edges[:-1], edges[1:])]


def vote_session_domain(segment_predictions: Sequence[DomainLabel | str]) -> DomainLabel:
    """Plurality vote. Ties go to the tied label that reached the winning count first."""
    preds = [DomainLabel(p) for p in segment_predictions]
    if not preds:
        raise EmptyPredictions("no segment predictions")
    counts = Counter(preds)
    top = max(counts.values())
    tied = {lab for lab, c in counts.items() if c == top}
    if len(tied) == 1:
        return next(iter(tied))
    running: Counter = Counter()
    for lab in preds:
        if lab in tied:
            running[lab] += 1
            if running[lab] == top:
                return lab
    return min(tied, key=DOMAIN_ORDER.index)  # unreachable


class SegmentClassifier(Protocol):
    def predict(self, features: np.ndarray) -> list[DomainLabel]: ...


class NearestCentroidClassifier:
    """Nearest class centroid over standardized chunk feature vectors."""

    def __init__(self):
        self.labels: list[DomainLabel] = []
        self.centroids: np.ndarray | None = None
        self.scale: np.ndarray | None = None

    def fit(self, features: np.ndarray, labels: Sequence[DomainLabel | str]) -> "NearestCentroidClassifier":
        F = np.atleast_2d(np.asarray(features, float))
        labs = [DomainLabel(x) for x in labels]
        self.scale = F.std(axis=0) + 1e-9
        self.labels = sorted(set(labs), key=DOMAIN_ORDER.index)
        self.centroids = np.stack(
            [F[[i for i, x in enumerate(labs) if x == lab]].mean(axis=0) for lab in self.labels]
        )
        return self

    def predict(self, features: np.ndarray) -> list[DomainLabel]:
        if self.centroids is None:
            raise RuntimeError("classifier is not fitted")
        F = np.atleast_2d(np.asarray(features, float))
        d = (((F[:, None, :] - self.centroids[None]) / self.scale) ** 2).sum(axis=2)
        return [self.labels[i] for i in np.argmin(d, axis=1)]


def chunk_features(energy: np.ndarray, frame_step: float, chunk: float = 10.0) -> np.ndarray:
    """Per-chunk (mean, std, 10th and 90th percentile) of log energy."""
    log_e = np.log(np.maximum(np.asarray(energy, float), 1e-12))
    duration = log_e.size * frame_step
    rows = []
    for iv in chunk_session(duration, chunk):
        seg = log_e[int(round(iv.onset / frame_step)) : int(round(iv.offset / frame_step))]
        rows.append([seg.mean(), seg.std(), *np.percentile(seg, [10, 90])])
    return np.array(rows)


def classify_session(
    energy: np.ndarray, frame_step: float, classifier: SegmentClassifier, chunk: float = 10.0
) -> tuple[DomainLabel, list[DomainLabel]]:
    preds = classifier.predict(chunk_features(energy, frame_step, chunk))
    return vote_session_domain(preds), preds
