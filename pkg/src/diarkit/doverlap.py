"""Overlap-aware rank-weighted fusion of diarization hypotheses (DOVER-Lap)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyReferenceSpeech, TooFewSystems, UnnormalizedWeights
from .formats import RttmDocument, Span, Turn, UemDocument, intersect_spans, spans_membership, total_duration, union_spans
from .metrics import optimal_mapping, score_der

ROUNDING_RULES = ("nearest-even", "floor", "ceil")


@dataclass(frozen=True)
class SystemHypothesis:
    name: str
    doc: RttmDocument
    weight: float | None = None

    def __post_init__(self):
        if self.weight is not None and self.weight < 0:
            raise ValueError("weight must be non-negative")


@dataclass(frozen=True)
class FusionConfig:
    rank_exponent: float = 1.0
    speaker_count_rounding: str = "nearest-even"

    def __post_init__(self):
        if not math.isfinite(self.rank_exponent) or self.rank_exponent < 0:
            raise ValueError("rank_exponent must be finite and >= 0")
        if self.speaker_count_rounding not in ROUNDING_RULES:
            raise ValueError(f"rounding must be one of {ROUNDING_RULES}")


def _check_names(hyps: Sequence[SystemHypothesis]) -> None:
    names = [h.name for h in hyps]
    if len(set(names)) != len(names):
        raise ValueError("system names must be unique")


def pairwise_der(hyps: Sequence[SystemHypothesis], uem: UemDocument | None = None) -> np.ndarray:
    """``D[i, j]`` = DER of system i scored against system j as pseudo-reference."""
    n = len(hyps)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ref, hyp = hyps[j].doc, hyps[i].doc
            u = uem if uem is not None else UemDocument.covering(ref, hyp)
            try:
                D[i, j] = score_der(ref, hyp, u).der_pct
            except EmptyReferenceSpeech:
                D[i, j] = 0.0 if not hyp.turns else 100.0
    return D


def rank_systems(
    hyps: Sequence[SystemHypothesis], uem: UemDocument | None = None, config: FusionConfig = FusionConfig()
) -> list[float]:
    """Normalized fusion weights, in input order.

    Without explicit weights, systems are ranked by mean DER against all others;
    tied systems share their average rank and therefore their weight.
    """
    if len(hyps) < 2:
        raise TooFewSystems("need at least 2 systems")
    _check_names(hyps)
    explicit = [h.weight for h in hyps]
    if all(w is not None for w in explicit):
        w = np.asarray(explicit, float)
        if w.sum() <= 0:
            raise ValueError("explicit weights sum to zero")
        return (w / w.sum()).tolist()
    if any(w is not None for w in explicit):
        raise ValueError("explicit weights must be given for all systems or none")
    D = pairwise_der(hyps, uem)
    mean_der = D.sum(axis=1) / (len(hyps) - 1)
    # 1e-9 quantization lets float noise count as a tie
    ranks = rankdata(np.round(mean_der, 9), method="average")
    w = ranks ** (-config.rank_exponent)
    return (w / w.sum()).tolist()


def _fusion_order(hyps: Sequence[SystemHypothesis], weights: Sequence[float] | None) -> list[int]:
    if weights is None:
        return list(range(len(hyps)))
    return sorted(range(len(hyps)), key=lambda i: (-weights[i], hyps[i].name))


def map_labels(
    hyps: Sequence[SystemHypothesis], weights: Sequence[float] | None = None
) -> list[SystemHypothesis]:
    """Relabel all systems into one speaker namespace.

    The anchor system (first in input order, or highest weight when weights are
    given) keeps its labels; each following system is matched one-to-one to the
    global speakers by maximal overlap time. Unmatched speakers get fresh ids
    ``<system>:<speaker>``.
    """
    if len(hyps) < 2:
        raise TooFewSystems("need at least 2 systems")
    _check_names(hyps)
    order = _fusion_order(hyps, weights)
    recs = sorted({r for h in hyps for r in h.doc.recordings})
    renamed: dict[int, list[Turn]] = {i: [] for i in range(len(hyps))}
    for rec in recs:
        global_spans: dict[str, list[Span]] = {}
        for pos, i in enumerate(order):
            spans = hyps[i].doc.speaker_spans(rec)
            local = list(spans)
            mapping: dict[str, str] = {}
            if pos == 0:
                mapping = {s: s for s in local}
            else:
                gids = list(global_spans)
                C = np.array(
                    [[total_duration(intersect_spans(spans[s], global_spans[g])) for g in gids] for s in local]
                ).reshape(len(local), len(gids))
                for r, c in optimal_mapping(C):
                    mapping[local[r]] = gids[c]
                for s in local:
                    if s not in mapping:
                        fresh = f"{hyps[i].name}:{s}"
                        while fresh in global_spans:
                            fresh += "'"
                        mapping[s] = fresh
            for s in local:
                g = mapping[s]
                global_spans[g] = union_spans(global_spans.get(g, []) + spans[s])
                renamed[i].extend(Turn.make(rec, g, on, off) for on, off in spans[s])
    return [replace(h, doc=RttmDocument(tuple(renamed[i]))) for i, h in enumerate(hyps)]


def _round_count(x: float, rule: str) -> int:
    if rule == "floor":
        return int(math.floor(x + 1e-9))
    if rule == "ceil":
        return int(math.ceil(x - 1e-9))
    # snap float noise onto exact halves before banker's rounding
    return int(round(round(x * 1e9) / 1e9))


def doverlap_fuse(
    hyps: Sequence[SystemHypothesis], weights: Sequence[float], config: FusionConfig = FusionConfig()
) -> RttmDocument:
    """Region-wise weighted voting over label-aligned hypotheses."""
    w = np.asarray(weights, float)
    if w.size != len(hyps) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-6):
        raise UnnormalizedWeights("weights must be non-negative, one per system, summing to 1")
    out: list[Turn] = []
    recs = sorted({r for h in hyps for r in h.doc.recordings})
    for rec in recs:
        per_sys = [h.doc.speaker_spans(rec) for h in hyps]
        bounds = sorted({b for sp in per_sys for spans in sp.values() for s in spans for b in s})
        if len(bounds) < 2:
            continue
        b = np.asarray(bounds)
        mids = 0.5 * (b[:-1] + b[1:])
        speakers = sorted({s for sp in per_sys for s in sp})
        # active[k, s, m]: system k asserts speaker s in region m
        active = np.zeros((len(hyps), len(speakers), len(mids)), dtype=bool)
        for k, sp in enumerate(per_sys):
            for si, s in enumerate(speakers):
                if s in sp:
                    active[k, si] = spans_membership(sp[s], mids)
        counts = np.einsum("k,km->m", w, active.sum(axis=1).astype(float))
        votes = np.einsum("k,ksm->sm", w, active.astype(float))
        fused: dict[str, list[Span]] = {s: [] for s in speakers}
        for m in range(len(mids)):
            n_hat = _round_count(counts[m], config.speaker_count_rounding)
            if n_hat <= 0:
                continue
            cand = [si for si in range(len(speakers)) if votes[si, m] > 0]
            # highest vote first, ties broken lexicographically (speakers is sorted)
            cand.sort(key=lambda si: (-round(votes[si, m], 12), si))
            for si in cand[:n_hat]:
                fused[speakers[si]].append((b[m], b[m + 1]))
        for s, spans in fused.items():
            out.extend(Turn.make(rec, s, on, off) for on, off in union_spans(spans))
    return RttmDocument(tuple(out))


@dataclass(frozen=True)
class FusionResult:
    doc: RttmDocument
    weights: dict[str, float]


def fuse_hypotheses(
    hyps: Sequence[SystemHypothesis], uem: UemDocument | None = None, config: FusionConfig = FusionConfig()
) -> FusionResult:
    """Rank, align labels, and vote."""
    weights = rank_systems(hyps, uem, config)
    aligned = map_labels(hyps, weights)
    fused = doverlap_fuse(aligned, weights, config)
    return FusionResult(fused, {h.name: w for h, w in zip(hyps, weights)})
