"""Final assembly: laughter-token overlap assignment and per-domain system selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

from .domainroute import DOMAIN_ORDER, DomainLabel
from .errors import UncoveredRecording
from .formats import RttmDocument, TokenAnnotation, Turn
from .metrics import DerBreakdown

LAUGH_TOKEN = "[laugh]"


class LaughterResult(NamedTuple):
    doc: RttmDocument
    assigned: int
    ignored: int


def assign_laughter(
    diar: RttmDocument,
    tokens: Sequence[TokenAnnotation],
    neighborhood: float = 2.0,
    token: str = LAUGH_TOKEN,
) -> LaughterResult:
    """Give each laughter token's interval to every speaker talking within ``neighborhood`` seconds of it.

    Assignment repeats until stable, since an assigned token can make its speaker
    a neighbor of an adjacent token; this makes the operation idempotent.
    """
    toks = [t for t in tokens if t.token == token]
    owners: list[set[str]] = [set() for _ in toks]
    doc = diar
    while True:
        added: list[Turn] = []
        for k, tok in enumerate(toks):
            lo, hi = tok.interval.onset - neighborhood, tok.interval.offset + neighborhood
            near = {t.speaker_id for t in doc.turns if t.recording_id == tok.recording_id and t.onset < hi and t.offset > lo}
            added.extend(Turn(tok.recording_id, spk, tok.interval) for spk in sorted(near - owners[k]))
            owners[k] |= near
        if not added:
            break
        doc = doc.merged_with(RttmDocument(tuple(added)))
    assigned = sum(1 for o in owners if o)
    return LaughterResult(doc, assigned, len(toks) - assigned)


@dataclass
class Selection:
    doc: RttmDocument
    per_domain: dict[str, str] = field(default_factory=dict)
    per_recording: dict[str, str] = field(default_factory=dict)

    def manifest(self) -> dict:
        return {"per_domain": dict(sorted(self.per_domain.items())), "per_recording": dict(sorted(self.per_recording.items()))}


def _der_value(score: DerBreakdown | float) -> float:
    return score.der_pct if isinstance(score, DerBreakdown) else float(score)


def domain_der(dev_scores: Mapping, system: str, domain: DomainLabel) -> float:
    """Dev DER of ``system`` on ``domain``: a per-domain mapping or one overall score."""
    entry = dev_scores.get(system)
    if entry is None:
        return float("inf")
    if isinstance(entry, Mapping):
        for key in (domain, domain.value):
            if key in entry:
                return _der_value(entry[key])
        return float("inf")
    return _der_value(entry)


def select_per_domain(
    candidates: Mapping[str, RttmDocument],
    dev_scores: Mapping,
    domain_of: Mapping[str, DomainLabel | str],
) -> Selection:
    """For every domain pick the candidate with the lowest dev DER (ties by name).

    A recording the domain winner does not cover falls back to the next-best candidate that covers it.
    """
    ranked_by_domain: dict[DomainLabel, list[str]] = {}
    domains = sorted({DomainLabel(d) for d in domain_of.values()}, key=DOMAIN_ORDER.index)
    for dom in domains:
        ranked_by_domain[dom] = sorted(candidates, key=lambda n: (domain_der(dev_scores, n, dom), n))
    sel = Selection(RttmDocument())
    turns: list[Turn] = []
    for dom in domains:
        sel.per_domain[dom.value] = ranked_by_domain[dom][0]
    for rec in sorted(domain_of):
        dom = DomainLabel(domain_of[rec])
        chosen = next((n for n in ranked_by_domain[dom] if rec in candidates[n].recordings), None)
        if chosen is None:
            raise UncoveredRecording(rec)
        sel.per_recording[rec] = chosen
        turns.extend(candidates[chosen].for_recording(rec).turns)
    sel.doc = RttmDocument(tuple(turns))
    return sel
