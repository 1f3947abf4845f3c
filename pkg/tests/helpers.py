"""Shared generators and independent oracles for the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from diarkit.formats import RttmDocument, Turn


def random_doc(rng: np.random.Generator, rec: str = "r", n_spk: int = 3, n_turns: int = 12, horizon: float = 60.0) -> RttmDocument:
    """Random turns on a millisecond grid."""
    turns = []
    for _ in range(n_turns):
        on = int(rng.integers(0, int(horizon * 1000) - 200))
        dur = int(rng.integers(50, 8000))
        turns.append(Turn.make(rec, f"s{int(rng.integers(n_spk))}", on / 1000, (on + dur) / 1000))
    return RttmDocument(tuple(turns))


def _active(spans_by_spk, t):
    return {s for s, spans in spans_by_spk.items() if any(a <= t < b for a, b in spans)}


def _injections(n: int, m: int):
    """Every partial injective map from n items into m slots (None = unmapped)."""
    if n == 0:
        yield ()
        return
    for rest in _injections(n - 1, m):
        taken = {j for j in rest if j is not None}
        yield (*rest, None)
        for j in range(m):
            if j not in taken:
                yield (*rest, j)


def brute_force_der(ref: RttmDocument, hyp: RttmDocument, rec: str, region: tuple[float, float]):
    """(miss, fa, spkerr, scored) seconds by enumerating every injective speaker mapping."""
    rs, hs = ref.speaker_spans(rec), hyp.speaker_spans(rec)
    cuts = {region[0], region[1]}
    for spans in (*rs.values(), *hs.values()):
        for a, b in spans:
            cuts.update(x for x in (a, b) if region[0] < x < region[1])
    cuts = sorted(cuts)
    segs = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = (a + b) / 2
        segs.append((b - a, _active(rs, m), _active(hs, m)))
    miss = sum(d * max(len(R) - len(H), 0) for d, R, H in segs)
    fa = sum(d * max(len(H) - len(R), 0) for d, R, H in segs)
    scored = sum(d * len(R) for d, R, H in segs)
    ref_ids, hyp_ids = sorted(rs), sorted(hs)
    C = [[sum(d for d, R, H in segs if r in R and h in H) for h in hyp_ids] for r in ref_ids]
    best = max((sum(C[i][j] for i, j in enumerate(m) if j is not None) for m in _injections(len(ref_ids), len(hyp_ids))), default=0.0)
    spkerr = sum(d * min(len(R), len(H)) for d, R, H in segs) - best
    return miss, fa, spkerr, scored


def adjusted_rand(a, b) -> float:
    from sklearn.metrics import adjusted_rand_score

    return float(adjusted_rand_score(list(a), list(b)))


DER_FIXTURES = [
    # (miss %, fa %, speaker error %, reported DER %)
    (12.00, 0.00, 4.22, 16.22),
    (7.61, 2.61, 2.73, 12.95),
    (5.12, 1.74, 1.90, 8.76),
    (5.40, 1.21, 1.70, 8.31),
]


def der_fixture_pair(miss: float, fa: float, spkerr: float):
    """Reference of 100 s single-speaker speech and a hypothesis with the given error seconds."""
    from diarkit.formats import Turn, UemDocument

    ref = RttmDocument((Turn.make("cts", "A", 0.0, 100.0),))
    hyp_turns = [Turn.make("cts", "a", miss, 100.0 - spkerr)]
    if spkerr > 0:
        hyp_turns.append(Turn.make("cts", "b", 100.0 - spkerr, 100.0))
    if fa > 0:
        hyp_turns.append(Turn.make("cts", "a", 110.0, 110.0 + fa))
    uem = UemDocument.from_spans({"cts": [(0.0, 120.0)]})
    return ref, RttmDocument(tuple(hyp_turns)), uem


def label_error(labels, truth) -> float:
    """Frame-label error under the best one-to-one label matching."""
    from scipy.optimize import linear_sum_assignment

    labels, truth = np.asarray(labels), np.asarray(truth)
    ls, ts = sorted(set(labels.tolist())), sorted(set(truth.tolist()))
    C = np.array([[np.sum((labels == a) & (truth == b)) for b in ts] for a in ls])
    r, c = linear_sum_assignment(C, maximize=True)
    return 1.0 - C[r, c].sum() / truth.size


def corrupted_case(seed: int, rate: float = 0.2):
    """Two-speaker session with a fraction ``rate`` of embedding labels flipped."""
    from diarkit.synthlab import SynthSessionSpec, gen_session, synth_plda_models

    spec = SynthSessionSpec(num_speakers=2, duration=120, seed=seed, noise_level=0.1)
    sess = gen_session(spec)
    in_plda, _ = synth_plda_models(spec)
    ids = sorted(set(sess.embedding_truth))
    truth = np.array([ids.index(x) for x in sess.embedding_truth])
    rng = np.random.default_rng(10_000 + seed)
    init = truth.copy()
    flip = rng.random(truth.size) < rate
    init[flip] = 1 - init[flip]
    return sess, in_plda, truth, init


def hyp_labels(doc: RttmDocument, sess) -> list[str]:
    """Hypothesis speaker at each embedding's centre."""
    spans = doc.speaker_spans(sess.recording_id)
    out = []
    for e in sess.embeddings:
        t = (e.source_interval.onset + e.source_interval.offset) / 2
        out.append(next(s for s, ss in spans.items() if any(a <= t < b for a, b in ss)))
    return out


def flipped_systems(rng: np.random.Generator, n_frames: int, p: float, k: int = 3):
    """Random binary truth and ``k`` copies with each frame flipped independently with probability ``p``."""
    from diarkit.sad import SadPosterior

    truth = rng.random(n_frames) < 0.5
    systems = [SadPosterior("r", 0.01, np.where(rng.random(n_frames) < p, ~truth, truth).astype(float)) for _ in range(k)]
    return truth, systems


def frame_error(pred, truth) -> float:
    return float(np.mean(np.asarray(pred) != np.asarray(truth)))


ACCEPTANCE_LINES: list[str] = []
