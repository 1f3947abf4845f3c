import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diarkit.errors import EmptyReferenceSpeech, EmptyUem, UnknownRecording
from diarkit.formats import RttmDocument, Turn, UemDocument
from diarkit.metrics import DerBreakdown, optimal_mapping, score_der, score_jer, score_sad
from helpers import DER_FIXTURES, brute_force_der, random_doc, der_fixture_pair


def doc(*turns, rec="r"):
    return RttmDocument(tuple(Turn.make(rec, s, a, b) for s, a, b in turns))


@pytest.mark.parametrize("miss, fa, spkerr, reported", DER_FIXTURES)
def test_der_fixture_additivity(miss, fa, spkerr, reported):
    ref, hyp, uem = der_fixture_pair(miss, fa, spkerr)
    b = score_der(ref, hyp, uem)
    assert b.miss_pct == pytest.approx(miss, abs=1e-9)
    assert b.fa_pct == pytest.approx(fa, abs=1e-9)
    assert b.spkerr_pct == pytest.approx(spkerr, abs=1e-9)
    assert abs(b.der_pct - reported) <= 0.005
    assert b.der_pct == pytest.approx(b.miss_pct + b.fa_pct + b.spkerr_pct, abs=1e-12)


def test_identity_scores_zero():
    ref = doc(("A", 0, 5), ("B", 4, 9))
    b = score_der(ref, ref)
    assert (b.miss_pct, b.fa_pct, b.spkerr_pct, b.der_pct) == (0, 0, 0, 0)
    assert score_jer(ref, ref).jer_pct == 0


def test_swapped_segment_matches_brute_force():
    ref = doc(("A", 0, 10), ("B", 10, 20), ("A", 20, 30))
    hyp = doc(("x", 0, 10), ("y", 10, 20), ("y", 20, 30))
    b = score_der(ref, hyp)
    miss, fa, spk, scored = brute_force_der(ref, hyp, "r", (0, 30))
    assert b.spkerr_time == pytest.approx(spk, abs=1e-9) == 10.0
    assert (b.miss_time, b.fa_time) == (miss, fa) == (0, 0)
    assert b.speaker_map == {("r", "A"): "x", ("r", "B"): "y"}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5), st.integers(1, 5))
def test_mapping_optimal_against_bijection_search(seed, n_ref, n_hyp):
    rng = np.random.default_rng(seed)
    ref = random_doc(rng, n_spk=n_ref, n_turns=10, horizon=40)
    hyp = random_doc(rng, n_spk=n_hyp, n_turns=10, horizon=40)
    region = (0.0, max(ref.extent("r"), hyp.extent("r")))
    b = score_der(ref, hyp)
    miss, fa, spk, scored = brute_force_der(ref, hyp, "r", region)
    assert b.miss_time == pytest.approx(miss, abs=1e-9)
    assert b.fa_time == pytest.approx(fa, abs=1e-9)
    assert b.spkerr_time == pytest.approx(spk, abs=1e-9)
    assert b.scored_speaker_time == pytest.approx(scored, abs=1e-9)
    assert len(set(b.speaker_map.values())) == len(b.speaker_map)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_label_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    ref = random_doc(rng, n_turns=10)
    hyp = random_doc(rng, n_turns=10)
    names = hyp.speakers()
    renamed = hyp.rename(dict(zip(names, [f"z{k}" for k in rng.permutation(len(names))])))
    a, b = score_der(ref, hyp), score_der(ref, renamed)
    assert (a.miss_time, a.fa_time, a.spkerr_time) == pytest.approx((b.miss_time, b.fa_time, b.spkerr_time), abs=1e-12)
    assert score_jer(ref, hyp).jer_pct == pytest.approx(score_jer(ref, renamed).jer_pct)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_spurious_turn_in_silence_never_lowers_fa(seed):
    rng = np.random.default_rng(seed)
    ref = random_doc(rng, n_turns=8, horizon=50)
    hyp = random_doc(rng, n_turns=8, horizon=50)
    uem = UemDocument.from_spans({"r": [(0, 200)]})
    extra = hyp.merged_with(doc(("ghost", 150, 160)))
    assert score_der(ref, extra, uem).fa_pct >= score_der(ref, hyp, uem).fa_pct


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_self_score_is_zero(seed):
    ref = random_doc(np.random.default_rng(seed))
    assert score_der(ref, ref).der_pct == 0
    assert score_jer(ref, ref).jer_pct == 0


def test_accumulation_over_recordings_is_additive():
    rng = np.random.default_rng(3)
    ref = random_doc(rng, rec="a").merged_with(random_doc(rng, rec="b"))
    hyp = random_doc(rng, rec="a").merged_with(random_doc(rng, rec="b"))
    total = score_der(ref, hyp)
    parts = score_der(ref.for_recording("a"), hyp.for_recording("a")) + score_der(
        ref.for_recording("b"), hyp.for_recording("b")
    )
    assert total.error_time == pytest.approx(parts.error_time)
    assert total.der_pct == pytest.approx(parts.der_pct)


def test_collar_and_overlap_exclusion():
    ref = doc(("A", 0, 10), ("B", 5, 15))
    hyp = doc(("a", 0.2, 10), ("b", 5, 15))
    assert score_der(ref, hyp, collar=0.25).der_pct == 0
    assert score_der(ref, hyp).miss_time == pytest.approx(0.2)
    no_ov = score_der(ref, hyp, score_overlap=False)
    assert no_ov.scored_speaker_time == pytest.approx(10.0)


def test_der_errors():
    with pytest.raises(EmptyReferenceSpeech):
        score_der(RttmDocument(), doc(("a", 0, 1)))
    uem = UemDocument.from_spans({"r": [(0, 10)]})
    with pytest.raises(UnknownRecording):
        score_der(doc(("A", 0, 1)), doc(("a", 0, 1), rec="other"), uem)


def test_optimal_mapping_drops_zero_pairs():
    assert optimal_mapping(np.array([[0.0, 0.0], [0.0, 3.0]])) == [(1, 1)]


def test_jer_examples():
    ref = doc(("A", 0, 10))
    assert score_jer(ref, RttmDocument()).jer_pct == 100
    half = score_jer(ref, doc(("x", 0, 5)))
    # oracle: |[0,5)| / |[0,10)|
    assert half.per_speaker[("r", "A")] == pytest.approx(100 * (1 - 5 / 10))
    two = score_jer(doc(("A", 0, 10), ("B", 10, 20)), doc(("x", 0, 20)))
    assert two.jer_pct == pytest.approx((50 + 100) / 2)


def test_sad_examples():
    uem = UemDocument.from_spans({"r": [(0, 100)]})
    ref = doc(("A", 0, 30), ("B", 20, 50))
    assert score_sad(ref, doc(("speech", 0, 50)), uem).total_pct == 0
    e = score_sad(ref, doc(("speech", 0, 40)), uem)
    assert (e.miss_pct, e.fa_pct, e.total_pct) == pytest.approx((10, 0, 10))
    full = score_sad(ref, doc(("speech", 0, 100)), uem)
    assert (full.miss_pct, full.fa_pct) == pytest.approx((0, 50))
    assert full.normalizer == "uem"
    with pytest.raises(EmptyUem):
        score_sad(RttmDocument(), RttmDocument(), UemDocument())


def test_breakdown_rejects_empty_normalizer():
    with pytest.raises(EmptyReferenceSpeech):
        DerBreakdown(0, 0, 0, 0).der_pct
