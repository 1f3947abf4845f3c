import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from diarkit.clustering import (
    AhcConfig,
    BhmmConfig,
    ClusterLabels,
    Embedding,
    PldaModel,
    ahc,
    bhmm_resegment,
    calibrated_threshold,
    cluster_session,
    conversation_pca,
    fit_conversation_pca,
    interpolate_plda_scores,
    parse_embeddings,
    plda_score_matrix,
    write_embeddings,
)
from diarkit.errors import DimensionMismatch, MalformedLine, NonPositiveDefiniteWithin, NonSymmetricMatrix, ShapeMismatch
from diarkit.formats import TimeInterval
from diarkit.synthlab import SynthSessionSpec, gen_session, synth_plda_models
from helpers import adjusted_rand, corrupted_case, hyp_labels, label_error


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + 0.5 * np.eye(d))


# ---------------------------------------------------------------- PLDA


def test_plda_matches_dense_gaussian_oracle():
    rng = np.random.default_rng(0)
    d = 4
    B, W = random_spd(rng, d), random_spd(rng, d, 0.5)
    mean = rng.normal(size=d)
    model = PldaModel(mean, B, W)
    X = rng.normal(size=(3, d)) * 2 + mean
    S = plda_score_matrix(model, X)
    T = B + W
    same = np.block([[T, B], [B, T]])
    diff = np.block([[T, np.zeros((d, d))], [np.zeros((d, d)), T]])
    for i, j in itertools.product(range(3), repeat=2):
        z = np.concatenate([X[i], X[j]])
        mu = np.concatenate([mean, mean])
        oracle = multivariate_normal(mu, same).logpdf(z) - multivariate_normal(mu, diff).logpdf(z)
        assert S[i, j] == pytest.approx(oracle, abs=1e-8)


def test_plda_likelihood_ordering():
    model = PldaModel(np.zeros(3), np.eye(3), np.eye(3))
    X = np.array([[0.0, 0, 0], [0.0, 0, 0], [10 * np.sqrt(2), 0, 0]])
    S = plda_score_matrix(model, X)
    assert S[0, 1] > S[0, 2]


def test_plda_zero_between_cov_gives_zero_llr():
    rng = np.random.default_rng(1)
    S = plda_score_matrix(PldaModel(np.zeros(4), np.zeros((4, 4)), np.eye(4)), rng.normal(size=(5, 4)))
    assert np.allclose(S, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_plda_symmetric_and_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    model = PldaModel(rng.normal(size=5), random_spd(rng, 5), random_spd(rng, 5))
    X = rng.normal(size=(7, 5))
    S = plda_score_matrix(model, X)
    perm = rng.permutation(7)
    assert np.allclose(S, S.T)
    assert np.allclose(plda_score_matrix(model, X[perm]), S[np.ix_(perm, perm)])


def test_plda_errors():
    with pytest.raises(NonPositiveDefiniteWithin):
        PldaModel(np.zeros(2), np.eye(2), np.diag([1.0, -1.0]))
    with pytest.raises(DimensionMismatch):
        plda_score_matrix(PldaModel(np.zeros(2), np.eye(2), np.eye(2)), np.zeros((3, 4)))


def test_plda_save_load(tmp_path):
    rng = np.random.default_rng(2)
    m = PldaModel(rng.normal(size=3), random_spd(rng, 3), random_spd(rng, 3))
    m.save(tmp_path / "m.npz")
    back = PldaModel.load(tmp_path / "m.npz")
    assert np.array_equal(back.between_cov, m.between_cov) and np.array_equal(back.mean, m.mean)


# ---------------------------------------------------------------- interpolation


def test_interpolation_examples():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    assert np.array_equal(interpolate_plda_scores(a, b, 1.0), a)
    assert interpolate_plda_scores(np.ones((2, 2)), np.zeros((2, 2)), 0.57)[0, 1] == pytest.approx(0.57)
    assert np.allclose(interpolate_plda_scores(a, -a, 0.5), 0)
    with pytest.raises(ShapeMismatch):
        interpolate_plda_scores(a, np.zeros((3, 3)), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_interpolation_linearity(alpha, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    total = interpolate_plda_scores(a, b, alpha) + interpolate_plda_scores(b, a, alpha)
    assert np.allclose(total, a + b)


# ---------------------------------------------------------------- PCA


def test_pca_full_energy_keeps_dimension():
    X = np.random.default_rng(4).normal(size=(20, 6))
    assert conversation_pca(X, 1.0).shape == (20, 6)


def test_pca_concentrated_variance_keeps_one():
    rng = np.random.default_rng(5)
    X = np.column_stack([rng.normal(size=5000) * np.sqrt(0.9), rng.normal(size=5000) * np.sqrt(0.1)])
    pca = fit_conversation_pca(X, 0.3)
    # oracle: leading eigenvalue share alone exceeds 0.3
    ev = np.linalg.eigvalsh(np.cov(X.T, bias=True))[::-1]
    assert ev[0] / ev.sum() >= 0.3
    assert pca.kept == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_pca_reconstruction_error_is_discarded_mass(seed, target):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5))
    pca = fit_conversation_pca(X, target)
    resid = X - pca.reconstruct(pca.project(X))
    per_sample = (resid**2).sum() / X.shape[0]
    assert per_sample == pytest.approx(pca.eigenvalues[pca.kept :].sum(), abs=1e-8)
    cum = np.cumsum(pca.eigenvalues)
    assert cum[pca.kept - 1] >= target * cum[-1] * (1 - 1e-9)
    if pca.kept > 1:
        assert cum[pca.kept - 2] < target * cum[-1]


def test_pca_identical_embeddings_keep_one_component():
    pca = fit_conversation_pca(np.ones((5, 4)), 0.3)
    assert pca.kept == 1


# ---------------------------------------------------------------- AHC


def test_ahc_single():
    assert ahc(np.zeros((1, 1))) == ClusterLabels((0,), 1)


def test_ahc_planted_blocks():
    rng = np.random.default_rng(6)
    truth = np.repeat([0, 1], 5)
    S = np.where(truth[:, None] == truth[None, :], 10.0, -10.0) + rng.normal(scale=0.1, size=(10, 10))
    S = (S + S.T) / 2
    out = ahc(S, AhcConfig(threshold_bias=0.5))
    assert out.num_clusters == 2
    assert adjusted_rand(out.assignment, truth) == 1.0


def test_ahc_equal_scores_single_cluster():
    for n in (2, 5, 9):
        out = ahc(np.full((n, n), 3.0), AhcConfig(threshold_bias=0.5))
        assert out.num_clusters == 1
        assert calibrated_threshold(np.full((n, n), 3.0)) == 0.0


def test_ahc_rejects_asymmetric():
    with pytest.raises(NonSymmetricMatrix):
        ahc(np.array([[0.0, 1.0], [2.0, 0.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ahc_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 3, size=12)
    S = np.where(truth[:, None] == truth[None, :], 5.0, -5.0) + rng.normal(scale=2.0, size=(12, 12))
    S = (S + S.T) / 2
    perm = rng.permutation(12)
    a = np.asarray(ahc(S).assignment)
    b = np.asarray(ahc(S[np.ix_(perm, perm)]).assignment)
    assert adjusted_rand(a[perm], b) == 1.0


# ---------------------------------------------------------------- BHMM


def test_bhmm_fixed_point_on_optimal_init():
    sess, in_plda, truth, _ = corrupted_case(0)
    out = bhmm_resegment(sess.embeddings, in_plda, ClusterLabels.from_raw(truth))
    assert label_error(out.assignment, truth) == 0


def test_bhmm_purifies_corrupted_labels():
    for seed in range(5):
        sess, in_plda, truth, init = corrupted_case(seed)
        before = label_error(init, truth)
        after = label_error(bhmm_resegment(sess.embeddings, in_plda, ClusterLabels.from_raw(init)).assignment, truth)
        assert after <= 0.7 * before


def test_bhmm_more_iterations_not_worse():
    better = 0
    for seed in range(10):
        sess, in_plda, truth, init = corrupted_case(seed, rate=0.35)
        e1 = label_error(bhmm_resegment(sess.embeddings, in_plda, ClusterLabels.from_raw(init), BhmmConfig(max_iters=1)).assignment, truth)
        e7 = label_error(bhmm_resegment(sess.embeddings, in_plda, ClusterLabels.from_raw(init), BhmmConfig(max_iters=7)).assignment, truth)
        better += e7 <= e1
    assert better >= 8


def test_bhmm_objective_non_decreasing():
    for seed in range(10):
        sess, in_plda, _, init = corrupted_case(seed, rate=0.3)
        obj = bhmm_resegment(sess.embeddings, in_plda, ClusterLabels.from_raw(init), BhmmConfig(max_iters=7)).metadata["objective"]
        assert all(b >= a - 1e-6 for a, b in zip(obj, obj[1:]))


def _enumerated_marginals(log_emit, A):
    T, S = log_emit.shape
    logp = {}
    for path in itertools.product(range(S), repeat=T):
        lp = -np.log(S) + sum(log_emit[t, s] for t, s in enumerate(path))
        lp += sum(np.log(A[a, b]) for a, b in zip(path, path[1:]))
        logp[path] = lp
    total = logsumexp(list(logp.values()))
    gamma = np.zeros((T, S))
    for path, lp in logp.items():
        for t, s in enumerate(path):
            gamma[t, s] += np.exp(lp - total)
    return gamma


def test_bhmm_flat_likelihood_matches_transition_oracle():
    rng = np.random.default_rng(11)
    means = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    init = np.array([0, 0, 1, 1, 2, 2])
    X = means[init] + rng.normal(scale=0.3, size=(6, 2))
    factor = 1e9
    out = bhmm_resegment(X, None, ClusterLabels.from_raw(init), BhmmConfig(max_iters=1, smoothing_factor=factor))
    mu = np.stack([X[init == k].mean(axis=0) for k in range(3)])
    log_emit = -0.5 * ((X[:, None, :] - mu[None]) ** 2).sum(axis=2) / factor
    A = np.full((3, 3), 0.005)
    np.fill_diagonal(A, 0.99)
    oracle = _enumerated_marginals(log_emit, A).argmax(axis=1)
    assert adjusted_rand(out.assignment, oracle) == 1.0
    # flattened likelihoods leave only the transitions: one state for the whole sequence
    assert out.num_clusters == 1


# ---------------------------------------------------------------- cluster_session


def _session(seed, speakers=3):
    spec = SynthSessionSpec(num_speakers=speakers, duration=120, seed=seed, noise_level=0.1)
    sess = gen_session(spec)
    return sess, *synth_plda_models(spec)


def test_cluster_session_recovers_speakers():
    for seed in range(3):
        sess, in_plda, out_plda = _session(seed)
        doc = cluster_session(sess.embeddings, in_plda, out_plda)
        assert adjusted_rand(hyp_labels(doc, sess), sess.embedding_truth) >= 0.99


def test_cluster_session_single_embedding():
    e = Embedding(np.ones(4), TimeInterval(1.0, 2.5), "r")
    m = PldaModel(np.zeros(4), np.eye(4), np.eye(4))
    doc = cluster_session([e], m, m)
    assert len(doc) == 1 and doc.turns[0].interval == TimeInterval(1.0, 2.5)


def test_cluster_session_isolation():
    a, in_a, out_a = _session(1)
    b, _, _ = _session(2)
    alone = cluster_session(a.embeddings, in_a, out_a)
    cluster_session(b.embeddings, in_a, out_a)
    assert cluster_session(a.embeddings, in_a, out_a) == alone


def test_embedding_table_roundtrip():
    sess, _, _ = _session(0, speakers=2)
    text = write_embeddings(sess.embeddings)
    back = parse_embeddings(text)
    assert len(back) == len(sess.embeddings)
    assert all(np.array_equal(x.vector, y.vector) and x.source_interval == y.source_interval for x, y in zip(back, sess.embeddings))
    with pytest.raises(MalformedLine):
        parse_embeddings("r 0 1 3 0.1 0.2")
