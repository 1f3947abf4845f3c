"""Clustering-based diarization: PLDA scoring, conversation PCA, AHC and VB-HMM resegmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    EmptyInput,
    MalformedLine,
    NonPositiveDefiniteWithin,
    NonSymmetricMatrix,
    ShapeMismatch,
)
from .formats import RttmDocument, TimeInterval, Turn


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    source_interval: TimeInterval
    recording_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).ravel()
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("embedding vector must be non-empty and finite")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True, eq=False)
class PldaModel:
    """Two-covariance PLDA: x = mean + speaker (between_cov) + residual (within_cov)."""

    mean: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        B = np.asarray(self.between_cov, dtype=float)
        W = np.asarray(self.within_cov, dtype=float)
        d = mean.size
        if B.shape != (d, d) or W.shape != (d, d):
            raise DimensionMismatch(f"covariances must be {d}x{d}")
        if not np.allclose(W, W.T) or not np.allclose(B, B.T):
            raise NonSymmetricMatrix("PLDA covariances must be symmetric")
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise NonPositiveDefiniteWithin("within-speaker covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "between_cov", B)
        object.__setattr__(self, "within_cov", W)

    @property
    def dim(self) -> int:
        return self.mean.size

    def project(self, center: np.ndarray, basis: np.ndarray) -> "PldaModel":
        """Model of ``(x - center) @ basis``."""
        return PldaModel(
            (self.mean - center) @ basis,
            basis.T @ self.between_cov @ basis,
            basis.T @ self.within_cov @ basis,
        )

    def whitening(self, max_dim: int | None = None) -> np.ndarray:
        """Projection making within-cov identity and between-cov diagonal, leading dims first."""
        L = np.linalg.cholesky(self.within_cov)
        Linv = np.linalg.inv(L)
        Bw = Linv @ self.between_cov @ Linv.T
        evals, evecs = np.linalg.eigh((Bw + Bw.T) / 2)
        order = np.argsort(evals)[::-1]
        T = Linv.T @ evecs[:, order]
        return T[:, :max_dim] if max_dim else T

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, between_cov=self.between_cov, within_cov=self.within_cov)

    @classmethod
    def load(cls, path) -> "PldaModel":
        with np.load(path) as z:
            return cls(z["mean"], z["between_cov"], z["within_cov"])


@dataclass(frozen=True)
class AhcConfig:
    threshold_bias: float = 0.5
    target_energy: float = 0.3

    def __post_init__(self):
        if not 0 < self.target_energy <= 1:
            raise ValueError("target_energy must be in (0, 1]")


@dataclass(frozen=True)
class BhmmConfig:
    max_iters: int = 7
    smoothing_factor: float = 4.0
    lda_dim: int = 512
    loop_probability: float = 0.99

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.smoothing_factor <= 0:
            raise ValueError("smoothing_factor must be positive")
        if not 0 < self.loop_probability < 1:
            raise ValueError("loop_probability must be in (0, 1)")


@dataclass(frozen=True)
class ClusterLabels:
    assignment: tuple[int, ...]
    num_clusters: int
    metadata: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_raw(cls, raw: Sequence[int], metadata: dict | None = None) -> "ClusterLabels":
        """Relabel to dense ids in order of first appearance."""
        remap: dict[int, int] = {}
        dense = []
        for r in raw:
            dense.append(remap.setdefault(int(r), len(remap)))
        return cls(tuple(dense), len(remap), metadata or {})


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        X = np.atleast_2d(np.asarray(embeddings, dtype=float))
    else:
        X = np.array([e.vector if isinstance(e, Embedding) else e for e in embeddings], dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInput("no embeddings")
    return X


# ---------------------------------------------------------------- PLDA


def plda_score_matrix(model: PldaModel, embeddings) -> np.ndarray:
    """Pairwise same-vs-different speaker log-likelihood ratios."""
    X = _as_matrix(embeddings)
    if X.shape[1] != model.dim:
        raise DimensionMismatch(f"embedding dim {X.shape[1]} != model dim {model.dim}")
    B, W = model.between_cov, model.within_cov
    T = B + W
    T_inv = np.linalg.inv(T)
    M = np.linalg.inv(T - B @ T_inv @ B)
    Q = M - T_inv
    P = T_inv @ B @ M
    P = (P + P.T) / 2
    _, logdet_T = np.linalg.slogdet(T)
    # logdet of the joint same-speaker covariance [[T, B], [B, T]] via its Schur complement
    _, logdet_schur = np.linalg.slogdet(T - B @ T_inv @ B)
    const = -0.5 * (logdet_T + logdet_schur - 2 * logdet_T)
    Xc = X - model.mean
    quad = np.einsum("ij,jk,ik->i", Xc, Q, Xc)
    cross = Xc @ P @ Xc.T
    S = cross - 0.5 * (quad[:, None] + quad[None, :]) + const
    return (S + S.T) / 2


def interpolate_plda_scores(in_domain: np.ndarray, out_domain: np.ndarray, alpha: float) -> np.ndarray:
    """Blend score matrices; ``alpha`` is the in-domain weight."""
    a, b = np.asarray(in_domain, float), np.asarray(out_domain, float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    return alpha * a + (1 - alpha) * b


# ---------------------------------------------------------------- conversation PCA


@dataclass(frozen=True, eq=False)
class PcaProjection:
    center: np.ndarray
    basis: np.ndarray  # [dim, k]
    eigenvalues: np.ndarray  # all, descending

    @property
    def kept(self) -> int:
        return self.basis.shape[1]

    def project(self, X: np.ndarray) -> np.ndarray:
        return (X - self.center) @ self.basis

    def reconstruct(self, Y: np.ndarray) -> np.ndarray:
        return Y @ self.basis.T + self.center


def fit_conversation_pca(embeddings, target_energy: float) -> PcaProjection:
    X = _as_matrix(embeddings)
    if X.shape[0] < 2:
        raise EmptyInput("conversation PCA needs at least 2 embeddings")
    if not 0 < target_energy <= 1:
        raise ValueError("target_energy must be in (0, 1]")
    center = X.mean(axis=0)
    Xc = X - center
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        # identical embeddings: keep one component by convention
        k = 1
    else:
        cum = np.cumsum(evals)
        k = int(np.searchsorted(cum, target_energy * total * (1 - 1e-12)) + 1)
        k = min(k, len(evals))
    return PcaProjection(center, evecs[:, :k], evals)


def conversation_pca(embeddings, target_energy: float) -> np.ndarray:
    X = _as_matrix(embeddings)
    return fit_conversation_pca(X, target_energy).project(X)


# ---------------------------------------------------------------- AHC


def two_center_split(values: np.ndarray) -> tuple[float, float] | None:
    """Exact 1-D two-means split; None when all values coincide."""
    v = np.sort(np.asarray(values, float))
    if v.size < 2 or v[-1] - v[0] <= 1e-12 * max(1.0, abs(v[-1])):
        return None
    n = v.size
    csum = np.cumsum(v)
    csq = np.cumsum(v * v)
    best, best_k = np.inf, 1
    for k in range(1, n):
        left_n, right_n = k, n - k
        left_s, right_s = csum[k - 1], csum[-1] - csum[k - 1]
        sse = (csq[k - 1] - left_s**2 / left_n) + ((csq[-1] - csq[k - 1]) - right_s**2 / right_n)
        if sse < best - 1e-12:
            best, best_k = sse, k
    return float(v[:best_k].mean()), float(v[best_k:].mean())


def calibrated_threshold(scores: np.ndarray) -> float:
    """Midpoint of the two-center split of off-diagonal scores (0 if degenerate)."""
    n = scores.shape[0]
    off = scores[np.triu_indices(n, k=1)]
    split = two_center_split(off)
    if split is None:
        return 0.0
    return 0.5 * (split[0] + split[1])


def ahc(scores: np.ndarray, config: AhcConfig = AhcConfig()) -> ClusterLabels:
    """Average-linkage agglomeration on similarity scores."""
    S = np.array(scores, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NonSymmetricMatrix("score matrix must be square")
    if not np.allclose(S, S.T, atol=1e-8):
        raise NonSymmetricMatrix("score matrix must be symmetric")
    n = S.shape[0]
    if n == 0:
        raise EmptyInput("empty score matrix")
    if n == 1:
        return ClusterLabels((0,), 1, {"threshold": None})
    threshold = calibrated_threshold(S) + config.threshold_bias
    members: list[list[int]] = [[i] for i in range(n)]
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    L = S.copy()
    np.fill_diagonal(L, -np.inf)
    while active.sum() > 1:
        masked = np.where(active[:, None] & active[None, :], L, -np.inf)
        flat = int(np.argmax(masked))
        i, j = divmod(flat, n)
        if masked[i, j] < threshold:
            break
        i, j = min(i, j), max(i, j)
        # Lance-Williams update for average linkage
        L[i, :] = (sizes[i] * L[i, :] + sizes[j] * L[j, :]) / (sizes[i] + sizes[j])
        L[:, i] = L[i, :]
        L[i, i] = -np.inf
        sizes[i] += sizes[j]
        active[j] = False
        members[i].extend(members[j])
    raw = np.empty(n, dtype=int)
    for cid, idx in enumerate(np.flatnonzero(active)):
        raw[members[idx]] = cid
    return ClusterLabels.from_raw(raw, {"threshold": threshold, "threshold_bias": config.threshold_bias})


# ---------------------------------------------------------------- VB-HMM resegmentation


def _transition_matrix(S: int, loop: float) -> np.ndarray:
    if S == 1:
        return np.ones((1, 1))
    A = np.full((S, S), (1 - loop) / (S - 1))
    np.fill_diagonal(A, loop)
    return A


def forward_backward(log_emit: np.ndarray, log_A: np.ndarray) -> tuple[np.ndarray, float]:
    """Marginal state posteriors [T, S] and total log-likelihood, uniform initial state."""
    T, S = log_emit.shape
    log_alpha = np.empty((T, S))
    log_beta = np.zeros((T, S))
    log_alpha[0] = log_emit[0] - np.log(S)
    for t in range(1, T):
        log_alpha[t] = log_emit[t] + logsumexp(log_alpha[t - 1][:, None] + log_A, axis=0)
    for t in range(T - 2, -1, -1):
        log_beta[t] = logsumexp(log_A + (log_emit[t + 1] + log_beta[t + 1])[None, :], axis=1)
    total = float(logsumexp(log_alpha[-1]))
    gamma = np.exp(log_alpha + log_beta - total)
    gamma /= gamma.sum(axis=1, keepdims=True)
    return gamma, total


def _tempered_log_emissions(X: np.ndarray, means: np.ndarray, smoothing_factor: float) -> np.ndarray:
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return -0.5 * d2 / smoothing_factor


def bhmm_resegment(
    embeddings,
    scores_model: PldaModel | None,
    init: ClusterLabels,
    config: BhmmConfig = BhmmConfig(),
) -> ClusterLabels:
    """Refine a clustering with a speaker-state HMM over the time-ordered embeddings.

    Emissions are spherical unit-variance Gaussians in the PLDA-whitened space,
    tempered by ``smoothing_factor``. The metadata carries the per-iteration
    log-likelihood (the variational objective at the E-step optimum).
    """
    X = _as_matrix(embeddings)
    if init.num_clusters < 1 or len(init.assignment) != X.shape[0]:
        raise EmptyInput("init labels must cover every embedding")
    if scores_model is not None:
        if scores_model.dim != X.shape[1]:
            raise DimensionMismatch("model and embedding dimension differ")
        proj = scores_model.whitening(min(config.lda_dim, X.shape[1]))
        Z = (X - scores_model.mean) @ proj
    else:
        Z = X[:, : min(config.lda_dim, X.shape[1])]
    labels = np.asarray(init.assignment)
    states = sorted(set(labels.tolist()))
    means = np.stack([Z[labels == s].mean(axis=0) for s in states])
    objective: list[float] = []
    dropped = 0
    gamma = None
    for _ in range(config.max_iters):
        log_A = np.log(_transition_matrix(len(means), config.loop_probability))
        gamma, loglik = forward_backward(_tempered_log_emissions(Z, means, config.smoothing_factor), log_A)
        objective.append(loglik)
        occupancy = gamma.sum(axis=0)
        keep = occupancy >= 1.0
        if not keep.any():
            keep[np.argmax(occupancy)] = True
        dropped += int((~keep).sum())
        means = (gamma[:, keep].T @ Z) / occupancy[keep][:, None]
        gamma = gamma[:, keep]
    assert gamma is not None
    hard = np.argmax(gamma, axis=1)
    return ClusterLabels.from_raw(hard, {"objective": objective, "dropped_states": dropped})


# ---------------------------------------------------------------- session pipeline


def _segment_bounds(intervals: list[TimeInterval]) -> list[tuple[float, float]]:
    """Cut overlapping consecutive windows at the midpoint of their overlap."""
    bounds = [[iv.onset, iv.offset] for iv in intervals]
    for k in range(len(bounds) - 1):
        if bounds[k + 1][0] < bounds[k][1]:
            cut = 0.5 * (bounds[k + 1][0] + bounds[k][1])
            bounds[k][1] = cut
            bounds[k + 1][0] = cut
    return [(a, b) for a, b in bounds]


def cluster_session(
    embeddings: Sequence[Embedding],
    in_plda: PldaModel,
    out_plda: PldaModel,
    ahc_cfg: AhcConfig = AhcConfig(),
    bhmm_cfg: BhmmConfig | None = BhmmConfig(),
    alpha: float = 0.57,
    speaker_prefix: str = "spk",
) -> RttmDocument:
    """PCA -> interpolated PLDA scores -> AHC -> VB-HMM -> turns for one recording."""
    if not embeddings:
        raise EmptyInput("no embeddings")
    embs = sorted(embeddings, key=lambda e: (e.source_interval.onset, e.source_interval.offset))
    recs = {e.recording_id for e in embs}
    if len(recs) != 1:
        raise ValueError("cluster_session expects embeddings of a single recording")
    rec = embs[0].recording_id
    X = _as_matrix(embs)
    if len(embs) == 1:
        labels = ClusterLabels((0,), 1)
    else:
        pca = fit_conversation_pca(X, ahc_cfg.target_energy)
        Y = pca.project(X)
        s_in = plda_score_matrix(in_plda.project(pca.center, pca.basis), Y)
        s_out = plda_score_matrix(out_plda.project(pca.center, pca.basis), Y)
        labels = ahc(interpolate_plda_scores(s_in, s_out, alpha), ahc_cfg)
        if bhmm_cfg is not None:
            labels = bhmm_resegment(X, in_plda, labels, bhmm_cfg)
    bounds = _segment_bounds([e.source_interval for e in embs])
    turns = [
        Turn.make(rec, f"{speaker_prefix}{lab}", on, off)
        for lab, (on, off) in zip(labels.assignment, bounds)
        if off > on
    ]
    return RttmDocument(tuple(turns))


# ---------------------------------------------------------------- embedding table


def write_embeddings(embeddings: Sequence[Embedding]) -> str:
    """One record per line: ``<rec> <onset> <offset> <dim> <v1> ... <vdim>``."""
    lines = []
    for e in embeddings:
        values = " ".join(repr(float(v)) for v in e.vector)
        iv = e.source_interval
        lines.append(f"{e.recording_id} {iv.onset!r} {iv.offset!r} {e.dim} {values}")
    return "".join(line + "\n" for line in lines)


def parse_embeddings(text: str) -> list[Embedding]:
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        try:
            onset, offset, dim = float(fields[1]), float(fields[2]), int(fields[3])
            values = np.array([float(v) for v in fields[4:]])
        except (IndexError, ValueError):
            raise MalformedLine(line_no, "expected '<rec> <onset> <offset> <dim> <values...>'") from None
        if values.size != dim:
            raise MalformedLine(line_no, f"declared dim {dim} but {values.size} values")
        out.append(Embedding(values, TimeInterval(onset, offset), fields[0]))
    return out
