"""End-to-end pipeline: SAD -> clustering -> domain vote -> route -> adaptation
loops -> epoch and system fusion -> post-processing, one recording at a time."""

from __future__ import annotations

import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import (
    AdaptResult,
    SessionFrames,
    TsVadDecodeConfig,
    extract_speaker_priors,
    iss_diarize,
    itsvad_diarize,
    tsvad_decode,
)
from .backends import EmbeddingProfileExtractor, ExternalActivityEstimator, ExternalSeparator
from .clustering import AhcConfig, BhmmConfig, Embedding, PldaModel, cluster_session, parse_embeddings
from .config import PipelineConfig, load_config
from .domainroute import DomainLabel, NearestCentroidClassifier, Strategy, chunk_features, classify_session, route
from .doverlap import FusionConfig, SystemHypothesis, fuse_hypotheses
from .formats import (
    RttmDocument,
    TokenAnnotation,
    UemDocument,
    intersect_spans,
    parse_rttm,
    parse_tokens,
    total_duration,
    write_rttm,
)
from .metrics import score_der, score_sad, speech_spans
from .postproc import assign_laughter
from .sad import SadFusionConfig, SadPosterior, binarize_and_smooth, energy_sad, fuse_sad, parse_posterior, parse_stream
from .synthlab import SynthSessionSpec, gen_session, oracle_backends, synth_plda_models

log = logging.getLogger(__name__)


@dataclass
class RecordingInput:
    recording_id: str
    frames: SessionFrames
    embeddings: tuple[Embedding, ...]
    in_plda: PldaModel
    out_plda: PldaModel
    reference: RttmDocument | None = None
    sad_systems: list[SadPosterior] = field(default_factory=list)
    domain: DomainLabel | None = None
    session: object | None = None  # SynthSession when generated


@dataclass
class RecordingOutcome:
    recording_id: str
    final: RttmDocument | None
    artifacts: dict[str, str] = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class PipelineResult:
    outcomes: list[RecordingOutcome]
    output_dir: Path

    @property
    def exit_code(self) -> int:
        return 0 if all(o.ok for o in self.outcomes) else 1

    @property
    def final(self) -> RttmDocument:
        return RttmDocument(tuple(t for o in self.outcomes if o.final is not None for t in o.final.turns))


def recording_seed(base: int, recording_id: str) -> int:
    return (int(base) * 1_000_003 + zlib.crc32(recording_id.encode())) % (2**31)


# ---------------------------------------------------------------- inputs


def _input_ids(cfg: PipelineConfig) -> list[str]:
    return [s.recording_id for s in cfg.inputs.sessions] + [r.recording_id for r in cfg.inputs.recordings]


def load_input(cfg: PipelineConfig, index: int) -> RecordingInput:
    n_syn = len(cfg.inputs.sessions)
    if index < n_syn:
        s = cfg.inputs.sessions[index]
        spec = SynthSessionSpec(
            num_speakers=s.num_speakers,
            duration=s.duration,
            overlap_ratio=s.overlap_ratio,
            noise_level=s.noise_level,
            seed=s.seed,
            recording_id=s.recording_id,
            embed_dim=s.embed_dim,
            frame_step=cfg.frame_step,
            domain=s.domain,
        )
        sess = gen_session(spec)
        in_plda, out_plda = synth_plda_models(spec)
        return RecordingInput(
            s.recording_id, sess.frames, sess.embeddings, in_plda, out_plda, sess.reference, [], s.domain, sess
        )
    r = cfg.inputs.recordings[index - n_syn]
    embs = tuple(e for e in parse_embeddings(r.embeddings.read_text()) if e.recording_id == r.recording_id)
    rec, step, energy = parse_stream(r.features.read_text())
    frames = SessionFrames(r.recording_id, step, energy)
    reference = parse_rttm(r.reference.read_text()).for_recording(r.recording_id) if r.reference else None
    sad = [parse_posterior(p.read_text()) for p in r.sad_posteriors]
    return RecordingInput(
        r.recording_id, frames, embs, PldaModel.load(r.in_plda), PldaModel.load(r.out_plda), reference, sad, r.domain
    )


def _backends(cfg: PipelineConfig, inp: RecordingInput):
    b = cfg.backend
    if b.name == "external":
        return ExternalSeparator(b.path), ExternalActivityEstimator(b.path), EmbeddingProfileExtractor(inp.embeddings), inp.sad_systems
    if inp.session is None:
        raise ValueError(f"backend '{b.name}' needs a synthetic session with ground truth")
    fidelity = 1.0 if b.name == "oracle" else b.fidelity
    sad_fidelity = b.sad_fidelity if b.sad_fidelity is not None else fidelity
    bk = oracle_backends(inp.session, fidelity, b.adapt_step, b.max_flip, sad_fidelity=sad_fidelity)
    return bk.separator, bk.estimator, bk.profile_extractor, inp.sad_systems or bk.sad_systems


def train_synthetic_domain_classifier(seed: int, frame_step: float = 0.01, chunk: float = 10.0) -> NearestCentroidClassifier:
    feats, labels = [], []
    for k, dom in enumerate(DomainLabel):
        for rep in range(2):
            sess = gen_session(
                SynthSessionSpec(num_speakers=2, duration=60.0, seed=seed + 97 * k + rep, domain=dom, frame_step=frame_step, embed_dim=8)
            )
            f = chunk_features(sess.features, frame_step, chunk)
            feats.append(f)
            labels.extend([dom] * len(f))
    return NearestCentroidClassifier().fit(np.vstack(feats), labels)


# ---------------------------------------------------------------- per-recording processing


def mask_to_speech(doc: RttmDocument, recording_id: str, speech: list) -> RttmDocument:
    spans = doc.speaker_spans(recording_id)
    return RttmDocument.from_spans(recording_id, {s: intersect_spans(v, speech) for s, v in spans.items()})


def _fuse(docs: Sequence[RttmDocument], names: Sequence[str], cfg: PipelineConfig) -> tuple[RttmDocument, dict]:
    hyps = [SystemHypothesis(n, d) for n, d in zip(names, docs)]
    res = fuse_hypotheses(hyps, None, FusionConfig(cfg.fusion.rank_exponent, cfg.fusion.speaker_count_rounding))
    return res.doc, res.weights


def process_recording(
    cfg: PipelineConfig,
    inp: RecordingInput,
    classifier: NearestCentroidClassifier | None = None,
    tokens: Sequence[TokenAnnotation] = (),
) -> RecordingOutcome:
    rec = inp.recording_id
    seed = recording_seed(cfg.seed, rec)
    out = RecordingOutcome(rec, None)
    report = out.report
    report.update({"recording_id": rec, "track": cfg.track, "seed": seed, "frame_step": inp.frames.frame_step})
    separator, estimator, extractor, sad_systems = _backends(cfg, inp)
    span_end = inp.frames.num_frames * inp.frames.frame_step

    # speech activity
    if cfg.track == 1:
        if inp.reference is None:
            raise ValueError("track 1 needs a reference RTTM for oracle SAD")
        speech = speech_spans(inp.reference, rec)
        report["sad"] = {"mode": "oracle"}
    else:
        systems = list(sad_systems)
        if cfg.sad.include_energy:
            systems.append(energy_sad(inp.frames.features, inp.frames.frame_step, rec))
        if not systems:
            raise ValueError("track 2 needs SAD posteriors")
        weights = tuple(cfg.sad.weights) if cfg.sad.weights else None
        fused = fuse_sad(systems, SadFusionConfig(weights, cfg.sad.threshold))
        sad_doc = binarize_and_smooth(fused, cfg.sad.threshold, cfg.sad.min_speech, cfg.sad.min_silence)
        speech = speech_spans(sad_doc, rec)
        report["sad"] = {
            "mode": "system",
            "num_systems": len(systems),
            "weights": list(weights) if weights else "equal",
            "threshold": cfg.sad.threshold,
            "min_speech": cfg.sad.min_speech,
            "min_silence": cfg.sad.min_silence,
        }
        if inp.reference is not None:
            err = score_sad(inp.reference, sad_doc, UemDocument.from_spans({rec: [(0.0, span_end)]}))
            report["sad"]["error_pct"] = {"miss": err.miss_pct, "fa": err.fa_pct, "total": err.total_pct}
    speech_doc = RttmDocument.from_spans(rec, {"speech": speech})
    out.artifacts["sad.rttm"] = write_rttm(speech_doc)

    # clustering on embeddings that lie mostly in detected speech
    c = cfg.clustering
    embs = [
        e
        for e in inp.embeddings
        if total_duration(intersect_spans([e.source_interval.as_span()], speech)) >= 0.5 * e.source_interval.duration
    ]
    if embs:
        clustering_doc = cluster_session(
            embs,
            inp.in_plda,
            inp.out_plda,
            AhcConfig(c.threshold_bias, c.target_energy),
            BhmmConfig(c.max_iters, c.smoothing_factor, c.lda_dim, c.loop_probability),
            c.alpha,
        )
    else:
        clustering_doc = RttmDocument()
    report["clustering"] = {**c.model_dump(), "num_embeddings": len(embs), "num_speakers": len(clustering_doc.speakers(rec))}
    out.artifacts["clustering.rttm"] = write_rttm(clustering_doc)

    # domain and route
    if cfg.domain.classifier == "centroid" and classifier is not None:
        domain, preds = classify_session(inp.frames.features, inp.frames.frame_step, classifier, cfg.domain.chunk)
        report["domain"] = {"label": domain.value, "source": "centroid", "chunk_votes": [p.value for p in preds]}
    else:
        domain = inp.domain or cfg.domain.default
        report["domain"] = {"label": DomainLabel(domain).value, "source": "oracle" if inp.domain else "default"}
    plan = route(domain, cfg.route_table())
    report["route"] = {
        "strategy": plan.strategy.value,
        "iteration_count": plan.iteration_count,
        "fusion_members": list(plan.fusion_members),
    }

    systems: dict[str, RttmDocument] = {
        "clustering": clustering_doc,
        "sad": speech_doc.rename({"speech": "spk0"}),
    }
    a = cfg.adapt
    if plan.strategy in (Strategy.ISS, Strategy.ITS_VAD):
        if not clustering_doc.turns:
            raise ValueError("clustering produced no speakers to seed adaptation")
        if plan.strategy == Strategy.ISS:
            prior = extract_speaker_priors(clustering_doc, rec, exclude_overlap=True)
            res = iss_diarize(
                inp.frames,
                prior,
                separator,
                max(1, plan.iteration_count),
                mixtures_per_stage=a.mixtures_per_stage,
                mixture_duration=a.mixture_duration,
                snr_range=tuple(a.snr_range),
                sad_threshold=cfg.sad.threshold,
                min_speech=cfg.sad.min_speech,
                min_silence=cfg.sad.min_silence,
                seed=seed,
            )
            name, prefix = "iss", "iss_stage"
            epoch_names = [f"{prefix}{k + 1}" for k in range(len(res.epochs))]
        else:
            decode = TsVadDecodeConfig(a.num_nodes, a.activity_threshold, a.median_filter)
            if plan.iteration_count == 0:
                prior = extract_speaker_priors(clustering_doc, rec, exclude_overlap=True)
                first = tsvad_decode(inp.frames, extractor.extract(inp.frames, prior), estimator, decode)
                res = AdaptResult(first, [first])
            else:
                res = itsvad_diarize(
                    inp.frames,
                    clustering_doc,
                    estimator,
                    extractor,
                    plan.iteration_count,
                    decode=decode,
                    dialogue_duration=a.dialogue_duration,
                    pause_rate=a.pause_rate,
                    overlap_rate=a.overlap_rate,
                    seed=seed,
                )
            name = "itsvad"
            epoch_names = [f"itsvad_epoch{k}" for k in range(len(res.epochs))]
        for n, d in zip(epoch_names, res.epochs):
            out.artifacts[f"{n}.rttm"] = write_rttm(d)
        report[name] = {"flags": res.flags, "epochs": epoch_names}
        epochs = [clustering_doc, *res.epochs]
        if cfg.fusion.epoch_fusion and len(epochs) >= 3:
            systems[name], w = _fuse(epochs, ["clustering", *epoch_names], cfg)
            report[name]["epoch_fusion_weights"] = w
        else:
            systems[name] = res.final

    members = list(plan.fusion_members) or {
        Strategy.CLUSTERING_ONLY: ["clustering"],
        Strategy.SINGLE_SPEAKER_SAD: ["sad"],
        Strategy.ISS: ["iss"],
        Strategy.ITS_VAD: ["itsvad"],
    }[plan.strategy]
    missing = [m for m in members if m not in systems]
    if missing:
        raise ValueError(f"fusion members not produced for this route: {missing}")
    if len(members) >= 2:
        hyp, w = _fuse([systems[m] for m in members], members, cfg)
        report["system_fusion_weights"] = w
    else:
        hyp = systems[members[0]]
    for m in members:
        out.artifacts[f"system_{m}.rttm"] = write_rttm(systems[m])

    final = mask_to_speech(hyp, rec, speech)
    rec_tokens = [t for t in tokens if t.recording_id == rec]
    if rec_tokens:
        lr = assign_laughter(final, rec_tokens, cfg.postproc.laughter_neighborhood, cfg.postproc.token)
        final = lr.doc
        report["laughter"] = {"assigned": lr.assigned, "ignored": lr.ignored, "neighborhood": cfg.postproc.laughter_neighborhood}
    out.final = final
    out.artifacts["final.rttm"] = write_rttm(final)

    if inp.reference is not None:
        uem = UemDocument.from_spans({rec: [(0.0, span_end)]})
        scores = {}
        for n, d in [("clustering", clustering_doc), *((m, systems[m]) for m in members), ("final", final)]:
            scores[n] = score_der(inp.reference, d, uem, allow_empty=True).report() if inp.reference.turns else None
        report["der"] = scores
    return out


def _run_one(cfg: PipelineConfig, index: int, classifier, tokens) -> RecordingOutcome:
    rec = _input_ids(cfg)[index]
    try:
        inp = load_input(cfg, index)
        return process_recording(cfg, inp, classifier, tokens)
    except Exception as exc:  # per-recording isolation
        log.error("%s: failed: %s", rec, exc)
        return RecordingOutcome(rec, None, report={"recording_id": rec}, error=f"{type(exc).__name__}: {exc}")


def run_pipeline(config: str | Path | PipelineConfig, output_dir: Path | None = None) -> PipelineResult:
    cfg = config if isinstance(config, PipelineConfig) else load_config(config)
    out_dir = Path(output_dir) if output_dir is not None else cfg.resolved_output_dir()
    tokens = parse_tokens(cfg.inputs.tokens.read_text()) if cfg.inputs.tokens else []
    classifier = (
        train_synthetic_domain_classifier(cfg.seed, cfg.frame_step, cfg.domain.chunk) if cfg.domain.classifier == "centroid" else None
    )
    n = len(_input_ids(cfg))
    workers = min(cfg.workers or os.cpu_count() or 1, n)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, [cfg] * n, range(n), [classifier] * n, [tokens] * n))
    else:
        outcomes = [_run_one(cfg, i, classifier, tokens) for i in range(n)]
    result = PipelineResult(outcomes, out_dir)
    _write_artifacts(cfg, result)
    return result


def _write_artifacts(cfg: PipelineConfig, result: PipelineResult) -> None:
    out_dir = result.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    for o in result.outcomes:
        rec_dir = out_dir / o.recording_id
        rec_dir.mkdir(exist_ok=True)
        for name, text in sorted(o.artifacts.items()):
            (rec_dir / name).write_text(text)
        (rec_dir / "report.json").write_text(json.dumps({**o.report, "error": o.error}, indent=2, sort_keys=True, default=str))
    (out_dir / "final.rttm").write_text(write_rttm(result.final))
    summary = {
        "config": json.loads(cfg.model_dump_json()),
        "recordings": {o.recording_id: ("ok" if o.ok else o.error) for o in result.outcomes},
        "exit_code": result.exit_code,
    }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
