"""Command-line entry point: ``diarkit <subcommand>``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import yaml

from .clustering import AhcConfig, BhmmConfig, PldaModel, cluster_session, parse_embeddings, write_embeddings
from .config import ClusteringConfig, load_config
from .domainroute import DomainLabel, classify_session, route
from .doverlap import FusionConfig, SystemHypothesis, fuse_hypotheses
from .errors import ConfigInvalid, DiarkitError
from .formats import RttmDocument, parse_rttm, parse_tokens, parse_uem, write_rttm, write_uem
from .metrics import score_der, score_jer, score_sad
from .postproc import assign_laughter, select_per_domain
from .sad import (
    SadFusionConfig,
    binarize_and_smooth,
    fuse_sad,
    parse_posterior,
    write_posterior,
    write_stream,
)
from .synthlab import SynthSessionSpec, gen_session, oracle_backends, synth_plda_models


def _read_rttm(path: str) -> RttmDocument:
    return parse_rttm(Path(path).read_text())


def _read_uem(path: str | None):
    return parse_uem(Path(path).read_text()) if path else None


def _emit(values: dict, table: list[tuple]) -> None:
    for k, v in values.items():
        click.echo(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}")
    if table:
        width = max(len(str(r[0])) for r in table)
        click.echo("")
        for row in table:
            click.echo(f"{str(row[0]):<{width}}  " + "  ".join(f"{c:>9.2f}" if isinstance(c, float) else f"{c:>9}" for c in row[1:]))


def _parse_weights(text: str | None, n: int) -> tuple[float, ...] | None:
    if not text:
        return None
    w = tuple(float(x) for x in text.split(","))
    if len(w) != n:
        raise click.BadParameter(f"expected {n} comma-separated weights")
    return w


class _Group(click.Group):
    """Turns library errors into one-line messages and exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ConfigInvalid as exc:
            click.echo(f"config error: {exc}", err=True)
            ctx.exit(2)
        except DiarkitError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(1)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Speaker-diarization pipeline toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--recording-id", default="synth")
@click.option("--speakers", default=2, show_default=True)
@click.option("--duration", default=120.0, show_default=True)
@click.option("--overlap", default=0.1, show_default=True)
@click.option("--noise", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--embed-dim", default=128, show_default=True)
@click.option("--frame-step", default=0.01, show_default=True)
@click.option("--domain", type=click.Choice([d.value for d in DomainLabel]), default=None)
@click.option("--sad-fidelity", default=0.8, show_default=True, help="Fidelity of the simulated SAD systems.")
def simulate(out_dir, recording_id, speakers, duration, overlap, noise, seed, embed_dim, frame_step, domain, sad_fidelity):
    """Generate a synthetic session and write it in the on-disk formats."""
    spec = SynthSessionSpec(
        num_speakers=speakers,
        duration=duration,
        overlap_ratio=overlap,
        noise_level=noise,
        seed=seed,
        recording_id=recording_id,
        embed_dim=embed_dim,
        frame_step=frame_step,
        domain=DomainLabel(domain) if domain else None,
    )
    sess = gen_session(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = recording_id
    (out / f"{rec}.rttm").write_text(write_rttm(sess.reference))
    (out / f"{rec}.uem").write_text(write_uem(sess.uem))
    (out / f"{rec}.emb").write_text(write_embeddings(sess.embeddings))
    (out / f"{rec}.feats").write_text(write_stream(rec, frame_step, sess.features))
    for k, post in enumerate(oracle_backends(sess, sad_fidelity=sad_fidelity).sad_systems):
        (out / f"{rec}.sad{k}.post").write_text(write_posterior(post))
    in_plda, out_plda = synth_plda_models(spec)
    in_plda.save(out / "in_plda.npz")
    out_plda.save(out / "out_plda.npz")
    click.echo(f"wrote session {rec} to {out}")


@main.command("sad-fuse")
@click.argument("posteriors", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", default=None, help="Comma-separated, one per posterior file.")
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--min-speech", default=0.2, show_default=True)
@click.option("--min-silence", default=0.3, show_default=True)
@click.option("--rttm", "as_rttm", is_flag=True, help="Write smoothed speech segments instead of the fused posterior.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def sad_fuse(posteriors, weights, threshold, min_speech, min_silence, as_rttm, output):
    """Fuse framewise speech posteriors from several SAD systems."""
    systems = [parse_posterior(Path(p).read_text()) for p in posteriors]
    fused = fuse_sad(systems, SadFusionConfig(_parse_weights(weights, len(systems)), threshold))
    if as_rttm:
        text = write_rttm(binarize_and_smooth(fused, threshold, min_speech, min_silence))
    else:
        text = write_posterior(fused)
    Path(output).write_text(text)


@main.command()
@click.argument("embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--in-plda", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-plda", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML clustering parameters.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def cluster(embeddings, in_plda, out_plda, config_path, output):
    """PLDA/AHC clustering with BHMM resegmentation, one recording at a time."""
    data = yaml.safe_load(Path(config_path).read_text()) if config_path else {}
    data = data.get("clustering", data) if isinstance(data, dict) else {}
    try:
        c = ClusteringConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigInvalid("clustering", str(exc)) from None
    embs = parse_embeddings(Path(embeddings).read_text())
    in_model, out_model = PldaModel.load(in_plda), PldaModel.load(out_plda)
    turns = []
    for rec in sorted({e.recording_id for e in embs}):
        doc = cluster_session(
            [e for e in embs if e.recording_id == rec],
            in_model,
            out_model,
            AhcConfig(c.threshold_bias, c.target_energy),
            BhmmConfig(c.max_iters, c.smoothing_factor, c.lda_dim, c.loop_probability),
            c.alpha,
        )
        turns.extend(doc.turns)
    Path(output).write_text(write_rttm(RttmDocument(tuple(turns))))


@main.command()
@click.argument("hypotheses", nargs=-1, required=True)
@click.option("--uem", type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", default=None, help="Comma-separated fixed weights; default ranks systems.")
@click.option("--rank-exponent", default=1.0, show_default=True)
@click.option("--rounding", type=click.Choice(["nearest-even", "floor", "ceil"]), default="nearest-even")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def fuse(hypotheses, uem, weights, rank_exponent, rounding, output):
    """DOVER-Lap fusion of RTTM hypotheses (each NAME=PATH or PATH)."""
    hyps = []
    for item in hypotheses:
        name, _, path = item.rpartition("=") if "=" in item else (Path(item).stem, "", item)
        hyps.append(SystemHypothesis(name, _read_rttm(path)))
    fixed = _parse_weights(weights, len(hyps))
    if fixed is not None:
        total = sum(fixed)
        hyps = [SystemHypothesis(h.name, h.doc, w / total) for h, w in zip(hyps, fixed)]
    res = fuse_hypotheses(hyps, _read_uem(uem), FusionConfig(rank_exponent, rounding))
    Path(output).write_text(write_rttm(res.doc))
    report = {"weights": res.weights, "rank_exponent": rank_exponent, "rounding": rounding}
    Path(output).with_suffix(".fusion.json").write_text(json.dumps(report, indent=2, sort_keys=True))


@main.command("route")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
def route_cmd(config_path):
    """Print the processing plan chosen for each recording in a pipeline config."""
    from .pipeline import _input_ids, load_input, train_synthetic_domain_classifier

    cfg = load_config(config_path)
    table = cfg.route_table()
    classifier = (
        train_synthetic_domain_classifier(cfg.seed, cfg.frame_step, cfg.domain.chunk) if cfg.domain.classifier == "centroid" else None
    )
    for i, rec in enumerate(_input_ids(cfg)):
        inp = load_input(cfg, i)
        if classifier is not None:
            domain, _ = classify_session(inp.frames.features, inp.frames.frame_step, classifier, cfg.domain.chunk)
        else:
            domain = DomainLabel(inp.domain or cfg.domain.default)
        plan = route(domain, table)
        members = ",".join(plan.fusion_members) or "-"
        click.echo(f"{rec} domain={domain.value} strategy={plan.strategy.value} iterations={plan.iteration_count} fusion={members}")


@main.command("score-der")
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.argument("hypothesis", type=click.Path(exists=True, dir_okay=False))
@click.option("--uem", type=click.Path(exists=True, dir_okay=False))
@click.option("--collar", default=0.0, show_default=True)
@click.option("--no-overlap", is_flag=True, help="Exclude overlapped reference speech from scoring.")
def score_der_cmd(reference, hypothesis, uem, collar, no_overlap):
    """Diarization error rate with optimal speaker mapping."""
    ref, hyp, u = _read_rttm(reference), _read_rttm(hypothesis), _read_uem(uem)
    total = score_der(ref, hyp, u, collar, not no_overlap)
    table = [("recording", "miss%", "fa%", "spkerr%", "der%")]
    for rec in sorted(set(ref.recordings) | set(hyp.recordings)):
        try:
            b = score_der(ref.for_recording(rec), hyp.for_recording(rec), u, collar, not no_overlap)
        except DiarkitError:
            continue
        table.append((rec, b.miss_pct, b.fa_pct, b.spkerr_pct, b.der_pct))
    table.append(("ALL", total.miss_pct, total.fa_pct, total.spkerr_pct, total.der_pct))
    _emit(total.report(), table)


@main.command("score-jer")
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.argument("hypothesis", type=click.Path(exists=True, dir_okay=False))
@click.option("--uem", type=click.Path(exists=True, dir_okay=False))
def score_jer_cmd(reference, hypothesis, uem):
    """Jaccard error rate averaged over reference speakers."""
    res = score_jer(_read_rttm(reference), _read_rttm(hypothesis), _read_uem(uem))
    table = [("speaker", "jer%")] + [(f"{r}/{s}", v) for (r, s), v in sorted(res.per_speaker.items())]
    _emit({"jer_pct": res.jer_pct}, table)


@main.command("score-sad")
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.argument("hypothesis", type=click.Path(exists=True, dir_okay=False))
@click.option("--uem", type=click.Path(exists=True, dir_okay=False))
def score_sad_cmd(reference, hypothesis, uem):
    """Speech activity miss / false-alarm error over the scored region."""
    err = score_sad(_read_rttm(reference), _read_rttm(hypothesis), _read_uem(uem))
    values = {"miss_pct": err.miss_pct, "fa_pct": err.fa_pct, "total_pct": err.total_pct, "normalizer": err.normalizer}
    _emit(values, [("", "miss%", "fa%", "total%"), ("ALL", err.miss_pct, err.fa_pct, err.total_pct)])


@main.command()
@click.argument("candidates", nargs=-1, required=True)
@click.option("--dev-scores", type=click.Path(exists=True, dir_okay=False), required=True, help="JSON: system -> DER or {domain: DER}.")
@click.option("--domains", type=click.Path(exists=True, dir_okay=False), required=True, help="Lines '<rec> <DOMAIN>'.")
@click.option("--tokens", type=click.Path(exists=True, dir_okay=False), help="Token annotations for laughter assignment.")
@click.option("--neighborhood", default=2.0, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def finalize(candidates, dev_scores, domains, tokens, neighborhood, output):
    """Per-domain best-system selection, then laughter assignment (each candidate NAME=PATH)."""
    cands = {}
    for item in candidates:
        name, sep, path = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected NAME=PATH, got {item!r}")
        cands[name] = _read_rttm(path)
    scores = json.loads(Path(dev_scores).read_text())
    domain_of = {}
    for line in Path(domains).read_text().splitlines():
        if line.strip():
            rec, dom = line.split()
            domain_of[rec] = DomainLabel(dom)
    sel = select_per_domain(cands, scores, domain_of)
    doc = sel.doc
    manifest = sel.manifest()
    if tokens:
        toks = parse_tokens(Path(tokens).read_text())
        res = assign_laughter(doc, toks, neighborhood)
        doc = res.doc
        manifest["laughter"] = {"assigned": res.assigned, "ignored": res.ignored, "neighborhood": neighborhood}
    Path(output).write_text(write_rttm(doc))
    Path(output).with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


@main.command("pipeline-run")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Overrides the config and environment.")
def pipeline_run(config_path, output_dir):
    """Run the full pipeline described by a YAML config."""
    from .pipeline import run_pipeline

    result = run_pipeline(config_path, Path(output_dir) if output_dir else None)
    for o in result.outcomes:
        der = (o.report.get("der") or {}).get("final")
        status = "ok" if o.ok else f"FAILED {o.error}"
        extra = f" der={der['der_pct']:.2f}" if der else ""
        click.echo(f"{o.recording_id} {status}{extra}")
    click.echo(f"artifacts in {result.output_dir}")
    sys.exit(result.exit_code)
