"""Command-line surface orchestrating the pipelines end to end.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure, 4 provider
failure. Errors print one machine-parsable line on stderr:
``error: <category>: <message>``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import DataError, NumericError, ProviderError
from . import dynamics, evaluation, graphs, io, llm, staging, synth
from .dynamics import ModelKind
from .graphs import FilterSpec, MixWeights


@click.group()
def cli():
    """Disease-progression trajectories on learned coupling graphs."""


def _load_run_config(config_path) -> io.RunConfig:
    return io.load_config(config_path)


def _transport(offline: bool):
    return llm.offline_transport if offline else llm.http_transport


@cli.command("query-graph")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--offline", is_flag=True, default=False,
              help="Force cache-only operation; any network attempt fails.")
@click.option("--out-graph", type=click.Path(), default=None)
@click.option("--out-reasoning", type=click.Path(), default=None)
def query_graph_cmd(config_path, offline, out_graph, out_reasoning):
    """Infer the probabilistic connectome from the configured providers."""
    cfg = _load_run_config(config_path)
    if cfg.atlas is None:
        raise DataError("config must name an atlas file for query-graph")
    atlas = io.load_atlas(io.resolve_path(config_path, cfg.atlas))
    if not cfg.providers:
        raise DataError("config lists no providers")
    factors = cfg.factors or llm.CANONICAL_FACTORS
    cache = llm.QueryCache(io.resolve_path(config_path, cfg.cache_dir))
    offline = offline or cfg.offline
    graph, records = llm.infer_graph(
        atlas, factors, cfg.providers, cache,
        transport=_transport(offline),
        template_version=cfg.template_version,
    )
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph_path = Path(out_graph) if out_graph else out_dir / "llm_graph.csv"
    reasoning_path = (
        Path(out_reasoning) if out_reasoning else out_dir / "reasoning.json"
    )
    graphs.write_connectome(graph_path, graph.graph)
    llm.write_reasoning_json(reasoning_path, records)
    click.echo(f"wrote {graph_path} and {reasoning_path}")


@cli.command("filter")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--tau", type=float, default=None)
@click.option("--edges", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def filter_cmd(graph_path, tau, edges, out_path):
    """Threshold a weighted graph into a binary support."""
    g = graphs.read_connectome(graph_path)
    spec = FilterSpec(threshold=tau, target_edge_count=edges)
    support = graphs.filter_graph(g, spec)
    graphs.write_support(out_path, support)
    click.echo(f"kept {support.edge_count} edges -> {out_path}")


@cli.command("mix")
@click.option("--graph", "graph_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--weights", "weights_str", required=True,
              help="Comma-separated mix weights, one per graph.")
@click.option("--out", "out_path", required=True, type=click.Path())
def mix_cmd(graph_paths, weights_str, out_path):
    """Blend connectome Laplacians with fixed weights."""
    weights = MixWeights(tuple(float(w) for w in weights_str.split(",")))
    gs = [graphs.read_connectome(p) for p in graph_paths]
    for g in gs[1:]:
        if g.atlas != gs[0].atlas:
            raise DataError("connectomes do not share an atlas")
    laps = [graphs.laplacian(g) for g in gs]
    mixed = graphs.mix_laplacians(laps, weights)
    graphs.write_laplacian(out_path, mixed)
    click.echo(f"wrote mixed Laplacian -> {out_path}")


def _build_kind_and_support(cfg: io.RunConfig, atlas, graph_paths, support_path):
    gs = [graphs.read_connectome(p, atlas) for p in graph_paths]
    label = cfg.model_kind
    if label == "mixed":
        mix = MixWeights(cfg.mix) if cfg.mix else MixWeights.uniform(len(gs))
        kind = ModelKind("mixed", tuple(gs), mix)
    else:
        if len(gs) != 1:
            raise DataError(f"model {label!r} takes exactly one --graph")
        kind = ModelKind(label, (gs[0],))
    if support_path is not None:
        support = graphs.read_support(support_path, atlas)
    else:
        if cfg.filter_threshold is None and cfg.filter_edges is None:
            raise DataError(
                "no --support given and the config has no filter spec"
            )
        spec = FilterSpec(
            threshold=cfg.filter_threshold, target_edge_count=cfg.filter_edges
        )
        mask = np.zeros((atlas.count, atlas.count), dtype=bool)
        for g in gs:
            mask |= graphs.filter_graph(g, spec).mask
        support = graphs.BinaryGraph(atlas, mask)
    return kind, support


@cli.command("fit")
@click.option("--cohort", "cohort_path", required=True, type=click.Path(exists=True))
@click.option("--atlas", "atlas_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--support", "support_path", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-artifact", required=True, type=click.Path())
@click.option("--out-trajectory", type=click.Path(), default=None)
def fit_cmd(cohort_path, atlas_path, graph_paths, support_path, config_path,
            out_artifact, out_trajectory):
    """Fit the progression model and persist the artifact."""
    cfg = _load_run_config(config_path)
    atlas = io.load_atlas(atlas_path)
    cohort = io.load_cohort(cohort_path, atlas)
    kind, support = _build_kind_and_support(cfg, atlas, graph_paths, support_path)
    state = staging.fit(cohort, kind, support, cfg.optimizer)
    n_params = support.edge_count + 3 + (len(kind.mix) if kind.mix else 0)
    n_obs = cohort.n_scans * atlas.count
    try:
        train_aic = evaluation.aic(state.final_loss, n_params, n_obs)
    except NumericError:
        train_aic = float("-inf")
    metrics = {
        "train_sse": state.final_loss,
        "train_aic": train_aic,
        "n_params": n_params,
        "n_obs": n_obs,
    }
    artifact = io.build_artifact(
        atlas, kind.label, state, support, cfg.optimizer, metrics,
        graph_masks=[g.support() for g in kind.graphs] if kind.label == "mixed"
        else None,
    )
    io.save_artifact(out_artifact, artifact)
    if out_trajectory:
        traj = staging.trajectory_from_fit(state, kind, cfg.optimizer)
        dynamics.write_trajectory(out_trajectory, traj, atlas)
    for w in state.warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(
        f"fit: loss {state.final_loss:.6g} after "
        f"{state.loss_history[-1][0]} epochs (converged={state.converged}) "
        f"-> {out_artifact}"
    )


@cli.command("stage")
@click.option("--cohort", "cohort_path", required=True, type=click.Path(exists=True))
@click.option("--atlas", "atlas_path", required=True, type=click.Path(exists=True))
@click.option("--artifact", "artifact_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def stage_cmd(cohort_path, atlas_path, artifact_path, out_path):
    """Place subjects on a fitted trajectory with frozen parameters."""
    atlas = io.load_atlas(atlas_path)
    cohort = io.load_cohort(cohort_path, atlas)
    artifact = io.load_artifact(artifact_path)
    kind = artifact.model_kind(atlas)
    result = staging.stage_holdout(
        cohort, artifact.fit, kind, artifact.optimizer_config()
    )
    lines = ["subject_id,onset,sse"]
    for subject in cohort.subjects:
        onset = result.stages.onsets[subject.id]
        lines.append(
            f"{subject.id},{onset!r},{result.per_subject_sse[subject.id]!r}"
        )
    io.atomic_write_text(out_path, "\n".join(lines) + "\n")
    click.echo(f"staged {cohort.n_subjects} subjects -> {out_path}")


@cli.command("sweep")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--cohort", "cohort_path", required=True, type=click.Path(exists=True))
@click.option("--atlas", "atlas_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_str", required=True,
              help="Comma-separated ascending thresholds.")
@click.option("--margin", type=float, default=0.02)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--summary", "summary_path", type=click.Path(), default=None,
              help="JSON summary path (defaults to <out>.summary.json).")
def sweep_cmd(graph_path, cohort_path, atlas_path, config_path, thresholds_str,
              margin, out_path, summary_path):
    """Locate the critical edge number by refitting along a threshold ladder."""
    cfg = _load_run_config(config_path)
    atlas = io.load_atlas(atlas_path)
    cohort = io.load_cohort(cohort_path, atlas)
    graph = graphs.read_connectome(graph_path, atlas)
    thresholds = [float(t) for t in thresholds_str.split(",")]
    folds = evaluation.make_folds(
        cohort, cfg.folds.n_folds, cfg.folds.val_size, cfg.folds.test_size,
        cfg.fold_seed,
    )
    result = evaluation.threshold_sweep(
        graph, thresholds, cohort, cfg.model_kind, cfg.optimizer, folds, margin
    )
    evaluation.write_sweep_csv(out_path, result)
    summary = summary_path or f"{out_path}.summary.json"
    evaluation.write_sweep_summary_json(summary, result)
    click.echo(
        f"critical_edge_number={result.critical_edge_number} "
        f"critical_threshold={result.critical_threshold}"
    )


@cli.command("analyze-graph")
@click.option("--a", "a_path", type=click.Path(exists=True), default=None)
@click.option("--b", "b_path", type=click.Path(exists=True), default=None)
@click.option("--llm", "llm_path", type=click.Path(exists=True), default=None)
@click.option("--bio", "bio_paths", multiple=True, type=click.Path(exists=True))
@click.option("--top-n", type=int, default=5)
@click.option("--out", "out_path", required=True, type=click.Path())
def analyze_graph_cmd(a_path, b_path, llm_path, bio_paths, top_n, out_path):
    """Similarity report for a pair, or novel-link table for one-vs-many."""
    if a_path and b_path:
        ga = graphs.read_connectome(a_path)
        gb = graphs.read_connectome(b_path)
        report = graphs.graph_similarity(ga.support(), gb.support())
        doc = {
            "frobenius": report.frobenius,
            "pearson": report.pearson,
            "spearman": report.spearman,
            "edge_overlap": report.edge_overlap,
        }
        io.atomic_write_text(out_path, json.dumps(doc, indent=2) + "\n")
        click.echo(f"wrote similarity report -> {out_path}")
        return
    if llm_path and bio_paths:
        gl = graphs.read_connectome(llm_path)
        bios = [graphs.read_connectome(p, gl.atlas).support() for p in bio_paths]
        links = graphs.novel_links(gl.support(), bios, top_n, llm_weights=gl)
        lines = ["source,target,bio_frequency,llm_weight"]
        lines += [
            f"{l.source},{l.target},{l.bio_frequency},{l.llm_weight!r}"
            for l in links
        ]
        io.atomic_write_text(out_path, "\n".join(lines) + "\n")
        click.echo(f"wrote {len(links)} novel links -> {out_path}")
        return
    raise click.UsageError("pass either --a/--b or --llm/--bio ...")


@cli.group("synth")
def synth_group():
    """Synthetic ground-truth experiments."""


@synth_group.command("gen")
@click.option("--cities", "cities_path", type=click.Path(exists=True), default=None,
              help="City CSV (name,lat,lon); defaults to the packaged table.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--subjects", type=int, default=60)
@click.option("--scans", "scans_str", default="1-3",
              help="Scans per subject: N or LO-HI.")
@click.option("--interval", type=float, default=1.0)
@click.option("--noise", type=float, default=0.0)
@click.option("--rate", type=float, default=0.05, help="Diffusion rate.")
@click.option("--horizon", type=float, default=200.0)
@click.option("--step", type=float, default=0.5)
@click.option("--seed", type=int, default=0)
@click.option("--seed-city", default=None,
              help="City holding the initial mass (defaults to the first).")
def synth_gen_cmd(cities_path, out_dir, subjects, scans_str, interval, noise,
                  rate, horizon, step, seed, seed_city):
    """Generate a diffusion cohort over the city proximity graph."""
    cities = (
        synth.CityTable.from_csv(cities_path)
        if cities_path
        else synth.load_default_cities()
    )
    graph = synth.proximity_graph(cities)
    atlas = graph.atlas
    seed_name = seed_city or atlas.names[0]
    init = dynamics.seed_initial(atlas, (seed_name,), 1.0)
    truth = synth.SyntheticTruth(
        graph=graph,
        params=dynamics.ModelParams(k=rate, alpha=0.0, v=1.0),
        capacity=dynamics.CarryingCapacity(np.ones(atlas.count)),
        init=init,
        horizon=horizon,
        step=step,
        noise_sd=noise,
    )
    if "-" in scans_str:
        lo, hi = scans_str.split("-", 1)
        scans = (int(lo), int(hi))
    else:
        scans = int(scans_str)
    cohort, onsets = synth.gen_cohort(truth, subjects, scans, interval, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_atlas(out / "atlas.csv", atlas)
    io.save_cohort(out / "cohort.csv", cohort)
    graphs.write_connectome(out / "truth_graph.csv", graph)
    truth_doc = {
        "params": {"k": rate, "alpha": 0.0, "v": 1.0},
        "noise_sd": noise,
        "seed": seed,
        "seed_city": seed_name,
        "horizon": horizon,
        "step": step,
        "interval": interval,
        "onsets": {k: float(v) for k, v in sorted(onsets.items())},
    }
    io.atomic_write_text(
        out / "truth.json", json.dumps(truth_doc, indent=2, sort_keys=True) + "\n"
    )
    click.echo(f"wrote cohort of {cohort.n_subjects} subjects -> {out}")


@synth_group.command("recover")
@click.option("--estimated", "estimated_path", required=True,
              type=click.Path(exists=True))
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--density", type=float, required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def synth_recover_cmd(estimated_path, truth_path, density, out_path):
    """Score an estimated graph against the truth at matched density."""
    est = graphs.read_connectome(estimated_path)
    tru = graphs.read_connectome(truth_path, est.atlas)
    score = synth.recovery_score(est, tru, density)
    doc = {
        "precision": score.precision,
        "recall": score.recall,
        "f1": score.f1,
        "matched_density": score.matched_density,
    }
    io.atomic_write_text(out_path, json.dumps(doc, indent=2) + "\n")
    click.echo(
        f"precision={score.precision:.4f} recall={score.recall:.4f} "
        f"f1={score.f1:.4f}"
    )


@cli.command("report")
@click.option("--artifact", "artifact_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--series", "series_path", type=click.Path(), default=None)
def report_cmd(artifact_paths, out_path, series_path):
    """Tabulate fitted artifacts into a comparison table and plot series."""
    rows = []
    for p in artifact_paths:
        art = io.load_artifact(p)
        m = art.metrics
        rows.append(
            {
                "name": Path(p).stem,
                "label": art.label,
                "n_params": m.get("n_params"),
                "train_sse": m.get("train_sse"),
                "train_aic": m.get("train_aic"),
                "converged": art.fit.converged,
            }
        )
    lines = ["model,label,n_params,train_sse,train_aic,converged"]
    for r in rows:
        lines.append(
            f"{r['name']},{r['label']},{r['n_params']},{r['train_sse']!r},"
            f"{r['train_aic']!r},{int(r['converged'])}"
        )
    io.atomic_write_text(out_path, "\n".join(lines) + "\n")
    if series_path:
        ordered = sorted(rows, key=lambda r: (r["n_params"] or 0))
        io.atomic_write_text(
            series_path, json.dumps(ordered, indent=2) + "\n"
        )
    click.echo(f"wrote report for {len(rows)} artifacts -> {out_path}")


def _fail(category: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    click.echo(f"error: {category}: {message}", err=True)
    return code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        return _fail("usage", exc, 1)
    except click.ClickException as exc:
        return _fail("usage", exc, 1)
    except click.Abort:
        return _fail("usage", "aborted", 1)
    except ProviderError as exc:
        return _fail("provider", exc, 4)
    except NumericError as exc:
        return _fail("numeric", exc, 3)
    except (DataError, OSError) as exc:
        return _fail("data", exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
