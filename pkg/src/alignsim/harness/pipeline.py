"""Staged end-to-end pipeline over a run directory.

Stages write their artifacts into the run directory and later stages load
them back, so each CLI subcommand can run on its own. Missing inputs raise
:class:`MissingArtifactError` naming the file.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import mdpo as mdpo_mod
from ..aggregation import aggregate
from ..errors import ConfigurationError, MissingArtifactError
from ..federation import FederationComponents, average_chain_length, run_federated
from ..knowledge import load_kbs, save_kbs
from ..metacog import (
    ConfidenceEstimator, DependencyGraph, build_dependency_graph, compute_parent_means,
    load_parent_means, save_parent_means, train_estimator,
)
from ..policy import ToyPolicy, feature_dim
from ..routing import calibrate_stats, heldout_ids, load_stats, route, routing_record, save_stats
from . import report as rep
from .config import aggregation_config, federation_config, mdpo_config
from .experts import build_experts, collect_corpus, initial_context, measure_restart_accuracies
from .world import SyntheticWorld, build_kbs, embed_queries, generate_preference_data, generate_world

log = logging.getLogger(__name__)

FILES = {
    "world": "world.json",
    "kb": "kb/manifest.json",
    "stats": "stats.json",
    "estimator": "estimator.json",
    "parent_means": "parent_means.json",
    "graph": "graph.json",
    "preference": "preference.jsonl",
    "crossmodal": "crossmodal.jsonl",
    "calibration": "calibration.jsonl",
}


def require(run_dir, name, stage):
    path = Path(run_dir) / FILES[name]
    if not path.exists():
        raise MissingArtifactError(stage, path)
    return path


# ---------------------------------------------------------------- stages


def stage_gen_world(run_dir, cfg):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg["world"], cfg["expert"], cfg["seed"], cfg["retrieval"]["encoder_seed"])
    world.save(run_dir / FILES["world"])
    m = cfg["mdpo"]
    prefs, cms, cal = generate_preference_data(world, m["n_pref"], m["n_cm"], m["n_cal"], cfg["seed"])
    mdpo_mod.save_preferences(run_dir / FILES["preference"], prefs)
    mdpo_mod.save_crossmodal(run_dir / FILES["crossmodal"], cms)
    mdpo_mod.save_preferences(run_dir / FILES["calibration"], cal)
    return world


def stage_build_kb(run_dir, cfg):
    world = SyntheticWorld.load(require(run_dir, "world", "build-kb"))
    kbs = build_kbs(world)
    save_kbs(Path(run_dir) / "kb", kbs)
    return kbs


def stage_calibrate(run_dir, cfg):
    world = SyntheticWorld.load(require(run_dir, "world", "calibrate"))
    kbs = load_kbs(require(run_dir, "kb", "calibrate"))
    queries = embed_queries(world, world.heldout, cfg["retrieval"]["encoder_seed"])
    stats = calibrate_stats(queries, kbs, cfg["retrieval"]["k"], cfg["routing"]["epsilon"])
    save_stats(Path(run_dir) / FILES["stats"], stats)
    return stats


def stage_train_estimator(run_dir, cfg):
    world = SyntheticWorld.load(require(run_dir, "world", "train-estimator"))
    experts = build_experts(world)
    mc = cfg["metacog"]
    corpus, by_expert = collect_corpus(world, experts, world.heldout, cfg["federation"]["t_max"], cfg["seed"])
    init = ConfidenceEstimator.init(
        world.expert_params["hidden_dim"], mc["hidden_dim"], seed=cfg["seed"], alpha=mc["alpha"],
        epsilon_interp=mc["epsilon_interp"], s_norm=mc["s_norm"], u_low=mc["u_low"], u_high=mc["u_high"],
    )
    result = train_estimator(corpus, init, mc["learning_rate"], mc["steps"])
    result.estimator.save(Path(run_dir) / FILES["estimator"])
    save_parent_means(Path(run_dir) / FILES["parent_means"], compute_parent_means(by_expert))
    with open(Path(run_dir) / "estimator_trace.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(result.trace):
            fh.write(f"{i},{loss!r}\n")
    return result


def stage_build_graph(run_dir, cfg):
    world = SyntheticWorld.load(require(run_dir, "world", "build-graph"))
    mc = cfg["metacog"]
    table = measure_restart_accuracies(world, build_experts(world), mc["restarts"], mc["influence_queries"],
                                       cfg["federation"]["t_max"], cfg["seed"])
    graph = build_dependency_graph(table, range(world.n_domains), mc["edge_threshold"],
                                   mc["significance_level"])
    graph.save(Path(run_dir) / FILES["graph"])
    return graph


def stage_train_mdpo(run_dir, cfg, reward_file=None):
    run_dir = Path(run_dir)
    prefs = mdpo_mod.load_preferences(require(run_dir, "preference", "train-mdpo"))
    cms = mdpo_mod.load_crossmodal(require(run_dir, "crossmodal", "train-mdpo"))
    cal = mdpo_mod.load_preferences(require(run_dir, "calibration", "train-mdpo"))
    world = SyntheticWorld.load(require(run_dir, "world", "train-mdpo"))
    config = mdpo_config(cfg)
    dim = feature_dim(len(world.answer_labels), world.params["image_dim"], world.params["question_dim"])
    policy = ToyPolicy.zeros(dim, world.answer_labels)
    reference = policy.clone(frozen=True)
    anchor = None
    if reward_file is not None:
        anchor = mdpo_mod.anchor_from_rewards(mdpo_mod.load_reward_sample(reward_file), config.q)
    result = mdpo_mod.train_mdpo(prefs, cms, policy, reference, config, anchor=anchor,
                                 calibration=cal, seed=cfg["seed"])
    result.policy.save(run_dir / "policy.json")
    mdpo_mod.write_loss_trace(run_dir / "loss_trace.csv", result.trace)
    mdpo_mod.save_config(run_dir / "mdpo_config.json", config)
    return result


# ---------------------------------------------------------------- inference


@dataclass
class Artifacts:
    world: SyntheticWorld
    kbs: list
    stats: list
    components: FederationComponents


def load_artifacts(run_dir, stage="simulate"):
    world = SyntheticWorld.load(require(run_dir, "world", stage))
    kbs = load_kbs(require(run_dir, "kb", stage))
    stats = load_stats(require(run_dir, "stats", stage))
    estimator = ConfidenceEstimator.load(require(run_dir, "estimator", stage))
    means = load_parent_means(require(run_dir, "parent_means", stage))
    graph = DependencyGraph.load(require(run_dir, "graph", stage))
    return Artifacts(world, kbs, stats, FederationComponents(build_experts(world), estimator, graph, means))


def query_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def route_queries(art, cfg, queries):
    """Routing for each live query; refuses queries the stats were fitted on."""
    overlap = heldout_ids(art.stats) & {q.query_id for q in queries}
    if overlap:
        raise ConfigurationError(f"live queries overlap the calibration set: {sorted(overlap)[:5]}")
    r = cfg["routing"]
    embedded = embed_queries(art.world, queries, cfg["retrieval"]["encoder_seed"])
    routed = []
    for q in embedded:
        dist, sel, results = route(q, art.kbs, art.stats, cfg["retrieval"]["k"], r["tau"],
                                   r["entropy_threshold"], r["max_active"])
        routed.append((routing_record(q.query_id, dist, sel), sel, results))
    return routed


def _answer_query(art, cfg, index, query, selection, results, fed_cfg, schedule):
    retrieved = [doc_id for doc_id, _ in results[selection.primary].hits]
    fed = run_federated(initial_context(query, retrieved), selection, fed_cfg, art.components,
                        seed=query_seed(cfg["seed"], index), schedule=schedule)
    outcome, answer, stub = aggregate(fed.events, query.question_text, aggregation_config(cfg))
    return fed, outcome, answer, stub


@dataclass
class ModeRun:
    federations: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    answers: list = field(default_factory=list)
    latencies_ms: list = field(default_factory=list)


def run_mode(art, cfg, queries, routed, fed_cfg, schedule=None):
    schedule = schedule or cfg["federation"].get("schedule", "lockstep")
    out = ModeRun()
    for i, (q, (_, sel, results)) in enumerate(zip(queries, routed)):
        start = time.perf_counter()
        fed, outcome, answer, stub = _answer_query(art, cfg, i, q, sel, results, fed_cfg, schedule)
        out.latencies_ms.append(1000.0 * (time.perf_counter() - start))
        rec = outcome.to_dict()
        rec.update(query_id=q.query_id, final_answer=answer, stub=stub, selected_site=outcome.selected_site)
        out.federations.append(fed)
        out.outcomes.append(rec)
        out.answers.append(answer)
    return out


@dataclass
class PipelineRun:
    report: dict
    routing: list
    federation_log: list
    federation_summary: list
    outcomes: list
    fixed_outcomes: list
    timing: dict


def _percentile(values, q):
    return float(np.percentile(np.asarray(values), q)) if values else 0.0


def run_pipeline(art, cfg, queries=None, schedule=None):
    """Route, run the federation adaptively and at fixed depth, aggregate, score."""
    queries = list(art.world.live if queries is None else queries)
    routed = route_queries(art, cfg, queries)
    labels = art.world.answer_labels
    gold = [labels[q.answer] for q in queries]
    adaptive = run_mode(art, cfg, queries, routed, federation_config(cfg), schedule)
    fixed = run_mode(art, cfg, queries, routed, federation_config(cfg, fixed_depth=True), schedule)

    fed_log, summaries = [], []
    for q, fed in zip(queries, adaptive.federations):
        fed_log.extend({"query_id": q.query_id, **r} for r in fed.log)
        summaries.append({"query_id": q.query_id, **fed.summary()})
    fixed_records = [
        {"query_id": q.query_id, "final_answer": a, "mode": o["mode"],
         "executed_steps": [fed.executed_steps[s] for s in sorted(fed.executed_steps)]}
        for q, a, o, fed in zip(queries, fixed.answers, fixed.outcomes, fixed.federations)
    ]
    adaptive_len = average_chain_length(adaptive.federations)
    fixed_len = average_chain_length(fixed.federations)
    modes = {}
    for o in adaptive.outcomes:
        modes[o["mode"]] = modes.get(o["mode"], 0) + 1
    report = {
        "seed": cfg["seed"],
        "n_queries": len(queries),
        "routing_accuracy": rep.accuracy([q.domain for q in queries], [r["active_experts"][0] for r, _, _ in routed]),
        "task_accuracy": rep.accuracy(gold, adaptive.answers),
        "f1": rep.macro_f1(gold, adaptive.answers, labels),
        "task_accuracy_fixed": rep.accuracy(gold, fixed.answers),
        "f1_fixed": rep.macro_f1(gold, fixed.answers, labels),
        "avg_chain_length_adaptive": adaptive_len,
        "avg_chain_length_fixed": fixed_len,
        "reduction_percent": rep.reduction_percent(adaptive_len, fixed_len),
        "modes": modes,
        "stats_provenance": "heldout" if art.stats else "",
        "config": cfg,
    }
    lat = adaptive.latencies_ms
    timing = {"latency_ms_median": _percentile(lat, 50), "latency_ms_p95": _percentile(lat, 95),
              "per_query_ms": lat}
    return PipelineRun(report, [r for r, _, _ in routed], fed_log, summaries, adaptive.outcomes,
                       fixed_records, timing)


def write_run(run_dir, run):
    run_dir = Path(run_dir)
    rep.write_json(run_dir / "report.json", run.report)
    rep.write_jsonl(run_dir / "routing.jsonl", run.routing)
    rep.write_jsonl(run_dir / "federation.jsonl", run.federation_log)
    rep.write_jsonl(run_dir / "federation_summary.jsonl", run.federation_summary)
    rep.write_jsonl(run_dir / "outcome.jsonl", run.outcomes)
    rep.write_jsonl(run_dir / "outcome_fixed.jsonl", run.fixed_outcomes)
    rep.write_json(run_dir / "timing.json", run.timing)
    rep.write_metrics_csv(run_dir / "metrics.csv", run.report)


def stage_route(run_dir, cfg):
    art = load_artifacts(run_dir, "route")
    routed = route_queries(art, cfg, art.world.live)
    rep.write_jsonl(Path(run_dir) / "routing.jsonl", [r for r, _, _ in routed])
    return routed


def stage_simulate(run_dir, cfg, schedule=None):
    art = load_artifacts(run_dir, "simulate")
    run = run_pipeline(art, cfg, schedule=schedule)
    write_run(run_dir, run)
    return run


# ---------------------------------------------------------------- sweep


def compare_adaptive_vs_fixed(art, cfg, gammas=None, n_queries=None):
    """Threshold sweep against a fixed-depth baseline on identical queries and seeds."""
    gammas = list(cfg["sweep"]["gammas"] if gammas is None else gammas)
    n = cfg["sweep"]["n_queries"] if n_queries is None else n_queries
    queries = art.world.live[:n]
    routed = route_queries(art, cfg, queries)
    labels = art.world.answer_labels
    gold = [labels[q.answer] for q in queries]
    fixed = run_mode(art, cfg, queries, routed, federation_config(cfg, fixed_depth=True))
    fixed_len = average_chain_length(fixed.federations)
    baseline = {"f1": rep.macro_f1(gold, fixed.answers, labels),
                "task_accuracy": rep.accuracy(gold, fixed.answers), "avg_chain_length": fixed_len}
    rows = []
    for g in gammas:
        run = run_mode(art, cfg, queries, routed, federation_config(cfg, gamma=g))
        length = average_chain_length(run.federations)
        rows.append({"gamma": g, "f1": rep.macro_f1(gold, run.answers, labels),
                     "task_accuracy": rep.accuracy(gold, run.answers), "avg_chain_length": length,
                     "reduction_percent": rep.reduction_percent(length, fixed_len)})
    return {"fixed": baseline, "rows": rows, "n_queries": len(queries)}


def stage_sweep(run_dir, cfg):
    art = load_artifacts(run_dir, "sweep")
    result = compare_adaptive_vs_fixed(art, cfg)
    rep.write_sweep_csv(Path(run_dir) / "sweep.csv", result["rows"])
    rep.write_json(Path(run_dir) / "sweep.json", result)
    return result


def stage_report(run_dir, cfg):
    """Re-derive metrics from the run logs and rewrite report.json and metrics.csv."""
    run_dir = Path(run_dir)
    world = SyntheticWorld.load(require(run_dir, "world", "report"))
    files = {}
    for name in ("report.json", "routing.jsonl", "federation.jsonl", "outcome.jsonl", "outcome_fixed.jsonl"):
        if not (run_dir / name).exists():
            raise MissingArtifactError("report", run_dir / name)
        files[name] = run_dir / name
    import json
    previous = json.loads(files["report.json"].read_text())
    metrics = rep.recount(world, rep.read_jsonl(files["routing.jsonl"]), rep.read_jsonl(files["federation.jsonl"]),
                          rep.read_jsonl(files["outcome.jsonl"]), rep.read_jsonl(files["outcome_fixed.jsonl"]),
                          previous["config"]["federation"]["t_max"])
    mismatched = [k for k, v in metrics.items() if not math.isclose(v, previous[k], rel_tol=0, abs_tol=1e-12)]
    if mismatched:
        log.warning("report.json disagreed with the logs on %s; rewriting", mismatched)
    previous.update(metrics)
    rep.write_json(run_dir / "report.json", previous)
    rep.write_metrics_csv(run_dir / "metrics.csv", previous)
    return previous, mismatched


def run_all(run_dir, cfg, with_mdpo=True, with_sweep=False):
    stage_gen_world(run_dir, cfg)
    stage_build_kb(run_dir, cfg)
    stage_calibrate(run_dir, cfg)
    stage_train_estimator(run_dir, cfg)
    stage_build_graph(run_dir, cfg)
    if with_mdpo:
        stage_train_mdpo(run_dir, cfg)
    run = stage_simulate(run_dir, cfg)
    if with_sweep:
        stage_sweep(run_dir, cfg)
    return run
