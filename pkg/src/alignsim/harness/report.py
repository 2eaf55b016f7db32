"""Metric computation, deterministic file emission and recount from logs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from ..federation import executed_steps_from_log

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "seed", "n_queries", "routing_accuracy", "task_accuracy", "f1", "task_accuracy_fixed",
        "f1_fixed", "avg_chain_length_adaptive", "avg_chain_length_fixed", "reduction_percent",
        "modes", "config",
    ],
    "properties": {
        "seed": {"type": "integer"},
        "n_queries": {"type": "integer", "minimum": 1},
        "routing_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "task_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "task_accuracy_fixed": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_fixed": {"type": "number", "minimum": 0, "maximum": 1},
        "avg_chain_length_adaptive": {"type": "number", "minimum": 1},
        "avg_chain_length_fixed": {"type": "number", "minimum": 1},
        "reduction_percent": {"type": "number", "maximum": 100},
        "modes": {"type": "object"},
        "config": {"type": "object"},
    },
}

SWEEP_FIELDS = ("gamma", "f1", "task_accuracy", "avg_chain_length", "reduction_percent")


def macro_f1(truth, pred, labels):
    scores = []
    for c in labels:
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return math.fsum(scores) / len(scores)


def accuracy(truth, pred):
    return sum(1 for t, p in zip(truth, pred) if t == p) / len(truth)


def reduction_percent(adaptive, fixed):
    return 100.0 * (1.0 - adaptive / fixed)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_FIELDS})


def write_metrics_csv(path, report):
    keys = ["routing_accuracy", "task_accuracy", "f1", "task_accuracy_fixed", "f1_fixed",
            "avg_chain_length_adaptive", "avg_chain_length_fixed", "reduction_percent"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for k in keys:
            writer.writerow([k, repr(float(report[k]))])


def recount(world, routing_records, federation_records, outcome_records, fixed_records, t_max):
    """Recompute report metrics from raw logs and ground truth only."""
    truth = {q.query_id: q for q in world.live}
    ids = [r["query_id"] for r in routing_records]
    routed = accuracy([truth[i].domain for i in ids], [r["active_experts"][0] for r in routing_records])
    labels = world.answer_labels
    gold = [labels[truth[r["query_id"]].answer] for r in outcome_records]
    pred = [r["final_answer"] for r in outcome_records]
    gold_fixed = [labels[truth[r["query_id"]].answer] for r in fixed_records]
    pred_fixed = [r["final_answer"] for r in fixed_records]
    steps = list(executed_steps_from_log(federation_records).values())
    adaptive_len = math.fsum(steps) / len(steps)
    fixed_steps = [n for r in fixed_records for n in r["executed_steps"]]
    fixed_len = math.fsum(fixed_steps) / len(fixed_steps)
    return {
        "routing_accuracy": routed,
        "task_accuracy": accuracy(gold, pred),
        "f1": macro_f1(gold, pred, labels),
        "task_accuracy_fixed": accuracy(gold_fixed, pred_fixed),
        "f1_fixed": macro_f1(gold_fixed, pred_fixed, labels),
        "avg_chain_length_adaptive": adaptive_len,
        "avg_chain_length_fixed": fixed_len,
        "reduction_percent": reduction_percent(adaptive_len, fixed_len),
    }
