"""Preference losses (standard, cross-modal, reward-anchored), their
weighted composite, anchor estimation and the gradient-descent trainer.

Every loss is a batch mean of ``softplus(-margin)``, which equals
``-log sigmoid(margin)`` but stays finite for margins of any magnitude.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DomainError, TrainingDivergedError
from .policy import as_vector, joint_features


@dataclass(frozen=True)
class PreferenceTuple:
    image: np.ndarray
    question: np.ndarray
    chosen: str
    rejected: str
    id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "image", as_vector(self.image, name="image_vec"))
        object.__setattr__(self, "question", as_vector(self.question, name="question_vec"))
        object.__setattr__(self, "chosen", str(self.chosen))
        object.__setattr__(self, "rejected", str(self.rejected))
        if self.chosen == self.rejected:
            raise DomainError(f"preference {self.id!r}: chosen and rejected are both {self.chosen!r}")


@dataclass(frozen=True)
class CrossModalPair:
    question: np.ndarray
    answer: str
    image_pos: np.ndarray
    image_neg: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "question", as_vector(self.question, name="question_vec"))
        object.__setattr__(self, "answer", str(self.answer))
        pos = as_vector(self.image_pos, name="image_pos_vec")
        neg = as_vector(self.image_neg, len(pos), name="image_neg_vec")
        if np.array_equal(pos, neg):
            raise DomainError("supporting and contradicting images are identical")
        object.__setattr__(self, "image_pos", pos)
        object.__setattr__(self, "image_neg", neg)


@dataclass(frozen=True)
class Anchor:
    delta: float
    percentile_q: float
    calibration_size: int
    source: str = "policy"
    disjoint_from_training: bool = True


@dataclass
class MdpoConfig:
    beta: float = 1.0
    lambda_cm: float = 1.0
    lambda_ra: float = 1.0
    learning_rate: float = 0.5
    epochs: int = 50
    batch_size: int = 16
    q: float = 50.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError("beta must be > 0")
        if self.lambda_cm < 0 or self.lambda_ra < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 <= self.q <= 100:
            raise ConfigurationError("q must lie in [0, 100]")

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def _check_pair(policy, reference):
    if tuple(policy.candidate_set) != tuple(reference.candidate_set):
        raise ConfigurationError("policy and reference candidate sets differ")
    if policy.dim != reference.dim:
        raise ConfigurationError("policy and reference weight dimensions differ")


def implicit_reward(policy, reference, features, answer, beta=1.0):
    """``beta * (log pi(y|x) - log pi_ref(y|x))`` for a feature matrix ``x``."""
    _check_pair(policy, reference)
    return beta * (policy.log_prob(features, answer) - reference.log_prob(features, answer))


def _reward_and_grad(policy, reference, features, answer, beta, want_grad):
    r = beta * (policy.log_prob(features, answer) - reference.log_prob(features, answer))
    g = beta * policy.grad_log_prob(features, answer) if want_grad else None
    return r, g


def _softplus_neg(m):
    return float(np.logaddexp(0.0, -m))


def _mean_terms(margins, margin_grads):
    losses = [_softplus_neg(m) for m in margins]
    loss = math.fsum(losses) / len(losses)
    if margin_grads is None:
        return loss, None
    grad = np.zeros_like(margin_grads[0])
    for m, g in zip(margins, margin_grads):
        grad -= expit(-m) * g
    return loss, grad / len(margins)


def _pref_margins(batch, policy, reference, beta, delta, want_grad):
    if not batch:
        raise DomainError("batch must be non-empty")
    _check_pair(policy, reference)
    n = len(policy.candidate_set)
    margins, grads = [], [] if want_grad else None
    for t in batch:
        feats = joint_features(t.image, t.question, n)
        rw, gw = _reward_and_grad(policy, reference, feats, t.chosen, beta, want_grad)
        rl, gl = _reward_and_grad(policy, reference, feats, t.rejected, beta, want_grad)
        margins.append(rw - rl - delta)
        if want_grad:
            grads.append(gw - gl)
    return margins, grads


def _cm_margins(batch, policy, reference, beta, want_grad):
    if not batch:
        raise DomainError("batch must be non-empty")
    _check_pair(policy, reference)
    n = len(policy.candidate_set)
    margins, grads = [], [] if want_grad else None
    for p in batch:
        f_pos = joint_features(p.image_pos, p.question, n)
        f_neg = joint_features(p.image_neg, p.question, n)
        rw, gw = _reward_and_grad(policy, reference, f_pos, p.answer, beta, want_grad)
        rl, gl = _reward_and_grad(policy, reference, f_neg, p.answer, beta, want_grad)
        margins.append(rw - rl)
        if want_grad:
            grads.append(gw - gl)
    return margins, grads


def _delta(anchor):
    return float(anchor.delta if isinstance(anchor, Anchor) else anchor)


def dpo_loss(batch, policy, reference, beta=1.0):
    return _mean_terms(*_pref_margins(batch, policy, reference, beta, 0.0, False))[0]


def dpo_loss_grad(batch, policy, reference, beta=1.0):
    """Loss and its gradient with respect to ``policy`` weights."""
    return _mean_terms(*_pref_margins(batch, policy, reference, beta, 0.0, True))


def cm_loss(batch, policy, reference, beta=1.0):
    return _mean_terms(*_cm_margins(batch, policy, reference, beta, False))[0]


def cm_loss_grad(batch, policy, reference, beta=1.0):
    return _mean_terms(*_cm_margins(batch, policy, reference, beta, True))


def ra_loss(batch, policy, reference, beta, anchor):
    return _mean_terms(*_pref_margins(batch, policy, reference, beta, _delta(anchor), False))[0]


def ra_loss_grad(batch, policy, reference, beta, anchor):
    return _mean_terms(*_pref_margins(batch, policy, reference, beta, _delta(anchor), True))


def _combine(dpo, cm, ra, config):
    return dpo + config.lambda_cm * cm + config.lambda_ra * ra


def mdpo_total(batch_pref, batch_cm, policy, reference, config, anchor):
    """Weighted composite loss; returns ``(total, {"dpo", "cm", "ra"})``."""
    dpo = dpo_loss(batch_pref, policy, reference, config.beta)
    cm = cm_loss(batch_cm, policy, reference, config.beta)
    ra = ra_loss(batch_pref, policy, reference, config.beta, anchor)
    return _combine(dpo, cm, ra, config), {"dpo": dpo, "cm": cm, "ra": ra}


def mdpo_total_grad(batch_pref, batch_cm, policy, reference, config, anchor):
    """Like :func:`mdpo_total` but also returns the weight gradient."""
    dpo, g_dpo = dpo_loss_grad(batch_pref, policy, reference, config.beta)
    cm, g_cm = cm_loss_grad(batch_cm, policy, reference, config.beta)
    ra, g_ra = ra_loss_grad(batch_pref, policy, reference, config.beta, anchor)
    total = _combine(dpo, cm, ra, config)
    grad = g_dpo + config.lambda_cm * g_cm + config.lambda_ra * g_ra
    return total, {"dpo": dpo, "cm": cm, "ra": ra}, grad


def nearest_rank_percentile(values, q):
    """The ``ceil(q/100 * n)``-th smallest value (1-based); ``q = 0`` gives the minimum."""
    if not 0 <= q <= 100:
        raise DomainError(f"percentile q={q} outside [0, 100]")
    vals = sorted(float(v) for v in values)
    if not vals:
        raise DomainError("cannot take a percentile of an empty sample")
    rank = max(1, math.ceil(q * len(vals) / 100))
    return vals[rank - 1]


def anchor_from_rewards(rewards, q=50.0, source="reward-file"):
    rewards = list(rewards)
    return Anchor(nearest_rank_percentile(rewards, q), float(q), len(rewards), source)


def estimate_anchor(calibration, policy, reference, beta=1.0, q=50.0, disjoint=True):
    """Anchor from the preferred-answer rewards of a held-out calibration set.

    Rewards are evaluated with ``policy`` as it stands at call time.
    """
    if not calibration:
        raise DomainError("calibration set is empty")
    if not 0 <= q <= 100:
        raise DomainError(f"percentile q={q} outside [0, 100]")
    n = len(policy.candidate_set)
    rewards = [
        implicit_reward(policy, reference, joint_features(t.image, t.question, n), t.chosen, beta)
        for t in calibration
    ]
    return Anchor(nearest_rank_percentile(rewards, q), float(q), len(rewards), "policy", bool(disjoint))


@dataclass
class TrainResult:
    policy: object
    anchor: Anchor
    trace: list = field(default_factory=list)


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train_mdpo(pref_data, cm_data, policy, reference, config, anchor=None, calibration=None, seed=0):
    """Plain gradient descent on the composite loss.

    The anchor is fixed before the first epoch: either passed in, or
    estimated from ``calibration``. Cross-modal batches are cycled so every
    preference mini-batch is paired with one. ``policy`` is not modified;
    a trained copy is returned.
    """
    if not reference.frozen:
        raise ConfigurationError("reference policy must be frozen")
    if not pref_data or not cm_data:
        raise DomainError("both preference and cross-modal datasets must be non-empty")
    _check_pair(policy, reference)
    if anchor is None:
        if calibration is None:
            raise ConfigurationError("either an anchor or a calibration set is required")
        anchor = estimate_anchor(calibration, policy, reference, config.beta, config.q)

    theta = policy.clone(frozen=False)
    trace = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, epoch])
        pref_batches = _batches(len(pref_data), config.batch_size, rng)
        cm_batches = _batches(len(cm_data), config.batch_size, rng)
        for b, idx in enumerate(pref_batches):
            bp = [pref_data[i] for i in idx]
            bc = [cm_data[i] for i in cm_batches[b % len(cm_batches)]]
            total, parts, grad = mdpo_total_grad(bp, bc, theta, reference, config, anchor)
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}: {parts}", batch_index=b, epoch=epoch
                )
            trace.append({"epoch": epoch, "batch": b, **parts, "total": total})
            theta.apply_update(-config.learning_rate * grad)
    return TrainResult(theta, anchor, trace)


# ---------------------------------------------------------------- file I/O


def _floats(v):
    return [float(x) for x in v]


def preference_to_record(t):
    return {
        "id": t.id,
        "image_vec": _floats(t.image),
        "question_vec": _floats(t.question),
        "chosen": t.chosen,
        "rejected": t.rejected,
    }


def crossmodal_to_record(p):
    return {
        "question_vec": _floats(p.question),
        "answer": p.answer,
        "image_pos_vec": _floats(p.image_pos),
        "image_neg_vec": _floats(p.image_neg),
    }


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def load_preferences(path):
    return [
        PreferenceTuple(r["image_vec"], r["question_vec"], r["chosen"], r["rejected"], r.get("id"))
        for r in _read_jsonl(path)
    ]


def save_preferences(path, data):
    _write_jsonl(path, [preference_to_record(t) for t in data])


def load_crossmodal(path):
    return [
        CrossModalPair(r["question_vec"], r["answer"], r["image_pos_vec"], r["image_neg_vec"])
        for r in _read_jsonl(path)
    ]


def save_crossmodal(path, data):
    _write_jsonl(path, [crossmodal_to_record(p) for p in data])


def load_config(path):
    return MdpoConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(path, config):
    Path(path).write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")


TRACE_FIELDS = ("epoch", "batch", "dpo", "cm", "ra", "total")


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})


def read_loss_trace(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("epoch", "batch") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def load_reward_sample(path):
    """Rewards for a user-supplied anchor: a JSON list or one number per line."""
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [float(x) for x in json.loads(text)]
    return [float(line) for line in text.splitlines() if line.strip()]
