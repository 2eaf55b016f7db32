"""Quorum-terminated multi-site reasoning.

Each site runs its own halting loop over a private copy of the shared
initial context. A site halts when its stability-adjusted confidence
reaches ``gamma``, or is forced to halt at ``t_max``. Global termination
happens at ``t_star``, the M-th smallest individual halt step; sites that
have not halted by then are cancelled.

All randomness is keyed on ``(seed, site_id, step)`` so a site's
trajectory does not depend on the schedule or on the other sites, and the
coordinator's output is the same under every execution order.
"""

from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .metacog import confidence, most_influential_parent, perturb, stability_adjustment

SCHEDULES = ("lockstep", "sequential", "reverse", "random", "threads")


@dataclass(frozen=True)
class FederationConfig:
    n_sites: int = 5
    quorum: int = 3
    gamma: float = 0.8
    t_max: int = 10
    fixed_depth: bool = False
    base_score: str = "logit"

    def __post_init__(self):
        if not 1 <= self.quorum <= self.n_sites:
            raise ConfigurationError(f"quorum M={self.quorum} must satisfy 1 <= M <= N={self.n_sites}")
        if self.t_max < 1:
            raise ConfigurationError("t_max must be >= 1")
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be > 0")
        if self.base_score not in ("logit", "probability"):
            raise ConfigurationError("base_score must be 'logit' or 'probability'")


@dataclass(frozen=True)
class ReasoningUnit:
    text: str
    state: str = "prompt"
    answer: int | None = None
    domain: int | None = None


@dataclass
class SiteState:
    site_id: int
    expert_id: int
    context: list
    step: int = 0
    halted: bool = False
    halt_step: int | None = None
    confidence_trace: list = field(default_factory=list)
    log: list = field(default_factory=list)


@dataclass(frozen=True)
class HaltEvent:
    site_id: int
    chain: tuple
    answer: str
    confidence: float
    step: int
    forced: bool
    expert_id: int = 0

    @property
    def chain_text(self):
        return "\n".join(u.text for u in self.chain)

    def to_dict(self):
        return {"site_id": self.site_id, "expert_id": self.expert_id, "step": self.step,
                "answer": self.answer, "confidence": self.confidence, "forced": self.forced,
                "chain": [u.text for u in self.chain]}


@dataclass
class FederationComponents:
    """Everything a site needs besides its own state."""
    experts: dict
    estimator: object
    graph: object
    parent_means: dict


def _rng(seed, site_id, step, purpose):
    return np.random.default_rng([seed, site_id, step, purpose])


def site_step(site, expert, estimator, graph, parent_means, config, seed=0):
    """Advance one non-halted site by a single step.

    Returns ``(site, event)``; ``event`` is ``None`` unless the site halted.
    """
    if site.halted:
        raise DomainError(f"site {site.site_id} has already halted")
    if site.step >= config.t_max:
        raise DomainError(f"site {site.site_id} is already at t_max")
    t = site.step + 1
    h = expert.hidden_state(site.context, _rng(seed, site.site_id, t, 0))
    u_base = estimator.base_confidence(h)
    parent = most_influential_parent(graph, site.expert_id)
    if parent is None or parent not in parent_means:
        delta = 0.0
    else:
        h_pert = perturb(h, parent_means[parent], estimator.epsilon_interp)
        delta = stability_adjustment(expert.predict, h, h_pert, estimator.s_norm)
    score = estimator.base_logit(h) if config.base_score == "logit" else u_base
    c = confidence(score, delta, estimator.alpha)
    site.step = t
    site.confidence_trace.append(c)
    confident = c >= config.gamma
    event = None
    if (confident and not config.fixed_depth) or t == config.t_max:
        probs = expert.predict(h)
        answer = expert.answer_labels[int(np.argmax(probs))]
        site.halted = True
        site.halt_step = t
        event = HaltEvent(site.site_id, tuple(site.context), answer, c, t, not confident, site.expert_id)
    else:
        site.context.append(expert.generate(site.context, _rng(seed, site.site_id, t, 1)))
    site.log.append({"site_id": site.site_id, "step": t, "u_base": u_base, "delta_stability": delta,
                     "confidence": c, "halted": site.halted})
    return site, event


class Coordinator:
    """Collects halt events and decides when remaining steps are moot."""

    def __init__(self, quorum):
        self.quorum = quorum
        self.events = {}
        self._lock = threading.Lock()

    def submit(self, event):
        with self._lock:
            if event.site_id in self.events:
                raise DomainError(f"duplicate event from site {event.site_id}")
            self.events[event.site_id] = event

    def may_run(self, step):
        # some M sites already halted strictly before ``step`` => t* < step
        with self._lock:
            return sum(1 for e in self.events.values() if e.step < step) < self.quorum

    def finalize(self):
        ordered = sorted(self.events.values(), key=lambda e: (e.step, e.site_id))
        if len(ordered) < self.quorum:
            raise DomainError("fewer halt events than the quorum")
        t_star = ordered[self.quorum - 1].step
        return t_star, tuple(e for e in ordered if e.step <= t_star)


@dataclass
class FederationResult:
    t_star: int
    events: tuple
    cancelled_sites: list
    log: list
    executed_steps: dict
    confidence_traces: dict

    def summary(self):
        return {"t_star": self.t_star, "events": [e.to_dict() for e in self.events],
                "cancelled_sites": list(self.cancelled_sites)}

    def serialize(self):
        return json.dumps({"summary": self.summary(), "log": self.log}, sort_keys=True)


def init_sites(ctx0, selection, n_sites):
    active = list(selection.active_experts)
    if not active:
        raise DomainError("expert selection is empty")
    return [SiteState(i, int(active[i % len(active)]), list(ctx0)) for i in range(n_sites)]


def _advance(site, components, config, coord, seed):
    if site.halted or site.step >= config.t_max or not coord.may_run(site.step + 1):
        return False
    _, event = site_step(site, components.experts[site.expert_id], components.estimator,
                         components.graph, components.parent_means, config, seed)
    if event is not None:
        coord.submit(event)
    return True


def _run_to_end(site, components, config, coord, seed):
    while _advance(site, components, config, coord, seed):
        pass


def run_federated(ctx0, selection, config, components, seed=0, schedule="lockstep", schedule_seed=0):
    """Run all sites to quorum and return the confident set with its log."""
    if schedule not in SCHEDULES:
        raise ConfigurationError(f"unknown schedule {schedule!r}")
    sites = init_sites(ctx0, selection, config.n_sites)
    coord = Coordinator(config.quorum)
    if schedule == "lockstep":
        for _ in range(config.t_max):
            for s in sites:
                _advance(s, components, config, coord, seed)
    elif schedule in ("sequential", "reverse"):
        for s in (sites if schedule == "sequential" else sites[::-1]):
            _run_to_end(s, components, config, coord, seed)
    elif schedule == "random":
        order_rng = np.random.default_rng(schedule_seed)
        runnable = list(sites)
        while runnable:
            s = runnable[int(order_rng.integers(len(runnable)))]
            if not _advance(s, components, config, coord, seed):
                runnable.remove(s)
    else:
        with ThreadPoolExecutor(max_workers=len(sites)) as pool:
            for f in [pool.submit(_run_to_end, s, components, config, coord, seed) for s in sites]:
                f.result()

    t_star, events = coord.finalize()
    kept = {e.site_id for e in events}
    log = sorted((r for s in sites for r in s.log if r["step"] <= t_star),
                 key=lambda r: (r["step"], r["site_id"]))
    executed = {s.site_id: min(s.step, t_star) for s in sites}
    traces = {s.site_id: s.confidence_trace[:t_star] for s in sites}
    cancelled = [s.site_id for s in sites if s.site_id not in kept]
    return FederationResult(t_star, events, cancelled, log, executed, traces)


def individual_halt_step(ctx0, expert_id, components, config, seed=0, site_id=0):
    """Halt step of one site run in isolation, ignoring the quorum."""
    site = SiteState(site_id, expert_id, list(ctx0))
    while not site.halted:
        site_step(site, components.experts[expert_id], components.estimator, components.graph,
                  components.parent_means, config, seed)
    return site.halt_step


def executed_steps_from_log(records):
    """Per ``(query_id, site_id)`` executed-step counts recounted from a run log."""
    counts = {}
    for r in records:
        key = (r.get("query_id"), r["site_id"])
        counts[key] = max(counts.get(key, 0), r["step"])
    return counts


def average_chain_length(runs):
    """Mean per-site executed steps over a collection of runs.

    Accepts :class:`FederationResult` objects or raw run-log records.
    """
    runs = list(runs)
    if not runs:
        raise DomainError("no runs to average")
    if isinstance(runs[0], FederationResult):
        steps = [n for r in runs for n in r.executed_steps.values()]
    else:
        steps = list(executed_steps_from_log(runs).values())
    if not steps:
        raise DomainError("no executed steps recorded")
    return math.fsum(steps) / len(steps)
