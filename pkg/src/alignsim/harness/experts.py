"""Toy domain experts with a latent reasoning state.

A chain starts in an exploring state with a diffuse hidden representation.
Each generated step may resolve it, either to the true answer (hidden
state near a "confident" direction) or, with a probability that is higher
outside the expert's own domain, to a wrong answer that stays diffuse.
Resolved and misled states are absorbing.
"""

from __future__ import annotations

import numpy as np

from ..federation import ReasoningUnit
from ..metacog import LabeledState


class ExpertGeometry:
    """Orthonormal answer, confident and diffuse directions shared by all experts."""

    def __init__(self, n_answers, hidden_dim, seed):
        if hidden_dim < n_answers + 2:
            raise ValueError("hidden_dim must be >= n_answers + 2")
        g = np.random.default_rng([seed, 20]).standard_normal((hidden_dim, n_answers + 2))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        self.answers = q[:, :n_answers].T.copy()
        self.confident = q[:, n_answers].copy()
        self.diffuse = q[:, n_answers + 1].copy()
        self.hidden_dim = hidden_dim


class ToyExpert:
    def __init__(self, expert_id, geometry, answer_labels, params, boost=0.0):
        self.expert_id = expert_id
        self.geometry = geometry
        self.answer_labels = list(answer_labels)
        self.p = params
        self.boost = boost

    def augmented(self, amount):
        """Copy whose misleading probability is lowered by ``amount``."""
        return ToyExpert(self.expert_id, self.geometry, self.answer_labels, self.p, self.boost + amount)

    def mislead_prob(self, domain):
        base = self.p["p_mislead_in"] if domain == self.expert_id else self.p["p_mislead_out"]
        return max(0.0, base - self.boost)

    def hidden_state(self, context, rng):
        g, p = self.geometry, self.p
        last = context[-1]
        if last.state == "resolved":
            h = p["state_scale"] * g.confident + p["answer_scale"] * g.answers[last.answer]
        elif last.state == "misled":
            h = p["state_scale"] * g.diffuse + p["misled_answer_scale"] * g.answers[last.answer]
        else:
            h = p["state_scale"] * g.diffuse
        return h + p["noise"] * rng.standard_normal(g.hidden_dim)

    def predict(self, h):
        z = self.p["head_scale"] * (self.geometry.answers @ np.asarray(h))
        e = np.exp(z - z.max())
        return e / e.sum()

    def generate(self, context, rng):
        root, last = context[0], context[-1]
        step = len(context)
        u_resolve, u_mislead, u_pick = rng.random(3)
        if last.state in ("resolved", "misled"):
            state, answer = last.state, last.answer
        elif u_resolve < self.p["p_resolve"]:
            if u_mislead < self.mislead_prob(root.domain):
                wrong = [a for a in range(len(self.answer_labels)) if a != root.answer]
                state, answer = "misled", wrong[int(u_pick * len(wrong))]
            else:
                state, answer = "resolved", root.answer
        else:
            state, answer = "exploring", None
        text = f"expert {self.expert_id} step {step}: {state}"
        if answer is not None:
            text += f", leaning {self.answer_labels[answer]}"
        return ReasoningUnit(text, state, answer, root.domain)


def build_experts(world):
    p = world.expert_params
    geom = ExpertGeometry(len(world.answer_labels), p["hidden_dim"], world.seed)
    return {d: ToyExpert(d, geom, world.answer_labels, p) for d in range(world.n_domains)}


def initial_context(query, retrieved_ids=()):
    """Shared starting context. It names the case but not the question text."""
    text = f"[context] case {query.query_id}"
    if retrieved_ids:
        text += "; retrieved " + ", ".join(retrieved_ids)
    return [ReasoningUnit(text, "prompt", query.answer, query.domain)]


def simulate_chain(expert, ctx0, t_max, seed_key):
    """Run a chain for ``t_max`` steps without halting; returns hidden states."""
    ctx = list(ctx0)
    states = []
    for t in range(1, t_max + 1):
        states.append(expert.hidden_state(ctx, np.random.default_rng([*seed_key, t, 0])))
        if t < t_max:
            ctx.append(expert.generate(ctx, np.random.default_rng([*seed_key, t, 1])))
    return states


def collect_corpus(world, experts, queries, t_max, seed=0):
    """Labelled hidden states for estimator training, plus states per expert.

    Each query is run by its own domain's expert and by one other expert so
    both correct and misleading trajectories are represented.
    """
    corpus, by_expert = [], {d: [] for d in experts}
    rng = np.random.default_rng([seed, 30])
    for qi, q in enumerate(queries):
        others = [d for d in experts if d != q.domain]
        for e_id in (q.domain, int(rng.choice(others))):
            ex = experts[e_id]
            for h in simulate_chain(ex, initial_context(q), t_max, (seed, 31, qi, e_id)):
                corpus.append(LabeledState(h, ex.predict(h), q.answer, e_id))
                by_expert[e_id].append(h)
    return corpus, by_expert


def chain_accuracy(expert, queries, t_max, seed_key):
    correct = 0
    for qi, q in enumerate(queries):
        h = simulate_chain(expert, initial_context(q), t_max, (*seed_key, qi))[-1]
        correct += int(np.argmax(expert.predict(h))) == q.answer
    return correct / len(queries)


def measure_restart_accuracies(world, experts, restarts, n_queries, t_max, seed=0):
    """``{(i, j): [(acc_with, acc_base), ...]}`` over ``restarts`` seeds.

    Knowledge transfer from expert ``i`` to ``j`` is simulated by lowering
    ``j``'s misleading probability by the world's affinity ``i -> j``. Both
    arms of a restart share random numbers.
    """
    table = {}
    for j, ex in experts.items():
        queries = [q for q in world.heldout if q.domain == j][:n_queries]
        if not queries:
            continue
        for i in experts:
            if i == j:
                continue
            helped = ex.augmented(float(world.affinity[i, j]))
            table[(i, j)] = [
                (chain_accuracy(helped, queries, t_max, (seed, 40, r, j)),
                 chain_accuracy(ex, queries, t_max, (seed, 40, r, j)))
                for r in range(restarts)
            ]
    return table
