import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignsim import mdpo
from alignsim.errors import ConfigurationError, DomainError, TrainingDivergedError
from alignsim.mdpo import Anchor, CrossModalPair, MdpoConfig, PreferenceTuple
from alignsim.policy import ToyPolicy, image_weight_mask, joint_features

from conftest import random_cms, random_policy, random_prefs
from gradcheck import numeric_grad, rel_error

LN2 = math.log(2.0)


def softplus_neg(m):
    return math.log1p(math.exp(-m)) if m > -30 else -m


def dpo_oracle(batch, pol, ref, beta, delta=0.0):
    n = len(pol.candidate_set)
    total = 0.0
    for t in batch:
        f = joint_features(t.image, t.question, n)
        lp, lr = pol.log_probs(f), ref.log_probs(f)
        w, l = pol.index(t.chosen), pol.index(t.rejected)
        total += softplus_neg(beta * ((lp[w] - lr[w]) - (lp[l] - lr[l])) - delta)
    return total / len(batch)


class TestRecords:
    def test_equal_answers_rejected(self):
        with pytest.raises(DomainError):
            PreferenceTuple([1.0], [1.0], "a", "a")

    def test_identical_images_rejected(self):
        with pytest.raises(DomainError):
            CrossModalPair([1.0], "a", [1.0, 2.0], [1.0, 2.0])

    @pytest.mark.parametrize("bad", [{"beta": 0}, {"lambda_cm": -1}, {"q": 101}, {"batch_size": 0}])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigurationError):
            MdpoConfig(**bad)


class TestLosses:
    def test_uniform_policy_gives_ln2(self, rng):
        pol = ToyPolicy.zeros(21, "abc")
        ref = pol.clone(frozen=True)
        batch = random_prefs(rng, pol, 5)
        assert abs(mdpo.dpo_loss(batch, pol, ref) - LN2) < 1e-15

    def test_dpo_matches_oracle(self, rng):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        batch = random_prefs(rng, pol, 7)
        for beta in (0.1, 1.0, 4.0):
            assert abs(mdpo.dpo_loss(batch, pol, ref, beta) - dpo_oracle(batch, pol, ref, beta)) < 1e-12

    def test_ra_matches_oracle(self, rng):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        batch = random_prefs(rng, pol, 7)
        assert abs(mdpo.ra_loss(batch, pol, ref, 1.0, 0.37) - dpo_oracle(batch, pol, ref, 1.0, 0.37)) < 1e-12

    def test_single_tuple_hand_value(self):
        # policy favours "a" by 2 nats relative to a uniform reference
        w = np.zeros(6)
        w[0] = 2.0
        pol = ToyPolicy(w, "ab")
        ref = ToyPolicy.zeros(6, "ab").clone(frozen=True)
        t = PreferenceTuple([1.0], [0.0, 0.0], "a", "b")
        assert abs(mdpo.dpo_loss([t], pol, ref) - math.log1p(math.exp(-2.0))) < 1e-15

    def test_extreme_margins_finite(self):
        w = np.zeros(6)
        w[0] = 1e4
        pol = ToyPolicy(w, "ab")
        ref = ToyPolicy.zeros(6, "ab").clone(frozen=True)
        good = PreferenceTuple([1.0], [0.0, 0.0], "a", "b")
        bad = PreferenceTuple([1.0], [0.0, 0.0], "b", "a")
        assert mdpo.dpo_loss([good], pol, ref) == 0.0
        assert abs(mdpo.dpo_loss([bad], pol, ref) - 1e4) < 1e-6

    def test_empty_batch(self, rng):
        pol = random_policy(rng)
        with pytest.raises(DomainError):
            mdpo.dpo_loss([], pol, pol.clone(frozen=True))

    def test_mismatched_candidates(self, rng):
        pol = random_policy(rng)
        other = ToyPolicy.zeros(pol.dim, "xyz").clone(frozen=True)
        with pytest.raises(ConfigurationError):
            mdpo.dpo_loss(random_prefs(rng, pol, 2), pol, other)

    def test_total_is_weighted_sum(self, rng):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        bp, bc = random_prefs(rng, pol, 4), random_cms(rng, pol, 4)
        cfg = MdpoConfig(lambda_cm=0.3, lambda_ra=2.5)
        total, parts = mdpo.mdpo_total(bp, bc, pol, ref, cfg, Anchor(0.2, 50, 4))
        assert abs(total - (parts["dpo"] + 0.3 * parts["cm"] + 2.5 * parts["ra"])) < 1e-14

    def test_image_blind_cm_is_ln2(self, rng):
        mask = image_weight_mask(3, 4, 3)
        w = rng.standard_normal(mask.size)
        w[mask] = 0
        wr = rng.standard_normal(mask.size)
        wr[mask] = 0
        pol, ref = ToyPolicy(w, "abc"), ToyPolicy(wr, "abc", frozen=True)
        assert abs(mdpo.cm_loss(random_cms(rng, pol, 9), pol, ref) - LN2) < 1e-12


class TestGradients:
    @pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
    def test_all_losses_fd(self, rng, beta):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        bp, bc = random_prefs(rng, pol, 5), random_cms(rng, pol, 5)
        anchor = Anchor(0.4, 50, 5)
        cfg = MdpoConfig(beta=beta, lambda_cm=0.7, lambda_ra=1.3)

        def mk(w):
            return ToyPolicy(w, pol.candidate_set)

        cases = [
            (mdpo.dpo_loss_grad(bp, pol, ref, beta)[1], lambda w: mdpo.dpo_loss(bp, mk(w), ref, beta)),
            (mdpo.cm_loss_grad(bc, pol, ref, beta)[1], lambda w: mdpo.cm_loss(bc, mk(w), ref, beta)),
            (mdpo.ra_loss_grad(bp, pol, ref, beta, anchor)[1],
             lambda w: mdpo.ra_loss(bp, mk(w), ref, beta, anchor)),
            (mdpo.mdpo_total_grad(bp, bc, pol, ref, cfg, anchor)[2],
             lambda w: mdpo.mdpo_total(bp, bc, mk(w), ref, cfg, anchor)[0]),
        ]
        for analytic, f in cases:
            assert rel_error(analytic, numeric_grad(f, pol.weights)) < 1e-7

    def test_grad_loss_value_agrees(self, rng):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        bp = random_prefs(rng, pol, 5)
        assert mdpo.dpo_loss_grad(bp, pol, ref)[0] == mdpo.dpo_loss(bp, pol, ref)


@st.composite
def batches(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, 12))
    r = np.random.default_rng(seed)
    pol = random_policy(r, scale=draw(st.floats(0.01, 5.0)))
    return pol, random_policy(r, frozen=True), random_prefs(r, pol, n), draw(st.floats(0.05, 10.0))


class TestIdentities:
    @settings(max_examples=60, deadline=None)
    @given(batches())
    def test_ra_with_zero_anchor_is_dpo(self, case):
        pol, ref, batch, beta = case
        assert abs(mdpo.ra_loss(batch, pol, ref, beta, 0.0) - mdpo.dpo_loss(batch, pol, ref, beta)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(batches())
    def test_total_without_auxiliary_terms_is_dpo(self, case):
        pol, ref, batch, beta = case
        cms = random_cms(np.random.default_rng(0), pol, 3)
        cfg = MdpoConfig(beta=beta, lambda_cm=0.0, lambda_ra=0.0)
        total, _ = mdpo.mdpo_total(batch, cms, pol, ref, cfg, Anchor(5.0, 50, 1))
        assert abs(total - mdpo.dpo_loss(batch, pol, ref, beta)) <= 1e-12


class TestAnchor:
    @pytest.mark.parametrize("q,expected", [(0, 1), (10, 1), (50, 5), (51, 6), (100, 10)])
    def test_nearest_rank(self, q, expected):
        assert mdpo.nearest_rank_percentile(range(10, 0, -1), q) == expected

    def test_empty_and_bad_q(self):
        with pytest.raises(DomainError):
            mdpo.nearest_rank_percentile([], 50)
        with pytest.raises(DomainError):
            mdpo.nearest_rank_percentile([1.0], 120)

    def test_identity_policy_anchor_is_zero(self, rng):
        pol = random_policy(rng)
        a = mdpo.estimate_anchor(random_prefs(rng, pol, 9), pol, pol.clone(frozen=True), q=30)
        assert a.delta == 0.0 and a.calibration_size == 9 and a.disjoint_from_training

    def test_anchor_is_a_sample_reward(self, rng):
        pol, ref = random_policy(rng), random_policy(rng, frozen=True)
        cal = random_prefs(rng, pol, 11)
        a = mdpo.estimate_anchor(cal, pol, ref, beta=2.0, q=50)
        rewards = [mdpo.implicit_reward(pol, ref, joint_features(t.image, t.question, 3), t.chosen, 2.0)
                   for t in cal]
        assert a.delta == sorted(rewards)[5]

    def test_reward_file(self, tmp_path):
        (tmp_path / "r.json").write_text("[3, 1, 2, 4]")
        (tmp_path / "r.txt").write_text("3\n1\n2\n4\n")
        for name in ("r.json", "r.txt"):
            a = mdpo.anchor_from_rewards(mdpo.load_reward_sample(tmp_path / name), 50)
            assert a.delta == 2.0 and a.source == "reward-file"


class TestTraining:
    def setup_data(self, rng):
        pol = random_policy(rng, scale=0.0)
        return pol, random_prefs(rng, pol, 24), random_cms(rng, pol, 12), random_prefs(rng, pol, 8)

    def test_loss_decreases_and_input_untouched(self, rng):
        pol, prefs, cms, cal = self.setup_data(rng)
        before = pol.weights.copy()
        cfg = MdpoConfig(epochs=30, batch_size=8, learning_rate=0.5)
        res = mdpo.train_mdpo(prefs, cms, pol, pol.clone(frozen=True), cfg, calibration=cal, seed=3)
        np.testing.assert_array_equal(pol.weights, before)
        ref = pol.clone(frozen=True)
        start = mdpo.mdpo_total(prefs, cms, pol, ref, cfg, res.anchor)[0]
        end = mdpo.mdpo_total(prefs, cms, res.policy, ref, cfg, res.anchor)[0]
        assert end < start
        assert len(res.trace) == 30 * 3

    def test_deterministic(self, rng):
        pol, prefs, cms, cal = self.setup_data(rng)
        cfg = MdpoConfig(epochs=3, batch_size=5)
        a = mdpo.train_mdpo(prefs, cms, pol, pol.clone(frozen=True), cfg, calibration=cal, seed=9)
        b = mdpo.train_mdpo(prefs, cms, pol, pol.clone(frozen=True), cfg, calibration=cal, seed=9)
        np.testing.assert_array_equal(a.policy.weights, b.policy.weights)
        assert a.trace == b.trace

    def test_reference_must_be_frozen(self, rng):
        pol, prefs, cms, cal = self.setup_data(rng)
        with pytest.raises(ConfigurationError):
            mdpo.train_mdpo(prefs, cms, pol, pol.clone(), MdpoConfig(epochs=1), calibration=cal)

    def test_anchor_source_required(self, rng):
        pol, prefs, cms, _ = self.setup_data(rng)
        with pytest.raises(ConfigurationError):
            mdpo.train_mdpo(prefs, cms, pol, pol.clone(frozen=True), MdpoConfig(epochs=1))

    def test_divergence_reported(self, rng, monkeypatch):
        pol, prefs, cms, cal = self.setup_data(rng)
        real = mdpo.mdpo_total_grad
        calls = []

        def flaky(*args):
            total, parts, grad = real(*args)
            calls.append(1)
            return (math.nan if len(calls) == 4 else total), parts, grad

        monkeypatch.setattr(mdpo, "mdpo_total_grad", flaky)
        with pytest.raises(TrainingDivergedError) as info:
            mdpo.train_mdpo(prefs, cms, pol, pol.clone(frozen=True), MdpoConfig(epochs=5, batch_size=8),
                            calibration=cal)
        assert (info.value.epoch, info.value.batch_index) == (1, 0)


class TestIO:
    def test_roundtrips(self, rng, tmp_path):
        pol = random_policy(rng)
        prefs, cms = random_prefs(rng, pol, 4), random_cms(rng, pol, 3)
        mdpo.save_preferences(tmp_path / "p.jsonl", prefs)
        mdpo.save_crossmodal(tmp_path / "c.jsonl", cms)
        back = mdpo.load_preferences(tmp_path / "p.jsonl")
        assert [t.id for t in back] == [t.id for t in prefs]
        np.testing.assert_array_equal(back[2].image, prefs[2].image)
        np.testing.assert_array_equal(mdpo.load_crossmodal(tmp_path / "c.jsonl")[1].image_neg, cms[1].image_neg)
        cfg = MdpoConfig(beta=0.5, q=25)
        mdpo.save_config(tmp_path / "cfg.json", cfg)
        assert mdpo.load_config(tmp_path / "cfg.json") == cfg

    def test_loss_trace_csv(self, tmp_path):
        trace = [{"epoch": 0, "batch": 1, "dpo": 0.1, "cm": 0.2, "ra": 0.3, "total": 0.6}]
        mdpo.write_loss_trace(tmp_path / "t.csv", trace)
        assert mdpo.read_loss_trace(tmp_path / "t.csv") == trace
