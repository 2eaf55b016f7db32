import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignsim import routing
from alignsim.errors import DomainError
from alignsim.knowledge import Doc, DomainKB, RetrievalResult, embed_query
from alignsim.routing import DomainStats, RoutingDistribution

# dyadic values keep translated scores exact, so ties survive a shift
scores = st.lists(st.integers(-400, 400).map(lambda i: i / 8), min_size=1, max_size=12)
# keeps (max - min) / tau below the float64 exp underflow point (~745)
temperatures = st.floats(0.15, 20.0)


class TestGate:
    def test_hand_value(self):
        d = routing.gate([0.0, math.log(3.0)])
        np.testing.assert_allclose(d.probs, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_temperature_flattens(self):
        sharp = routing.gate([0.0, 1.0], 0.1).probs
        flat = routing.gate([0.0, 1.0], 10.0).probs
        assert sharp[1] > flat[1] > 0.5

    def test_huge_scores_stable(self):
        d = routing.gate([1e308, -1e308, 1e308])
        assert d.probs == (0.5, 0.0, 0.5)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(DomainError):
            routing.gate([1.0], tau)

    @settings(max_examples=200, deadline=None)
    @given(scores, temperatures, st.integers(-800, 800).map(lambda i: i / 8))
    def test_properties(self, z, tau, shift):
        d = routing.gate(z, tau)
        assert abs(math.fsum(d.probs) - 1.0) <= 1e-12
        assert min(d.probs) > 0
        shifted = routing.gate([x + shift for x in z], tau)
        assert np.argmax(d.probs) == np.argmax(shifted.probs) == np.argmax(z)


class TestNormalize:
    def test_zscore(self):
        st_ = DomainStats(0, 0.5, 0.1, 1e-8)
        assert abs(routing.normalize_score(0.7, st_) - 0.2 / (0.1 + 1e-8)) < 1e-15

    def test_zero_sigma_finite(self):
        assert routing.normalize_score(1.0, DomainStats(0, 0.0, 0.0, 1e-8)) == 1e8

    def test_invalid_stats(self):
        with pytest.raises(DomainError):
            DomainStats(0, 0.0, -1.0)
        with pytest.raises(DomainError):
            DomainStats(0, 0.0, 1.0, 0.0)


class TestEntropySelection:
    def test_entropy_bounds(self):
        assert routing.normalized_entropy([1.0, 0.0, 0.0]) == 0.0
        assert abs(routing.normalized_entropy([0.25] * 4) - 1.0) < 1e-15
        assert routing.normalized_entropy([1.0]) == 0.0

    def test_confident_single(self):
        sel = routing.select_experts(RoutingDistribution((0.9, 0.05, 0.05), 1.0))
        assert sel.active_experts == (0,) and not sel.multi_activated

    def test_uncertain_multi(self):
        sel = routing.select_experts(RoutingDistribution((0.3, 0.36, 0.34), 1.0))
        assert sel.active_experts == (1, 2) and sel.multi_activated and sel.primary == 1

    def test_tie_broken_by_index(self):
        sel = routing.select_experts(RoutingDistribution((0.5, 0.5), 1.0), max_active=1)
        assert sel.active_experts == (0,)


def _kbs():
    e = np.eye(4)
    return [DomainKB(d, [Doc(f"d{d}_{i}", e[d] + 0.1 * i * e[(d + 1) % 4]) for i in range(3)]) for d in range(4)]


class TestRoute:
    def test_aggregate_mean(self):
        r = RetrievalResult(0, (("a", 0.2), ("b", 0.4)), 2)
        assert abs(routing.aggregate_scores(r) - 0.3) < 1e-15

    def test_calibrate_population_std(self):
        kbs = _kbs()
        qs = [embed_query(lambda i, q: np.concatenate([i, q]), np.eye(4)[d][:2], np.eye(4)[d][2:], f"h{d}")
              for d in range(4)]
        stats = routing.calibrate_stats(qs, kbs, k=2)
        raw = np.array([[routing.aggregate_scores(r) for r in routing.retrieve_all(kbs, q, 2)] for q in qs])
        np.testing.assert_allclose([s.mu for s in stats], raw.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose([s.sigma for s in stats], raw.std(axis=0, ddof=0), atol=1e-15)
        assert routing.heldout_ids(stats) == {"h0", "h1", "h2", "h3"}

    def test_route_picks_nearest_domain(self):
        kbs = _kbs()
        stats = [DomainStats(d, 0.0, 1.0) for d in range(4)]
        dist, sel, results = routing.route(np.eye(4)[2], kbs, stats, k=2)
        assert sel.primary == 2 and len(results) == 4 and abs(sum(dist.probs) - 1) < 1e-12

    def test_empty_heldout(self):
        with pytest.raises(DomainError):
            routing.calibrate_stats([], _kbs())

    def test_stats_roundtrip(self, tmp_path):
        stats = [DomainStats(0, 0.1, 0.2, 1e-8, 3, "heldout:a,b")]
        routing.save_stats(tmp_path / "s.json", stats)
        assert routing.load_stats(tmp_path / "s.json") == stats
