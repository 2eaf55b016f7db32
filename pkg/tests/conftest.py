import numpy as np
import pytest

from alignsim import kernels
from alignsim.harness import pipeline
from alignsim.harness.config import load_config
from alignsim.mdpo import CrossModalPair, PreferenceTuple
from alignsim.policy import ToyPolicy, feature_dim

LABELS = ("a", "b", "c")


def random_policy(rng, n_cand=3, di=4, dq=3, scale=0.5, frozen=False):
    labels = LABELS[:n_cand] if n_cand <= len(LABELS) else tuple(f"y{i}" for i in range(n_cand))
    pol = ToyPolicy.random(feature_dim(n_cand, di, dq), labels, rng, scale)
    return pol.clone(frozen=frozen)


def random_prefs(rng, policy, n, di=4, dq=3):
    out = []
    labels = policy.candidate_set
    for i in range(n):
        w, l = rng.choice(len(labels), 2, replace=False)
        out.append(PreferenceTuple(rng.standard_normal(di), rng.standard_normal(dq), labels[w], labels[l], f"p{i}"))
    return out


def random_cms(rng, policy, n, di=4, dq=3):
    labels = policy.candidate_set
    return [CrossModalPair(rng.standard_normal(dq), labels[rng.integers(len(labels))],
                           rng.standard_normal(di), rng.standard_normal(di)) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["compiled", "python"])
def backend(request):
    mod = getattr(kernels, request.param)
    if mod is None:
        pytest.skip("compiled kernels not built")
    return mod


def small_config(*overrides):
    return load_config(overrides=[
        {"world": {"n_live": 60, "n_heldout": 60, "docs_per_domain": 24}},
        {"mdpo": {"epochs": 3}},
        {"metacog": {"steps": 150, "restarts": 3, "influence_queries": 10}},
        {"sweep": {"n_queries": 30, "gammas": [0.5, 0.8, 1.0]}},
        *overrides,
    ])


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A complete small run directory shared by harness tests."""
    d = tmp_path_factory.mktemp("run")
    cfg = small_config()
    run = pipeline.run_all(d, cfg, with_sweep=True)
    return d, cfg, run


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
