import sys

import numpy as np
import pytest

from pfpe.approximator import FeatureMap, LinearApproximator
from pfpe.mdp import Policy, StateDistribution, build_baird, cycle2_mdp, random_ergodic_mdp, selfloop_mdp, \
    stationary_distribution


def on_policy_problem(seed, n_states=None, n_actions=None, gamma=0.9):
    """Random ergodic MDP with a random full-support policy, d = d^pi, mu = pi, one-hot features."""
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(2, 11)) if n_states is None else n_states
    n_a = int(rng.integers(1, 4)) if n_actions is None else n_actions
    mdp = random_ergodic_mdp(rng, n_s, n_a, gamma=gamma)
    pi = Policy(0.9 * rng.dirichlet(np.ones(n_a), size=n_s) + 0.1 / n_a)
    d = stationary_distribution(mdp, pi)
    return mdp, FeatureMap.one_hot(n_s, n_a), d, pi


@pytest.fixture
def baird():
    return build_baird(0.99)


@pytest.fixture
def selfloop():
    mdp = selfloop_mdp(1.0, 0.9)
    feats = FeatureMap(np.ones((1, 1)), 1, 1)
    pol = Policy(np.ones((1, 1)))
    return mdp, feats, StateDistribution(np.ones(1)), pol


@pytest.fixture
def cycle2():
    mdp = cycle2_mdp((1.0, 0.0), 0.9)
    feats = FeatureMap.one_hot(2, 1)
    pol = Policy(np.ones((2, 1)))
    return mdp, feats, StateDistribution.uniform(2), pol


@pytest.fixture
def linear_selfloop(selfloop):
    mdp, feats, d, pol = selfloop
    return mdp, LinearApproximator(feats), d, pol


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
