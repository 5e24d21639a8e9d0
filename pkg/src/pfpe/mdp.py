"""Finite MDPs, policies, i.i.d. transition sampling and canonical environments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .approximator import FeatureMap
from .errors import InvalidDistribution, NonErgodic

PROB_TOL = 1e-12


def _check_simplex(probs: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(probs)):
        raise InvalidDistribution(f"{what}: non-finite entries")
    if np.any(probs < 0):
        raise InvalidDistribution(f"{what}: negative entries")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_TOL):
        raise InvalidDistribution(f"{what}: rows do not sum to 1 (max error {np.max(np.abs(sums - 1.0)):.3e})")


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    transition: np.ndarray  # [s, a, s']
    reward_mean: np.ndarray  # [s, a]
    gamma: float
    reward_noise_std: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward_mean, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvalidDistribution(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise InvalidDistribution(f"reward_mean shape {R.shape} does not match (S, A) = {P.shape[:2]}")
        _check_simplex(P, "transition")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidDistribution(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.reward_noise_std < 0:
            raise InvalidDistribution("reward_noise_std must be nonnegative")
        if not np.isfinite(self.r_max) or np.any(np.abs(R) > self.r_max):
            raise InvalidDistribution(f"|reward_mean| exceeds r_max={self.r_max}")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_gamma(self, gamma: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward_mean, gamma, self.reward_noise_std, self.r_max)

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward_mean": self.reward_mean.tolist(),
            "reward_noise_std": self.reward_noise_std,
            "gamma": self.gamma,
            "r_max": self.r_max,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FiniteMdp":
        mdp = cls(
            transition=np.asarray(doc["transition"], dtype=float),
            reward_mean=np.asarray(doc["reward_mean"], dtype=float),
            gamma=float(doc["gamma"]),
            reward_noise_std=float(doc.get("reward_noise_std", 0.0)),
            r_max=float(doc.get("r_max", 1.0)),
        )
        if "n_states" in doc and doc["n_states"] != mdp.n_states:
            raise InvalidDistribution("n_states disagrees with transition shape")
        if "n_actions" in doc and doc["n_actions"] != mdp.n_actions:
            raise InvalidDistribution("n_actions disagrees with transition shape")
        return mdp


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # [s, a]

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise InvalidDistribution("policy probs must be a matrix [s, a]")
        _check_simplex(p, "policy")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True, eq=False)
class StateDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1:
            raise InvalidDistribution("state distribution must be a vector")
        _check_simplex(p, "state distribution")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int) -> "StateDistribution":
        return cls(np.full(n_states, 1.0 / n_states))


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    a_next: int


class TransitionBatch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i):
        return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                          int(self.s_next[i]), int(self.a_next[i]))


def _check_shapes(mdp: FiniteMdp, d: StateDistribution | None = None, *policies: Policy) -> None:
    if d is not None and d.probs.shape != (mdp.n_states,):
        raise InvalidDistribution(f"state distribution has {d.probs.shape[0]} entries, MDP has {mdp.n_states} states")
    for pol in policies:
        if pol.probs.shape != (mdp.n_states, mdp.n_actions):
            raise InvalidDistribution(f"policy shape {pol.probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")


def _categorical_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sampling; cdf_rows[i] is the CDF used for draw i
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _truncated_normal(rng: np.random.Generator, mean: np.ndarray, std: float, bound: float) -> np.ndarray:
    out = rng.normal(mean, std)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(mean[bad], std)
        bad = np.abs(out) > bound
    return out


def sample_transitions(mdp: FiniteMdp, d: StateDistribution, mu: Policy, pi: Policy,
                       rng: np.random.Generator, n: int) -> TransitionBatch:
    """Draw ``n`` i.i.d. transitions: s ~ d, a ~ mu(s), r ~ R(s, a), s' ~ P(s, a), a' ~ pi(s')."""
    _check_shapes(mdp, d, mu, pi)
    s = _categorical_rows(np.broadcast_to(np.cumsum(d.probs), (n, mdp.n_states)), rng.random(n))
    a = _categorical_rows(np.cumsum(mu.probs, axis=1)[s], rng.random(n))
    mean = mdp.reward_mean[s, a]
    if mdp.reward_noise_std > 0:
        r = _truncated_normal(rng, mean, mdp.reward_noise_std, mdp.r_max)
    else:
        r = mean.astype(float)
    s_next = _categorical_rows(np.cumsum(mdp.transition[s, a], axis=1), rng.random(n))
    a_next = _categorical_rows(np.cumsum(pi.probs, axis=1)[s_next], rng.random(n))
    return TransitionBatch(s, a, r, s_next, a_next)


def sample_transition(mdp: FiniteMdp, d: StateDistribution, mu: Policy, pi: Policy,
                      rng: np.random.Generator) -> Transition:
    return sample_transitions(mdp, d, mu, pi, rng, 1)[0]


class TransitionStream:
    """Sequential i.i.d. transitions drawn from ``rng`` in fixed-size chunks.

    Consumers that take the same number of transitions from streams with equal
    seeds and chunk sizes see identical samples, however they group the takes.
    """

    def __init__(self, mdp: FiniteMdp, d: StateDistribution, mu: Policy, pi: Policy,
                 rng: np.random.Generator, chunk: int = 4096):
        if chunk < 1:
            raise ValueError("chunk must be positive")
        _check_shapes(mdp, d, mu, pi)
        self._args = (mdp, d, mu, pi, rng)
        self.chunk = chunk
        self._buf = None
        self._pos = 0

    def _refill(self):
        self._buf = sample_transitions(*self._args, self.chunk)
        self._pos = 0

    def take(self, n: int) -> TransitionBatch:
        parts = []
        while n > 0:
            if self._buf is None or self._pos == self.chunk:
                self._refill()
            m = min(n, self.chunk - self._pos)
            sl = slice(self._pos, self._pos + m)
            parts.append(TransitionBatch(*(f[sl] for f in self._buf)))
            self._pos += m
            n -= m
        if len(parts) == 1:
            return parts[0]
        return TransitionBatch(*(np.concatenate(cols) for cols in zip(*parts)))

    def next(self) -> Transition:
        if self._buf is None or self._pos == self.chunk:
            self._refill()
        t = self._buf[self._pos]
        self._pos += 1
        return t


def lookahead_distribution(mdp: FiniteMdp, d: StateDistribution, mu: Policy) -> StateDistribution:
    """One-step lookahead distribution P^mu(s') = sum_{s,a} d(s) mu(a|s) P(s'|s,a)."""
    _check_shapes(mdp, d, mu)
    p = np.einsum("s,sa,sat->t", d.probs, mu.probs, mdp.transition)
    return StateDistribution(p / p.sum())


def state_transition_matrix(mdp: FiniteMdp, pi: Policy) -> np.ndarray:
    """P^pi[s, s'] = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def stationary_distribution(mdp: FiniteMdp, pi: Policy, max_iter: int = 100_000,
                            tol: float = 1e-13) -> StateDistribution:
    _check_shapes(mdp, None, pi)
    P = state_transition_matrix(mdp, pi)
    dist = np.full(mdp.n_states, 1.0 / mdp.n_states)
    for _ in range(max_iter):
        nxt = dist @ P
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - dist)) <= tol:
            dist = nxt
            break
        dist = nxt
    else:
        raise NonErgodic(f"power iteration did not settle within {max_iter} iterations")
    resid = np.max(np.abs(dist @ P - dist))
    if resid > 1e-10:
        raise NonErgodic(f"stationary residual {resid:.3e} exceeds 1e-10")
    return StateDistribution(dist)


# ---------------------------------------------------------------------------
# canonical environments

BAIRD_SOLID = 0
BAIRD_WAVY = 1
BAIRD_LOWER = 6
BAIRD_INIT = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0)


def baird_state_features() -> np.ndarray:
    """The classic 7-state / 8-weight Baird feature table, one row per state."""
    x = np.zeros((7, 8))
    for i in range(6):
        x[i, i] = 2.0
        x[i, 7] = 1.0
    x[6, 6] = 1.0
    x[6, 7] = 2.0
    return x


def build_baird(gamma: float = 0.99):
    """Baird's counterexample as an action-value problem.

    Returns ``(mdp, features, pi, mu, d)``. Action 0 is "solid" (go to the lower
    state), action 1 is "wavy" (go to one of the six upper states uniformly).
    The solid-action value of each state carries the classic Baird features;
    wavy-action values have zero features, so they are pinned at the true
    value 0 and never move.
    """
    n_s, n_a = 7, 2
    P = np.zeros((n_s, n_a, n_s))
    P[:, BAIRD_SOLID, BAIRD_LOWER] = 1.0
    P[:, BAIRD_WAVY, :6] = 1.0 / 6.0
    mdp = FiniteMdp(P, np.zeros((n_s, n_a)), gamma, reward_noise_std=0.0, r_max=1.0)
    table = np.zeros((n_s * n_a, 8))
    xs = baird_state_features()
    for s in range(n_s):
        table[s * n_a + BAIRD_SOLID] = xs[s]
    features = FeatureMap(table, n_s, n_a)
    pi = Policy.deterministic([BAIRD_SOLID] * n_s, n_a)
    mu = Policy(np.tile([1.0 / 7.0, 6.0 / 7.0], (n_s, 1)))
    d = StateDistribution.uniform(n_s)
    return mdp, features, pi, mu, d


def random_ergodic_mdp(rng: np.random.Generator, n_states: int, n_actions: int, r_max: float = 1.0,
                       gamma: float = 0.9, eps_floor: float = 1e-3,
                       reward_noise_std: float = 0.0) -> FiniteMdp:
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    if eps_floor * n_states >= 1.0:
        raise ValueError("eps_floor too large for the number of states")
    raw = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P = eps_floor + (1.0 - n_states * eps_floor) * raw
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    return FiniteMdp(P, R, gamma, reward_noise_std=reward_noise_std, r_max=r_max)


def selfloop_mdp(reward: float = 1.0, gamma: float = 0.9) -> FiniteMdp:
    return FiniteMdp(np.ones((1, 1, 1)), np.array([[reward]]), gamma, r_max=max(1.0, abs(reward)))


def cycle2_mdp(rewards=(1.0, 0.0), gamma: float = 0.9) -> FiniteMdp:
    """Two states, one action, deterministic swap 0 -> 1 -> 0."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    R = np.asarray(rewards, dtype=float).reshape(2, 1)
    return FiniteMdp(P, R, gamma, r_max=max(1.0, float(np.max(np.abs(R)))))
