"""Exact expectations over the transition distribution of a finite MDP.

Everything here enumerates (s, a, s', a') with weight
``d(s) nu(a|s) P(s'|s,a) pi(a'|s')`` where ``nu`` is the sampling policy, or
the target policy when importance weighting is on (the per-sample ratio
pi/mu turns the mu-expectation into a pi-expectation over actions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import Approximator, FeatureMap, LinearApproximator, as_params
from .errors import InvalidDistribution
from .mdp import FiniteMdp, Policy, StateDistribution, _check_shapes


def importance_ratios(mu: Policy, pi: Policy, d: StateDistribution | None = None) -> np.ndarray:
    """Per-(s, a) ratio pi(a|s) / mu(a|s); zero where mu and pi both vanish."""
    m, p = mu.probs, pi.probs
    support = p > 0
    if d is not None:
        support &= (d.probs[:, None] > 0)
    if np.any(support & (m <= 0)):
        raise InvalidDistribution("importance weighting needs mu(a|s) > 0 wherever pi(a|s) > 0")
    out = np.zeros_like(p)
    np.divide(p, m, out=out, where=m > 0)
    return out


class ExpectationModel:
    """Enumerated transition distribution for one (mdp, d, mu, pi) setting.

    ``rho[sa]`` is the marginal weight of the pair (s, a) and ``W[sa, s'a']``
    the joint weight of a pair and its successor pair, so that for any
    functions ``f`` on pairs, ``E[f(s,a) g(s',a')] = f @ W @ g``.
    """

    def __init__(self, mdp: FiniteMdp, d: StateDistribution, mu: Policy, pi: Policy,
                 importance_weighting: bool = False, gamma: float | None = None):
        _check_shapes(mdp, d, mu, pi)
        self.mdp = mdp
        self.d, self.mu, self.pi = d, mu, pi
        self.importance_weighting = importance_weighting
        self.gamma = mdp.gamma if gamma is None else float(gamma)
        nu = pi.probs if importance_weighting else mu.probs
        if importance_weighting:
            importance_ratios(mu, pi, d)
        n_s, n_a = mdp.n_states, mdp.n_actions
        self.rho = (d.probs[:, None] * nu).reshape(-1)
        # W[(s,a),(s',a')] = d(s) nu(a|s) P(s'|s,a) pi(a'|s')
        self.W = np.einsum("sa,sat,tb->satb", d.probs[:, None] * nu, mdp.transition, pi.probs).reshape(
            n_s * n_a, n_s * n_a)
        self.r = mdp.reward_mean.reshape(-1)
        self.n_pairs = n_s * n_a

    def td_coefficients(self, q: np.ndarray, q_target: np.ndarray) -> np.ndarray:
        """Per-pair weight sum of TD errors: rho*(r - q) + gamma * W q_target."""
        return self.rho * (self.r - q) + self.gamma * (self.W @ q_target)

    def expected_td(self, approx: Approximator, omega, omega_target) -> np.ndarray:
        q = approx.values_all(omega)
        qt = approx.values_all(omega_target)
        G = approx.grads_all(omega)
        return G.T @ self.td_coefficients(q, qt)

    def loss_hessian(self, approx: Approximator, omega, omega_target) -> np.ndarray:
        """H(w; w') = -d/dw delta(w, w')."""
        G = approx.grads_all(omega)
        H = G.T @ (self.rho[:, None] * G)
        if not approx.is_linear:
            coef = self.td_coefficients(approx.values_all(omega), approx.values_all(omega_target))
            H = H - np.einsum("p,pij->ij", coef, approx.hessians_all(omega))
        return 0.5 * (H + H.T)

    def target_jacobian(self, approx: Approximator, omega, omega_target) -> np.ndarray:
        """J_delta(w; w') = d/dw' delta(w, w')."""
        G = approx.grads_all(omega)
        Gt = approx.grads_all(omega_target)
        return self.gamma * (G.T @ self.W @ Gt)

    def td_jacobian(self, approx: Approximator, omega) -> np.ndarray:
        """J_TD(w) = d/dw delta(w, w) = J_delta(w; w) - H(w; w)."""
        return self.target_jacobian(approx, omega, omega) - self.loss_hessian(approx, omega, omega)

    def td_variance(self, approx: Approximator, omega) -> float:
        """E||delta(w,w,s) - delta(w,w)||^2 under the enumerated distribution (with reward noise)."""
        q = approx.values_all(omega)
        G = approx.grads_all(omega)
        mean = G.T @ self.td_coefficients(q, q)
        total = 0.0
        rows, cols = np.nonzero(self.W)
        for p, p2 in zip(rows, cols):
            err = self.r[p] + self.gamma * q[p2] - q[p]
            diff = err * G[p] - mean
            total += self.W[p, p2] * float(diff @ diff)
        if self.mdp.reward_noise_std > 0:
            total += self.mdp.reward_noise_std ** 2 * float(self.rho @ np.sum(G * G, axis=1))
        return total


@dataclass(frozen=True, eq=False)
class GramMatrices:
    """Phi = E[phi phi^T], PhiPrime = E[phi(s,a) phi(s',a')^T], b = E[r phi].

    With these, the expected TD-error vector of a linear approximator is
    ``b + gamma * PhiPrime @ w_target - Phi @ w``.
    """

    Phi: np.ndarray
    PhiPrime: np.ndarray
    b: np.ndarray
    gamma: float

    def expected_td(self, omega, omega_target) -> np.ndarray:
        return self.b + self.gamma * (self.PhiPrime @ omega_target) - self.Phi @ omega

    @property
    def dim(self) -> int:
        return self.Phi.shape[0]


def gram_from_model(model: ExpectationModel, features: FeatureMap) -> GramMatrices:
    F = features.table
    Phi = F.T @ (model.rho[:, None] * F)
    Phi = 0.5 * (Phi + Phi.T)
    PhiPrime = F.T @ model.W @ F
    b = F.T @ (model.rho * model.r)
    return GramMatrices(Phi, PhiPrime, b, model.gamma)


def gram_matrices(mdp: FiniteMdp, features: FeatureMap, d: StateDistribution, mu: Policy, pi: Policy,
                  importance_weighting: bool = False, gamma: float | None = None) -> GramMatrices:
    return gram_from_model(ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma), features)


def second_moment_lookahead(model: ExpectationModel, features: FeatureMap) -> np.ndarray:
    """Phi'' = E_{s' ~ P^nu, a' ~ pi}[phi(s',a') phi(s',a')^T]."""
    F = features.table
    w_next = model.W.sum(axis=0)
    M = F.T @ (w_next[:, None] * F)
    return 0.5 * (M + M.T)


def linear_params(approx: Approximator, omega) -> np.ndarray:
    return as_params(omega, approx.param_dim)


__all__ = [
    "ExpectationModel",
    "GramMatrices",
    "gram_matrices",
    "gram_from_model",
    "importance_ratios",
    "second_moment_lookahead",
    "LinearApproximator",
]
