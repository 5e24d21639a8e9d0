"""TD-error vectors, the PFPE inner/outer loop, and exact linear solves.

A run alternates ``k`` inner steps ``w <- w + alpha_l * delta(w, w_bar, sample)``
with a target refresh ``w_bar <- rule(history)``. Inner steps either use one
sampled transition (``mode="sampled"``) or the exact expected TD vector
(``mode="exact"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .approximator import Approximator, FeatureMap, LinearApproximator, as_params, clip_vector
from .errors import CalledOffSchedule, Diverged, SingularGramMatrix, SingularSystem
from .expectation import ExpectationModel, GramMatrices, gram_from_model, importance_ratios
from .linalg import eigvalsh
from .mdp import FiniteMdp, Policy, StateDistribution, Transition, TransitionStream

DEFAULT_DIVERGENCE_THRESHOLD = 1e8
FITTED_ERROR_CONVENTION = (
    "td_error_norm is ||E[delta(w_bar_l, w_bar_l)]|| computed exactly; param_norm is ||w_bar_l||; "
    "dist_to_fixed_point is the distance from w_bar_l to the set of TD fixed points")


# configuration

@dataclass(frozen=True)
class StepSizeSchedule:
    """``constant``: alpha_l = alpha. ``robbins_monro``: alpha_l = alpha0 / (1 + l)**power."""

    kind: str = "constant"
    alpha: float = 0.01
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "robbins_monro"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("step size must be positive")
        if self.kind == "robbins_monro" and not 0.5 < self.power <= 1.0:
            raise ValueError("Robbins-Monro power must lie in (0.5, 1]")

    @classmethod
    def constant(cls, alpha: float) -> "StepSizeSchedule":
        return cls("constant", alpha)

    @classmethod
    def robbins_monro(cls, alpha0: float, power: float) -> "StepSizeSchedule":
        return cls("robbins_monro", alpha0, power)

    def __call__(self, l: int) -> float:
        if self.kind == "constant":
            return self.alpha
        return self.alpha / (1.0 + l) ** self.power


@dataclass(frozen=True)
class TargetUpdateRule:
    kind: str = "periodic"
    momentum: float = 0.0

    def __post_init__(self):
        if self.kind not in ("periodic", "momentum"):
            raise ValueError(f"unknown target rule {self.kind!r}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")

    @classmethod
    def periodic(cls) -> "TargetUpdateRule":
        return cls("periodic")

    @classmethod
    def with_momentum(cls, mu_m: float) -> "TargetUpdateRule":
        return cls("momentum", mu_m)


@dataclass(frozen=True)
class Regularisation:
    enabled: bool = False
    mix: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    schedule: StepSizeSchedule = field(default_factory=StepSizeSchedule)
    k: int = 1
    n_target_updates: int = 1
    target_rule: TargetUpdateRule = field(default_factory=TargetUpdateRule)
    regularisation: Regularisation = field(default_factory=Regularisation)
    mode: str = "sampled"
    seed: int = 0
    clip: float = math.inf
    gamma: float | None = None
    importance_weighting: bool = False
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        if int(self.n_target_updates) != self.n_target_updates or self.n_target_updates < 1:
            raise ValueError("n_target_updates must be a positive integer")
        if self.mode not in ("sampled", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.clip > 0:
            raise ValueError("clip must be positive (use inf to disable)")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.divergence_threshold > 0:
            raise ValueError("divergence threshold must be positive")


# traces

TRACE_HEADER = ("run_id", "seed", "l", "step", "k", "alpha", "td_error_norm",
                "dist_to_fixed_point", "param_norm", "diverged")


@dataclass
class RunTrace:
    """One row per target update index l, starting at l = 0."""

    k: int
    seed: int
    targets: list = field(default_factory=list)
    td_error_norm: list = field(default_factory=list)
    dist_to_fixed_point: list = field(default_factory=list)
    param_norm: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    diverged: bool = False
    final_params: np.ndarray | None = None

    def __len__(self):
        return len(self.targets)

    def record(self, step, alpha, w_bar, td_norm, dist):
        self.targets.append(np.array(w_bar, copy=True))
        self.td_error_norm.append(float(td_norm))
        self.dist_to_fixed_point.append(float(dist))
        self.param_norm.append(float(np.linalg.norm(w_bar)))
        self.steps.append(int(step))
        self.alphas.append(float(alpha))

    def rows(self, run_id: str = "run"):
        n = len(self)
        for l in range(n):
            flag = self.diverged and l == n - 1
            yield (run_id, self.seed, l, self.steps[l], self.k, self.alphas[l], self.td_error_norm[l],
                   self.dist_to_fixed_point[l], self.param_norm[l], int(flag))


# TD-error vectors

def td_error_vector(approx: Approximator, omega, omega_target, sample: Transition, gamma: float,
                    clip: float = math.inf, weight: float = 1.0) -> np.ndarray:
    """(r + gamma * Q_target(s', a') - Q(s, a)) * grad Q(s, a), times ``weight``, then clipped."""
    q = approx.value(omega, sample.s, sample.a)
    q_next = approx.value(omega_target, sample.s_next, sample.a_next)
    err = sample.r + gamma * q_next - q
    v = err * approx.grad(omega, sample.s, sample.a) * weight
    if math.isfinite(clip):
        v = clip_vector(v, clip)
    return v


def expected_td_vector(mdp: FiniteMdp, approx: Approximator, omega, omega_target, d: StateDistribution,
                       mu: Policy, pi: Policy, importance_weighting: bool = False,
                       gamma: float | None = None) -> np.ndarray:
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    return model.expected_td(approx, as_params(omega, approx.param_dim), as_params(omega_target, approx.param_dim))


def _regularised(delta, omega, omega_target, reg: Regularisation) -> np.ndarray:
    # delta(a, b) is the expected (or sampled) TD vector with Q-parameters a, target parameters b
    w = np.asarray(omega, dtype=float)
    wt = np.asarray(omega_target, dtype=float)
    if not reg.enabled or np.array_equal(w, wt):
        # with equal arguments the mixture collapses to delta(w, w); skip the rounding
        return delta(w, wt)
    return reg.mix * delta(w, wt) + (1.0 - reg.mix) * (delta(wt, w) - reg.eta * (w - wt))


def regularised_td_vector(mdp: FiniteMdp, approx: Approximator, omega, omega_target, d: StateDistribution,
                          mu: Policy, pi: Policy, reg: Regularisation, importance_weighting: bool = False,
                          gamma: float | None = None) -> np.ndarray:
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    return _regularised(lambda a, b: model.expected_td(approx, a, b), omega, omega_target, reg)


# single steps

class ExpectationSource:
    """Exact expected TD vectors for a fixed (mdp, d, mu, pi, gamma)."""

    def __init__(self, model: ExpectationModel, approx: Approximator):
        self.model = model
        self.approx = approx
        self.gram = gram_from_model(model, approx.features) if approx.is_linear else None

    def delta(self, omega, omega_target) -> np.ndarray:
        if self.gram is not None:
            return self.gram.expected_td(omega, omega_target)
        return self.model.expected_td(self.approx, omega, omega_target)


def pfpe_inner_step(omega, omega_target, alpha: float, source, approx: Approximator | None = None,
                    gamma: float | None = None, reg: Regularisation = Regularisation(),
                    clip: float = math.inf, weight: float = 1.0,
                    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD) -> np.ndarray:
    """One step ``w + alpha * delta``. ``source`` is a Transition or an ExpectationSource."""
    if not alpha >= 0:
        raise ValueError("step size must be non-negative")
    w = np.asarray(omega, dtype=float)
    if isinstance(source, ExpectationSource):
        step = _regularised(source.delta, w, omega_target, reg)
    else:
        if approx is None or gamma is None:
            raise ValueError("sampled steps need the approximator and gamma")
        step = _regularised(lambda a, b: td_error_vector(approx, a, b, source, gamma, clip, weight),
                            w, omega_target, reg)
    w_next = w + alpha * step
    norm = float(np.linalg.norm(w_next))
    if not norm <= divergence_threshold:
        raise Diverged(f"parameter norm {norm:.3g} exceeded {divergence_threshold:.3g}")
    return w_next


def target_update(i: int, k: int, rule: TargetUpdateRule, omega_i, omega_prev_k=None, omega_prev_2k=None):
    """Target parameters after inner step ``i``; snapshots are w_{i-k} and w_{i-2k}."""
    if k < 1 or i % k != 0:
        raise CalledOffSchedule(f"target update requested at step {i}, not a multiple of k={k}")
    w = np.asarray(omega_i, dtype=float)
    if rule.kind == "periodic":
        return w.copy()
    if omega_prev_k is None or omega_prev_2k is None:
        raise ValueError("momentum target updates need the w_{i-k} and w_{i-2k} snapshots")
    mu_m = rule.momentum
    return (1.0 - mu_m) * w + mu_m * (np.asarray(omega_prev_k, dtype=float) - np.asarray(omega_prev_2k, dtype=float))


# exact linear solves

def _is_singular(M: np.ndarray, rel_tol: float = 1e-12) -> tuple[bool, float]:
    # LAPACK SVD resolves tiny singular values; sqrt(eig(M^T M)) bottoms out near 1e-8
    sv = np.linalg.svd(M, compute_uv=False)
    return bool(sv[-1] <= rel_tol * max(sv[0], 1e-300)), float(sv[-1])


def fpe_solve_linear(gram: GramMatrices, omega_target, ridge_fallback: bool = False,
                     ridge: float = 1e-10) -> np.ndarray:
    """The minimiser of the target-conditioned loss: Phi w = b + gamma PhiPrime w_target.

    With ``ridge_fallback`` a singular Phi is replaced by Phi + ridge * I, which
    approaches the minimum-norm minimiser as ridge -> 0.
    """
    wt = as_params(omega_target, gram.dim)
    rhs = gram.b + gram.gamma * (gram.PhiPrime @ wt)
    singular, smin = _is_singular(gram.Phi)
    if singular:
        if not ridge_fallback:
            raise SingularGramMatrix(f"feature Gram matrix is singular (smallest singular value {smin:.3g})")
        return np.linalg.solve(gram.Phi + ridge * np.eye(gram.dim), rhs)
    w = np.linalg.solve(gram.Phi, rhs)
    residual = np.linalg.norm(gram.expected_td(w, wt))
    if residual > 1e-10 * max(1.0, np.linalg.norm(rhs)):
        raise SingularGramMatrix(f"FPE solve residual {residual:.3g} too large; Phi is ill-conditioned")
    return w


def td_fixed_point_linear(gram: GramMatrices, allow_singular: bool = False) -> np.ndarray:
    """Solve (Phi - gamma PhiPrime) w = b; with ``allow_singular`` return the minimum-norm solution."""
    A = gram.Phi - gram.gamma * gram.PhiPrime
    singular, smin = _is_singular(A)
    if singular:
        if not allow_singular:
            raise SingularSystem(f"Phi - gamma PhiPrime is singular (smallest singular value {smin:.3g})", smin)
        return np.linalg.lstsq(A, gram.b, rcond=None)[0]
    w = np.linalg.solve(A, gram.b)
    residual = np.linalg.norm(gram.expected_td(w, w))
    if residual > 1e-10 * max(1.0, np.linalg.norm(gram.b)):
        raise SingularSystem(f"fixed-point residual {residual:.3g}; system is ill-conditioned", smin)
    return w


class FixedPointDistance:
    """Distance from w to the affine set {w : (Phi - gamma PhiPrime) w = b}."""

    def __init__(self, gram: GramMatrices):
        self.A = gram.Phi - gram.gamma * gram.PhiPrime
        self.b = gram.b
        self.A_pinv = np.linalg.pinv(self.A, rcond=1e-12)

    def __call__(self, omega) -> float:
        return float(np.linalg.norm(self.A_pinv @ (self.A @ omega - self.b)))


# runs

def _check_ergodic_shapes(mdp, approx, d, mu, pi):
    if approx.n_states != mdp.n_states or approx.n_actions != mdp.n_actions:
        raise ValueError("approximator and MDP disagree on the state-action space")


def run_pfpe(mdp: FiniteMdp, approx: Approximator, d: StateDistribution, mu: Policy, pi: Policy,
             config: RunConfig, omega0, omega_star=None) -> RunTrace:
    """Run ``config.n_target_updates`` outer iterations of k inner steps each.

    ``omega_star`` fixes the point distances are measured to; for linear
    approximators without it, the distance to the TD fixed-point set is used.
    Raises :class:`Diverged` with the partial trace attached.
    """
    _check_ergodic_shapes(mdp, approx, d, mu, pi)
    gamma = mdp.gamma if config.gamma is None else config.gamma
    model = ExpectationModel(mdp, d, mu, pi, config.importance_weighting, gamma)
    source = ExpectationSource(model, approx)
    w = as_params(omega0, approx.param_dim).copy()
    w_bar = w.copy()

    if omega_star is not None:
        ws = as_params(omega_star, approx.param_dim)
        dist = lambda v: float(np.linalg.norm(v - ws))  # noqa: E731
    elif source.gram is not None:
        dist = FixedPointDistance(source.gram)
    else:
        dist = lambda v: math.nan  # noqa: E731

    trace = RunTrace(config.k, config.seed)
    trace.record(0, config.schedule(0), w_bar, np.linalg.norm(source.delta(w_bar, w_bar)), dist(w_bar))

    stream = TransitionStream(mdp, d, mu, pi, np.random.default_rng(config.seed))
    ratios = importance_ratios(mu, pi, d) if config.importance_weighting else None
    momentum = config.target_rule.kind == "momentum"
    prev_k = w.copy()   # w_{i-k}
    prev_2k = w.copy()  # w_{i-2k}
    reg = config.regularisation
    k = config.k
    fast = (approx.is_linear and config.mode == "sampled" and not reg.enabled)
    step = 0
    for l in range(config.n_target_updates):
        alpha = config.schedule(l)
        try:
            if config.mode == "exact":
                for _ in range(k):
                    w = pfpe_inner_step(w, w_bar, alpha, source, reg=reg,
                                        divergence_threshold=config.divergence_threshold)
                    step += 1
            else:
                batch = stream.take(k)
                weights = ratios[batch.s, batch.a] if ratios is not None else None
                if fast:
                    w = _linear_block(approx.features, w, w_bar, alpha, batch, weights, gamma, config.clip,
                                      config.divergence_threshold)
                    step += k
                else:
                    for j in range(k):
                        wt = 1.0 if weights is None else float(weights[j])
                        if wt != 0.0:
                            w = pfpe_inner_step(w, w_bar, alpha, batch[j], approx, gamma, reg, config.clip, wt,
                                                config.divergence_threshold)
                        step += 1
        except Diverged as exc:
            trace.diverged = True
            trace.final_params = w
            bad = exc.trace if isinstance(exc.trace, np.ndarray) else None
            if bad is not None:
                w = bad
            trace.record(step, alpha, w, _safe_norm(source, w), _safe_dist(dist, w))
            raise Diverged(f"run diverged in outer iteration {l}: {exc}", trace=trace, step=step) from None
        if momentum:
            new_bar = target_update(step, k, config.target_rule, w, prev_k, prev_2k)
            prev_2k, prev_k = prev_k, w.copy()
        else:
            new_bar = target_update(step, k, config.target_rule, w)
        w_bar = new_bar
        trace.record(step, config.schedule(l + 1), w_bar, np.linalg.norm(source.delta(w_bar, w_bar)), dist(w_bar))
        if not np.linalg.norm(w_bar) <= config.divergence_threshold:
            trace.diverged = True
            trace.final_params = w
            raise Diverged(f"target norm exceeded {config.divergence_threshold:.3g}", trace=trace, step=step)
    trace.final_params = w
    return trace


def _safe_norm(source, w):
    with np.errstate(all="ignore"):
        try:
            return float(np.linalg.norm(source.delta(w, w)))
        except Exception:
            return math.inf


def _safe_dist(dist, w):
    with np.errstate(all="ignore"):
        try:
            return dist(w)
        except Exception:
            return math.inf


def _linear_block(features: FeatureMap, w, w_bar, alpha, batch, weights, gamma, clip, threshold):
    """k sampled inner steps for linear features, same arithmetic as ``td_error_vector``."""
    table = features.table
    n_a = features.n_actions
    sa = batch.s * n_a + batch.a
    sa_next = batch.s_next * n_a + batch.a_next
    rewards = batch.r
    finite_clip = math.isfinite(clip)
    thr2 = threshold * threshold
    for j in range(len(sa)):
        wt = 1.0 if weights is None else float(weights[j])
        if wt == 0.0:
            continue
        f = table[sa[j]]
        q = float(f @ w)
        q_next = float(table[sa_next[j]] @ w_bar)
        err = float(rewards[j]) + gamma * q_next - q
        v = err * f * wt
        if finite_clip:
            v = clip_vector(v, clip)
        w = w + alpha * v
        nrm2 = float(w @ w)
        if not nrm2 <= thr2:
            raise Diverged(f"parameter norm {math.sqrt(nrm2):.3g} exceeded {threshold:.3g}", trace=w)
    return w


def run_td0(mdp: FiniteMdp, approx: Approximator, d: StateDistribution, mu: Policy, pi: Policy,
            schedule: StepSizeSchedule, n_steps: int, omega0, seed: int = 0, gamma: float | None = None,
            clip: float = math.inf, return_iterates: bool = False) -> np.ndarray:
    """Reference TD(0): w <- w + alpha_i delta(w, w, sample), one fresh sample per step.

    Returns the final parameters, or all iterates (shape (n_steps + 1, dim))
    with ``return_iterates``.
    """
    gamma = mdp.gamma if gamma is None else gamma
    stream = TransitionStream(mdp, d, mu, pi, np.random.default_rng(seed))
    w = as_params(omega0, approx.param_dim).copy()
    out = [w] if return_iterates else None
    for i in range(n_steps):
        w = w + schedule(i) * td_error_vector(approx, w, w, stream.next(), gamma, clip)
        if out is not None:
            out.append(w)
    return np.array(out) if out is not None else w


def linear_setup(mdp, features, d, mu, pi, importance_weighting=False, gamma=None):
    """Convenience: (LinearApproximator, GramMatrices) for a linear problem."""
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    return LinearApproximator(features), gram_from_model(model, features)


def positive_definite(M, tol: float = 0.0) -> bool:
    return bool(eigvalsh(0.5 * (M + M.T))[0] > tol)
