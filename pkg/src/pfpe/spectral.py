"""Stability calculus for partially fitted policy evaluation.

Jacobians of the expected TD vector, the condition function
``C(a, k) = x**(k-1) * |J_TD| + (1 + x**(k-1)) * |J_FPE|`` with
``x = |1 - a * lambda_H|``, the noise ball radius ``sigma_k``, the smallest
contracting ``k``, and a report bundling all of these for one problem.

Matrices follow the column convention ``J[i, j] = d delta_i / d w_j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .approximator import Approximator, LinearApproximator, as_params
from .errors import DegenerateEigenvalue, QuadratureUnconverged, SingularHessian
from .expectation import (ExpectationModel, GramMatrices, gram_from_model, gram_matrices, importance_ratios,
                          second_moment_lookahead)
from .linalg import eigvals, eigvalsh, range_basis, spectral_norm
from .mdp import FiniteMdp, Policy, StateDistribution, sample_transitions
from .td_engine import td_error_vector

__all__ = [
    "GramMatrices", "gram_matrices", "JacobianSet", "SpectralReport", "td_jacobian_linear", "loss_hessian_linear",
    "pointwise_jacobians", "path_mean_jacobians_numeric", "path_mean_td_jacobian", "regularised_jacobians",
    "regularised_fpe_norm", "lambda_h_star", "condition_function", "sigma_k", "min_k_for_contraction",
    "error_bound_curve", "fpe_stability_norm", "low_distribution_shift_check", "nonlinear_jacobian_bound",
    "reduce_to_range", "exact_k_step_map", "estimate_sigma_delta", "analyze", "analyze_synthetic",
]

IDENTITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class JacobianSet:
    """H, J_delta and J_TD = J_delta - H, either at a point or averaged along a line."""

    H: np.ndarray
    J_delta: np.ndarray
    J_TD: np.ndarray
    kind: str = "pointwise"

    @classmethod
    def from_parts(cls, H, J_delta, kind="pointwise") -> "JacobianSet":
        return cls(np.asarray(H), np.asarray(J_delta), np.asarray(J_delta) - np.asarray(H), kind)

    def identity_error(self) -> float:
        return float(np.max(np.abs(self.J_TD - (self.J_delta - self.H)))) if self.H.size else 0.0


# linear case

def td_jacobian_linear(gram: GramMatrices, gamma: float | None = None) -> np.ndarray:
    g = gram.gamma if gamma is None else gamma
    return g * gram.PhiPrime - gram.Phi


def loss_hessian_linear(gram: GramMatrices) -> np.ndarray:
    return gram.Phi.copy()


def _linear_set(gram: GramMatrices, kind="pointwise") -> JacobianSet:
    return JacobianSet.from_parts(gram.Phi.copy(), gram.gamma * gram.PhiPrime, kind)


# general approximators

def pointwise_jacobians(model: ExpectationModel, approx: Approximator, omega, omega_bar) -> JacobianSet:
    """H(w; w_bar) and J_delta(w; w_bar) from exact expectations and analytic derivatives."""
    w = as_params(omega, approx.param_dim)
    wb = as_params(omega_bar, approx.param_dim)
    return JacobianSet.from_parts(model.loss_hessian(approx, w, wb), model.target_jacobian(approx, w, wb))


def _gauss_legendre(fn, omega, omega_star, n: int) -> np.ndarray:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    ts, wts = 0.5 * (nodes + 1.0), 0.5 * weights
    acc = None
    for t, c in zip(ts, wts):
        val = c * fn(omega - t * (omega - omega_star))
        acc = val if acc is None else acc + val
    return acc


def _converged_quadrature(fn, omega, omega_star, n_quad, tol):
    coarse = _gauss_legendre(fn, omega, omega_star, n_quad)
    fine = _gauss_legendre(fn, omega, omega_star, 2 * n_quad)
    change = float(np.max(np.abs(fine - coarse))) if fine.size else 0.0
    if change > tol:
        raise QuadratureUnconverged(f"doubling {n_quad} quadrature nodes changed an entry by {change:.3g}", change)
    return fine


def path_mean_jacobians_numeric(approx: Approximator, mdp: FiniteMdp, d: StateDistribution, mu: Policy,
                                pi: Policy, omega, omega_star, omega_bar, n_quad: int = 32,
                                importance_weighting: bool = False, gamma: float | None = None,
                                tol: float = 1e-6) -> JacobianSet:
    """Averages along l(t) = w - t (w - w*), t in [0, 1].

    H is averaged as H(l(t); w_bar) and J_delta as d/dw' delta(w_bar, w') at
    w' = l(t); J_TD is their difference. Gauss-Legendre nodes, checked by
    doubling the node count.
    """
    if n_quad < 2:
        raise ValueError("n_quad must be at least 2")
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    w = as_params(omega, approx.param_dim)
    ws = as_params(omega_star, approx.param_dim)
    wb = as_params(omega_bar, approx.param_dim)
    if approx.is_linear:
        return _linear_set(gram_from_model(model, approx.features), "path_mean")
    H = _converged_quadrature(lambda x: model.loss_hessian(approx, x, wb), w, ws, n_quad, tol)
    J = _converged_quadrature(lambda x: model.target_jacobian(approx, wb, x), w, ws, n_quad, tol)
    return JacobianSet.from_parts(H, J, "path_mean")


def path_mean_td_jacobian(model: ExpectationModel, approx: Approximator, omega, omega_star,
                          n_quad: int = 32, tol: float = 1e-6) -> np.ndarray:
    """Average of J_TD(l(t)) along the line, so delta(w, w) - delta(w*, w*) = J (w - w*)."""
    w = as_params(omega, approx.param_dim)
    ws = as_params(omega_star, approx.param_dim)
    return _converged_quadrature(lambda x: model.td_jacobian(approx, x), w, ws, n_quad, tol)


def regularised_jacobians(H_bar, J_delta_bar, mix: float, eta: float):
    H_bar = np.asarray(H_bar, dtype=float)
    J_delta_bar = np.asarray(J_delta_bar, dtype=float)
    if H_bar.shape != J_delta_bar.shape or H_bar.shape[0] != H_bar.shape[1]:
        raise ValueError("H and J_delta must be square and of equal size")
    I = np.eye(H_bar.shape[0])
    H_reg = mix * H_bar - (1.0 - mix) * (J_delta_bar - eta * I)
    J_reg = mix * J_delta_bar - (1.0 - mix) * (H_bar - eta * I)
    return H_reg, J_reg


def fpe_stability_norm(H_bar, J_delta_bar) -> float:
    """Spectral norm of H^{-1} J_delta."""
    H_bar = np.asarray(H_bar, dtype=float)
    if H_bar.size == 0:
        return 0.0
    sv = np.linalg.svd(H_bar, compute_uv=False)
    smin = float(sv[-1])
    if smin <= 1e-12 * max(float(sv[0]), 1e-300):
        raise SingularHessian(f"loss Hessian is singular (smallest singular value {smin:.3g})")
    return spectral_norm(np.linalg.solve(H_bar, np.asarray(J_delta_bar, dtype=float)))


def regularised_fpe_norm(H_bar, J_delta_bar, mix: float, eta: float) -> float:
    return fpe_stability_norm(*regularised_jacobians(H_bar, J_delta_bar, mix, eta))


# condition function and friends

def lambda_h_star(h_eigenvalues, alpha: float) -> float:
    """Eigenvalue maximising |1 - alpha * lambda|; ties go to the smaller eigenvalue."""
    lam = np.sort(np.real(np.asarray(h_eigenvalues, dtype=complex)).reshape(-1))
    if lam.size == 0:
        raise ValueError("no eigenvalues given")
    score = np.abs(1.0 - alpha * lam)
    return float(lam[int(np.argmax(score))])  # argmax keeps the first (smallest) on ties


def condition_function(alpha: float, k: int, lam_star: float, j_td_norm: float, j_fpe_norm: float) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    try:
        x = abs(1.0 - alpha * lam_star) ** (k - 1)
    except OverflowError:
        x = math.inf
    if math.isinf(x):
        return math.inf if j_td_norm + j_fpe_norm > 0 else 0.0
    return x * j_td_norm + (1.0 + x) * j_fpe_norm


def sigma_k(alpha: float, k: int, lam_star: float, sigma_delta: float) -> float:
    if lam_star == 0:
        raise DegenerateEigenvalue("sigma_k is undefined when lambda_H* = 0")
    return (1.0 - abs(1.0 - alpha * lam_star) ** k) * sigma_delta / lam_star


def min_k_for_contraction(alpha: float, lam_min: float, j_td_norm: float, j_fpe_norm: float) -> int | None:
    """Smallest k with C(alpha, k) < 1 from the closed-form threshold; None if none exists."""
    if j_fpe_norm >= 1.0:
        return None
    total = j_td_norm + j_fpe_norm
    if total <= 0.0:
        return 1
    rate = 1.0 - alpha * lam_min
    c = lambda k: condition_function(alpha, k, lam_min, j_td_norm, j_fpe_norm)  # noqa: E731
    if rate <= 0.0 or rate >= 1.0:
        # log undefined; C is constant in k (rate 1) or behaves irregularly, so search directly
        if c(1) < 1.0:
            return 1
        return 2 if rate == 0.0 and c(2) < 1.0 else None
    threshold = 1.0 + (math.log(1.0 - j_fpe_norm) - math.log(total)) / math.log(rate)
    k = max(1, math.floor(threshold) + 1)
    # guard against rounding at the boundary
    while k > 1 and c(k - 1) < 1.0:
        k -= 1
    while c(k) >= 1.0:
        k += 1
    return k


def error_bound_curve(l, c: float, alpha: float, sig_k: float, initial_error: float):
    """alpha*s/(1-c) + exp(-l(1-c)) * (e0 - s/(1-c)); vectorised over ``l``."""
    if not 0.0 <= c < 1.0:
        raise ValueError("contraction constant must lie in [0, 1)")
    l = np.asarray(l, dtype=float)
    out = alpha * sig_k / (1.0 - c) + np.exp(-l * (1.0 - c)) * (initial_error - sig_k / (1.0 - c))
    return float(out) if out.ndim == 0 else out


# checks

def low_distribution_shift_check(Phi, Phi_lookahead, gamma: float):
    """Whether Phi - gamma^2 Phi'' is positive definite; returns (passes, smallest eigenvalue)."""
    M = np.asarray(Phi, dtype=float) - gamma ** 2 * np.asarray(Phi_lookahead, dtype=float)
    margin = float(eigvalsh(M)[0])
    return margin > 1e-12, margin


def nonlinear_jacobian_bound(approx: Approximator, mdp: FiniteMdp, d: StateDistribution, mu: Policy, pi: Policy,
                             omega_samples, importance_weighting: bool = False, gamma: float | None = None) -> float:
    """Max over samples of lambda_max((J + J^T)/2) for the pointwise TD Jacobian J."""
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    best = -math.inf
    for w in omega_samples:
        J = model.td_jacobian(approx, as_params(w, approx.param_dim))
        best = max(best, float(eigvalsh(0.5 * (J + J.T))[-1]))
    return best


def reduce_to_range(gram: GramMatrices, rel_tol: float = 1e-10):
    """Basis U of range(Phi) and the gram matrices restricted to it.

    The null-space component of w never moves under TD updates when
    PhiPrime annihilates null(Phi); the check is returned as the last value.
    """
    U, _ = range_basis(gram.Phi, rel_tol)
    n = gram.dim
    if U.shape[1] == n:
        return np.eye(n), gram, True
    P_null = np.eye(n) - U @ U.T
    scale = max(float(np.max(np.abs(gram.PhiPrime))), 1e-300)
    valid = bool(np.max(np.abs(gram.PhiPrime @ P_null)) <= 1e-9 * scale)
    reduced = GramMatrices(U.T @ gram.Phi @ U, U.T @ gram.PhiPrime @ U, U.T @ gram.b, gram.gamma)
    return U, reduced, valid


def exact_k_step_map(H, J_delta, alpha: float, k: int) -> np.ndarray:
    """Linear map w_bar_l -> w_bar_{l+1} of expected PFPE with periodic copies (errors about w*)."""
    n = H.shape[0]
    A = np.eye(n) - alpha * H
    M = np.eye(n)
    step = np.eye(n)
    # w_{j+1} - w* = A (w_j - w*) + alpha J (w_bar - w*) ; w_0 = w_bar
    acc = np.zeros((n, n))
    for _ in range(k):
        acc = A @ acc + alpha * J_delta
        step = A @ step
    M = step + acc
    return M


def estimate_sigma_delta(mdp: FiniteMdp, approx: Approximator, d: StateDistribution, mu: Policy, pi: Policy,
                         points, n_samples: int = 1000, seed: int = 0, importance_weighting: bool = False,
                         gamma: float | None = None, clip: float = math.inf) -> float:
    """Max over ``points`` of the sampled standard deviation of delta(w, w, sample)."""
    g = mdp.gamma if gamma is None else gamma
    rng = np.random.default_rng(seed)
    ratios = importance_ratios(mu, pi, d) if importance_weighting else None
    best = 0.0
    for w in points:
        w = as_params(w, approx.param_dim)
        batch = sample_transitions(mdp, d, mu, pi, rng, n_samples)
        vecs = np.empty((n_samples, approx.param_dim))
        for j in range(n_samples):
            wt = 1.0 if ratios is None else float(ratios[batch.s[j], batch.a[j]])
            vecs[j] = td_error_vector(approx, w, w, batch[j], g, clip, wt)
        dev = vecs - vecs.mean(axis=0)
        best = max(best, math.sqrt(float(np.mean(np.sum(dev * dev, axis=1)))))
    return best


# report

CONVENTIONS = {
    "loss_scaling": "half squared loss, so the loss Hessian equals Phi for linear features",
    "matrix_orientation": "J[i, j] = d delta_i / d w_j; PhiPrime = E[phi(s,a) phi(s',a')^T]",
    "lambda_h_star_ties": "smallest eigenvalue among maximisers of |1 - alpha lambda|",
    "sigma_delta": "max over region points of the sampled std of delta(w, w, sample)",
    "region_sup": "exact for linear features; Monte Carlo over a ball for nonlinear approximators",
}


@dataclass
class SpectralReport:
    alpha: float
    k: int
    lambda_h_star: float | None = None
    j_td_norm_star: float | None = None
    j_fpe_norm_star: float | None = None
    condition_value: float | None = None
    contraction_constant: float | None = None
    sigma_k: float | None = None
    k_min: int | None = None
    sigma_delta: float | None = None
    verdicts: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=dict)
    unavailable: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def predicted_stable(self) -> bool:
        return bool(self.verdicts.get("pfpe_contracts"))

    def to_dict(self) -> dict:
        out = asdict(self)
        return _jsonable(out)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def condition_curve(self, k_max: int):
        if None in (self.lambda_h_star, self.j_td_norm_star, self.j_fpe_norm_star):
            return []
        return [(k, condition_function(self.alpha, k, self.lambda_h_star, self.j_td_norm_star,
                                       self.j_fpe_norm_star)) for k in range(1, k_max + 1)]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class _Fields:
    """Collects per-field failures instead of aborting the whole report."""

    def __init__(self, report: SpectralReport):
        self.report = report

    def __call__(self, name, fn):
        try:
            return fn()
        except Exception as exc:  # recorded, not raised
            self.report.unavailable[name] = f"{type(exc).__name__}: {exc}"
            return None


def _finish(report: SpectralReport, H_eigs, J_TD, lam_min):
    """Fill the derived fields once the three norms and lambda_H* are known."""
    r, guard = report, _Fields(report)
    if None not in (r.lambda_h_star, r.j_td_norm_star, r.j_fpe_norm_star):
        r.condition_value = condition_function(r.alpha, r.k, r.lambda_h_star, r.j_td_norm_star, r.j_fpe_norm_star)
        r.contraction_constant = r.condition_value
        if lam_min is not None:
            r.k_min = guard("k_min", lambda: min_k_for_contraction(r.alpha, lam_min, r.j_td_norm_star,
                                                                    r.j_fpe_norm_star))
    if r.lambda_h_star is not None and r.sigma_delta is not None:
        r.sigma_k = guard("sigma_k", lambda: sigma_k(r.alpha, r.k, r.lambda_h_star, r.sigma_delta))
    if J_TD is not None:
        top = guard("td_jacobian_stable", lambda: float(np.max(np.real(eigvals(J_TD)))))
        if top is not None:
            r.verdicts["td_jacobian_stable"] = top < 0
            r.margins["td_jacobian_stable"] = -top
    if r.j_fpe_norm_star is not None:
        r.verdicts["fpe_contracts"] = r.j_fpe_norm_star < 1.0
        r.margins["fpe_contracts"] = 1.0 - r.j_fpe_norm_star
    if r.condition_value is not None:
        r.verdicts["pfpe_contracts"] = r.condition_value < 1.0
        r.margins["pfpe_contracts"] = 1.0 - r.condition_value


def analyze(mdp: FiniteMdp, approx: Approximator, d: StateDistribution, mu: Policy, pi: Policy, alpha: float, k: int,
            center=None, radius: float = 1.0, n_region: int = 128, sigma_delta: float | None = None,
            n_sigma_points: int = 32, n_sigma_samples: int = 1000, importance_weighting: bool = False,
            gamma: float | None = None, seed: int = 0, n_quad: int = 16) -> SpectralReport:
    """Assemble a :class:`SpectralReport` for one problem at step size ``alpha`` and ``k`` inner steps.

    ``center`` is the reference parameter (the fixed point for nonlinear
    approximators); the region is the ball of ``radius`` around it.
    """
    report = SpectralReport(alpha=float(alpha), k=int(k), conventions=dict(CONVENTIONS))
    guard = _Fields(report)
    model = ExpectationModel(mdp, d, mu, pi, importance_weighting, gamma)
    g = model.gamma
    rng = np.random.default_rng(seed)
    dim = approx.param_dim
    c0 = np.zeros(dim) if center is None else as_params(center, dim)

    if sigma_delta is None:
        pts = [c0] + [c0 + _ball_draw(rng, dim, radius) for _ in range(n_sigma_points - 1)]
        sigma_delta = guard("sigma_delta", lambda: estimate_sigma_delta(
            mdp, approx, d, mu, pi, pts, n_sigma_samples, seed, importance_weighting, g))
    report.sigma_delta = sigma_delta

    if approx.is_linear:
        gram = gram_from_model(model, approx.features)
        U, red, valid = reduce_to_range(gram)
        if U.shape[1] < gram.dim:
            report.conventions["coordinates"] = (
                f"Phi has rank {U.shape[1]} < {gram.dim}; analysis restricted to range(Phi), "
                "where the parameter dynamics live")
            report.extras["reduction_valid"] = valid
        H = red.Phi
        Jd = red.gamma * red.PhiPrime
        J_TD = Jd - H
        H_eigs = eigvalsh(H)
        report.lambda_h_star = lambda_h_star(H_eigs, alpha)
        report.j_td_norm_star = spectral_norm(np.eye(H.shape[0]) + alpha * J_TD)
        report.j_fpe_norm_star = guard("j_fpe_norm_star", lambda: fpe_stability_norm(H, Jd))
        report.margins["lambda_h_min"] = float(H_eigs[0])
        shift = low_distribution_shift_check(gram.Phi, second_moment_lookahead(model, approx.features), g)
        report.verdicts["low_shift"], report.margins["low_shift"] = shift
        M = exact_k_step_map(H, Jd, alpha, k)
        report.extras["exact_map_spectral_radius"] = float(np.max(np.abs(eigvals(M))))
        report.extras["exact_map_norm"] = spectral_norm(M)
        _finish(report, H_eigs, J_TD, float(H_eigs[0]))
    else:
        lam_all, td_norms, fpe_norms, tops = [], [], [], []
        for _ in range(n_region):
            w = c0 + _ball_draw(rng, dim, radius)
            Hb = _converged_quadrature(lambda x: model.loss_hessian(approx, x, w), w, c0, n_quad, 1e-6)
            Jb = _converged_quadrature(lambda x: model.target_jacobian(approx, c0, x), w, c0, n_quad, 1e-6)
            Jtd = path_mean_td_jacobian(model, approx, w, c0, n_quad)
            lam_all.extend(eigvalsh(Hb))
            td_norms.append(spectral_norm(np.eye(dim) + alpha * Jtd))
            fpe = guard("j_fpe_norm_star", lambda: fpe_stability_norm(Hb, Jb))
            fpe_norms.append(math.inf if fpe is None else fpe)
            tops.append(float(eigvalsh(0.5 * (Jtd + Jtd.T))[-1]))
        lam_all = np.array(lam_all)
        report.lambda_h_star = lambda_h_star(lam_all, alpha)
        report.j_td_norm_star = max(td_norms)
        report.j_fpe_norm_star = max(fpe_norms)
        report.margins["region_samples"] = n_region
        report.margins["lambda_h_min"] = float(lam_all.min())
        top = max(tops)
        report.verdicts["td_jacobian_stable"] = top < 0
        report.margins["td_jacobian_stable"] = -top
        _finish(report, lam_all, None, float(lam_all.min()) if lam_all.min() > 0 else None)
        report.conventions["td_jacobian_stable"] = "max symmetrised eigenvalue of path-mean TD Jacobians over the region"
    return report


def analyze_synthetic(alpha: float, k: int, lam: float, j_td_norm: float, j_fpe_norm: float,
                      sigma_delta: float | None = None) -> SpectralReport:
    """Report from given constants rather than from an MDP."""
    report = SpectralReport(alpha=float(alpha), k=int(k), conventions={"source": "synthetic constants"})
    report.lambda_h_star = float(lam)
    report.j_td_norm_star = float(j_td_norm)
    report.j_fpe_norm_star = float(j_fpe_norm)
    report.sigma_delta = sigma_delta
    _finish(report, np.array([lam]), None, float(lam))
    return report


def _ball_draw(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    v = rng.normal(size=dim)
    n = np.linalg.norm(v)
    if n == 0:
        return np.zeros(dim)
    return v / n * radius * rng.random() ** (1.0 / dim)
