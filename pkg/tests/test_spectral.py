import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfpe.approximator import FeatureMap, LinearApproximator, MlpApproximator, MlpSpec, fd_jacobian
from pfpe.errors import DegenerateEigenvalue, QuadratureUnconverged, SingularHessian
from pfpe.expectation import ExpectationModel, gram_matrices, second_moment_lookahead
from pfpe.linalg import eigvals, eigvalsh
from pfpe.mdp import BAIRD_INIT, FiniteMdp, Policy, StateDistribution, cycle2_mdp, selfloop_mdp
from pfpe.spectral import (analyze, analyze_synthetic, condition_function, error_bound_curve,
                           fpe_stability_norm, lambda_h_star, loss_hessian_linear, low_distribution_shift_check,
                           min_k_for_contraction, nonlinear_jacobian_bound, path_mean_jacobians_numeric,
                           pointwise_jacobians, regularised_fpe_norm, regularised_jacobians, sigma_k,
                           td_jacobian_linear)
from pfpe.td_engine import expected_td_vector, regularised_td_vector, Regularisation
from conftest import on_policy_problem

ONE = Policy(np.ones((1, 1)))
D1 = StateDistribution(np.ones(1))
SCALAR = FeatureMap(np.ones((1, 1)), 1, 1)


def cycle_gram(gamma=0.9):
    pol = Policy(np.ones((2, 1)))
    return gram_matrices(cycle2_mdp(gamma=gamma), FeatureMap.one_hot(2, 1), StateDistribution.uniform(2), pol, pol)


def small_mlp_problem(seed=0, hidden=3):
    mdp, _, d, pi = on_policy_problem(seed, 3, 2)
    approx = MlpApproximator(MlpSpec(hidden), 3, 2)
    return mdp, approx, d, pi


# Gram matrices and linear Jacobians

def test_gram_examples(baird):
    g = gram_matrices(selfloop_mdp(0.7, 0.9), SCALAR, D1, ONE, ONE)
    assert (g.Phi.item(), g.PhiPrime.item(), g.b.item()) == (1.0, 1.0, 0.7)
    c = cycle_gram()
    np.testing.assert_allclose(c.Phi, 0.5 * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(c.PhiPrime, 0.5 * np.array([[0, 1], [1, 0]]), atol=1e-15)
    mdp, feats, pi, mu, d = baird
    gb = gram_matrices(mdp, feats, d, mu, pi)
    assert np.linalg.matrix_rank(gb.Phi) <= 7


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gram_reproduces_expected_td(seed):
    mdp, feats, d, pi = on_policy_problem(seed)
    rng = np.random.default_rng(seed)
    mu = Policy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))
    g = gram_matrices(mdp, feats, d, mu, pi)
    w, wt = rng.normal(size=feats.dim), rng.normal(size=feats.dim)
    exact = expected_td_vector(mdp, LinearApproximator(feats), w, wt, d, mu, pi)
    assert np.max(np.abs(g.expected_td(w, wt) - exact)) <= 1e-12
    assert np.max(np.abs(g.Phi - g.Phi.T)) <= 1e-10 and eigvalsh(g.Phi)[0] >= -1e-10


def test_td_jacobian_examples(baird):
    g = gram_matrices(selfloop_mdp(1.0, 0.9), SCALAR, D1, ONE, ONE)
    assert td_jacobian_linear(g).item() == pytest.approx(-0.1)
    J = td_jacobian_linear(cycle_gram())
    np.testing.assert_allclose(J, [[-0.5, 0.45], [0.45, -0.5]], atol=1e-15)
    np.testing.assert_allclose(eigvals(J).real, [-0.95, -0.05], atol=1e-14)
    mdp, feats, pi, mu, d = baird
    assert np.max(eigvals(td_jacobian_linear(gram_matrices(mdp, feats, d, mu, pi))).real) > 0


def test_loss_hessian_examples():
    g = gram_matrices(cycle2_mdp(), FeatureMap.one_hot(2, 1), StateDistribution.uniform(2), Policy(np.ones((2, 1))),
                      Policy(np.ones((2, 1))))
    np.testing.assert_allclose(loss_hessian_linear(g), 0.5 * np.eye(2))
    assert loss_hessian_linear(gram_matrices(selfloop_mdp(), SCALAR, D1, ONE, ONE)).item() == 1.0


def test_loss_hessian_matches_finite_differences():
    mdp, feats, d, pi = on_policy_problem(12, 3, 2)
    model = ExpectationModel(mdp, d, pi, pi)
    F = feats.table
    w_bar = np.random.default_rng(0).normal(size=feats.dim)
    q_bar = F @ w_bar

    def loss(w):  # half squared TD error with the target held fixed, by enumeration
        q = F @ w
        err = model.r[:, None] + mdp.gamma * q_bar[None, :] - q[:, None]
        return 0.5 * float(np.sum(model.W * err ** 2))

    w0 = np.random.default_rng(1).normal(size=feats.dim)
    h = 1e-2
    n = feats.dim
    fd = np.empty((n, n))
    E = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            fd[i, j] = (loss(w0 + E[i] + E[j]) - loss(w0 + E[i] - E[j]) - loss(w0 - E[i] + E[j])
                        + loss(w0 - E[i] - E[j])) / (4 * h * h)
    g = gram_matrices(mdp, feats, d, pi, pi)
    assert np.max(np.abs(fd - loss_hessian_linear(g))) <= 1e-8


# Jacobian sets

def test_path_mean_linear_is_constant():
    mdp, feats, d, pi = on_policy_problem(4)
    g = gram_matrices(mdp, feats, d, pi, pi)
    rng = np.random.default_rng(0)
    js = path_mean_jacobians_numeric(LinearApproximator(feats), mdp, d, pi, pi, rng.normal(size=feats.dim),
                                     rng.normal(size=feats.dim), rng.normal(size=feats.dim), n_quad=4)
    np.testing.assert_allclose(js.H, g.Phi, atol=1e-14)
    np.testing.assert_allclose(js.J_TD, td_jacobian_linear(g), atol=1e-14)
    assert js.identity_error() <= 1e-9


def test_path_mean_degenerate_line_is_pointwise():
    mdp, approx, d, pi = small_mlp_problem(1)
    rng = np.random.default_rng(1)
    w, wb = approx.init_params(rng), approx.init_params(rng)
    pm = path_mean_jacobians_numeric(approx, mdp, d, pi, pi, w, w, wb, n_quad=4)
    pw = pointwise_jacobians(ExpectationModel(mdp, d, pi, pi), approx, w, wb)
    np.testing.assert_allclose(pm.H, pw.H, atol=1e-12)
    pm_j = ExpectationModel(mdp, d, pi, pi).target_jacobian(approx, wb, w)
    np.testing.assert_allclose(pm.J_delta, pm_j, atol=1e-12)


def test_path_mean_quadrature_self_consistent():
    mdp, approx, d, pi = small_mlp_problem(2)
    rng = np.random.default_rng(2)
    w, ws, wb = (approx.init_params(rng) for _ in range(3))
    a = path_mean_jacobians_numeric(approx, mdp, d, pi, pi, w, ws, wb, n_quad=64)
    b = path_mean_jacobians_numeric(approx, mdp, d, pi, pi, w, ws, wb, n_quad=128)
    assert np.max(np.abs(a.H - b.H)) <= 1e-6 and np.max(np.abs(a.J_delta - b.J_delta)) <= 1e-6
    assert a.identity_error() <= 1e-9 and b.identity_error() <= 1e-9


def test_path_mean_reports_unconverged_quadrature():
    mdp, approx, d, pi = small_mlp_problem(3, hidden=4)
    w = np.full(approx.param_dim, 3.0)
    ws = -w
    with pytest.raises(QuadratureUnconverged) as info:
        path_mean_jacobians_numeric(approx, mdp, d, pi, pi, w, ws, w, n_quad=2)
    assert info.value.max_change > 1e-6


def test_pointwise_identity_for_mlp():
    mdp, approx, d, pi = small_mlp_problem(4)
    rng = np.random.default_rng(4)
    js = pointwise_jacobians(ExpectationModel(mdp, d, pi, pi), approx, approx.init_params(rng),
                             approx.init_params(rng))
    assert js.identity_error() <= 1e-9


def test_mlp_jacobians_match_finite_differences():
    mdp, approx, d, pi = small_mlp_problem(5)
    rng = np.random.default_rng(5)
    w, wb = approx.init_params(rng), approx.init_params(rng)
    js = pointwise_jacobians(ExpectationModel(mdp, d, pi, pi), approx, w, wb)
    dw = fd_jacobian(lambda x: expected_td_vector(mdp, approx, x, wb, d, pi, pi), w)
    dwb = fd_jacobian(lambda x: expected_td_vector(mdp, approx, w, x, d, pi, pi), wb)
    assert np.max(np.abs(-dw - js.H)) <= 1e-7
    assert np.max(np.abs(dwb - js.J_delta)) <= 1e-7


# regularised Jacobians

def test_regularised_identity_when_mix_is_one():
    H, J = np.diag([1.0, 2.0]), np.array([[0.1, 0.2], [0.3, 0.4]])
    Hr, Jr = regularised_jacobians(H, J, 1.0, 123.0)
    assert np.array_equal(Hr, H) and np.array_equal(Jr, J)


@pytest.mark.parametrize("mix,eta", [(0.3, 2.0), (0.6, 10.0), (-0.5, 0.0), (1.4, 5.0)])
def test_regularised_matches_direct_differentiation_linear(mix, eta):
    mdp, feats, d, pi = on_policy_problem(7)
    mu = Policy.uniform(mdp.n_states, mdp.n_actions)
    approx = LinearApproximator(feats)
    g = gram_matrices(mdp, feats, d, mu, pi)
    reg = Regularisation(True, mix, eta)
    rng = np.random.default_rng(0)
    w, wb = rng.normal(size=feats.dim), rng.normal(size=feats.dim)
    Hr, Jr = regularised_jacobians(g.Phi, g.gamma * g.PhiPrime, mix, eta)
    dw = fd_jacobian(lambda x: regularised_td_vector(mdp, approx, x, wb, d, mu, pi, reg), w, step=1e-3)
    dwb = fd_jacobian(lambda x: regularised_td_vector(mdp, approx, w, x, d, mu, pi, reg), wb, step=1e-3)
    assert np.max(np.abs(-dw - Hr)) <= 1e-8
    assert np.max(np.abs(dwb - Jr)) <= 1e-8


def test_regularised_matches_finite_differences_mlp():
    mdp, approx, d, pi = small_mlp_problem(6)
    model = ExpectationModel(mdp, d, pi, pi)
    w = approx.init_params(np.random.default_rng(6))
    reg = Regularisation(True, 0.4, 3.0)
    js = pointwise_jacobians(model, approx, w, w)
    Hr, Jr = regularised_jacobians(js.H, js.J_delta, reg.mix, reg.eta)

    def delta_reg(a, b):
        return reg.mix * model.expected_td(approx, a, b) + (1 - reg.mix) * (
            model.expected_td(approx, b, a) - reg.eta * (a - b))

    dw = fd_jacobian(lambda x: delta_reg(x, w), w)
    dwb = fd_jacobian(lambda x: delta_reg(w, x), w)
    scale = max(np.abs(Hr).max(), 1.0)
    assert np.max(np.abs(-dw - Hr)) / scale <= 1e-4
    assert np.max(np.abs(dwb - Jr)) / max(np.abs(Jr).max(), 1.0) <= 1e-4


# condition function family

def test_lambda_h_star_examples():
    assert lambda_h_star([1.0, 3.0], 0.1) == 1.0
    assert lambda_h_star([1.0], 0.7) == 1.0
    assert lambda_h_star([1.0, 30.0], 0.1) == 30.0
    assert lambda_h_star([0.0, 2.0], 1.0) == 0.0  # |1 - 0| = |1 - 2|: smaller one wins


def test_condition_function_examples():
    assert condition_function(0.1, 1, 1.0, 1.5, 0.85) == pytest.approx(1.5 + 2 * 0.85, abs=1e-15)
    assert condition_function(0.1, 2, 1.0, 1.5, 0.85) == pytest.approx(2.965, abs=1e-12)
    assert abs(condition_function(0.1, 10 ** 6, 1.0, 1.5, 0.85) - 0.85) <= 1e-12


def test_sigma_k_examples():
    assert sigma_k(0.1, 0, 1.0, 2.0) == 0.0
    assert sigma_k(0.1, 1, 1.0, 2.0) == pytest.approx(0.2, abs=1e-15)
    assert sigma_k(0.1, 10 ** 5, 1.0, 2.0) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(DegenerateEigenvalue):
        sigma_k(0.1, 3, 0.0, 2.0)


def test_min_k_examples():
    assert min_k_for_contraction(0.1, 1.0, 1.5, 0.85) == 28
    assert condition_function(0.1, 28, 1.0, 1.5, 0.85) < 1 <= condition_function(0.1, 27, 1.0, 1.5, 0.85)
    assert min_k_for_contraction(0.1, 1.0, 1.5, 1.0) is None
    assert min_k_for_contraction(0.1, 1.0, 1.5, 1.3) is None
    assert min_k_for_contraction(0.1, 1.0, 0.5, 0.2) == 1


def test_error_bound_curve_examples():
    c, a, s, e0 = 0.4, 0.1, 2.0, 5.0
    assert error_bound_curve(0, c, a, s, e0) == pytest.approx(a * s / (1 - c) + e0 - s / (1 - c))
    assert error_bound_curve(10 ** 4, c, a, s, e0) == pytest.approx(a * s / (1 - c))
    ls = np.arange(20)
    np.testing.assert_allclose(error_bound_curve(ls, c, a, 0.0, e0), np.exp(-ls * (1 - c)) * e0)
    with pytest.raises(ValueError):
        error_bound_curve(1, 1.0, a, s, e0)


def test_fpe_stability_examples():
    c = cycle_gram()
    assert fpe_stability_norm(c.Phi, c.gamma * c.PhiPrime) == pytest.approx(0.9, abs=1e-12)
    c0 = cycle_gram(0.0)
    assert fpe_stability_norm(c0.Phi, c0.gamma * c0.PhiPrime) == 0.0
    s = gram_matrices(selfloop_mdp(1.0, 0.9), SCALAR, D1, ONE, ONE)
    assert fpe_stability_norm(s.Phi, s.gamma * s.PhiPrime) == pytest.approx(0.9, abs=1e-12)
    with pytest.raises(SingularHessian):
        fpe_stability_norm(np.zeros((2, 2)), np.eye(2))


def test_regularised_norm_tends_to_one_for_large_eta(baird):
    mdp, feats, pi, mu, d = baird
    g = gram_matrices(mdp, feats, d, mu, pi, importance_weighting=True)
    from pfpe.spectral import reduce_to_range
    _, red, _ = reduce_to_range(g)
    vals = [regularised_fpe_norm(red.Phi, red.gamma * red.PhiPrime, 0.5, eta) for eta in (1e2, 1e4, 1e6)]
    assert abs(vals[-1] - 1.0) < abs(vals[0] - 1.0) and abs(vals[-1] - 1.0) < 1e-4


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(1e-6, 10), lam=st.floats(1e-3, 50), T=st.floats(0, 10), F=st.floats(0, 5),
       k=st.integers(1, 500))
def test_condition_lower_bound(alpha, lam, T, F, k):
    assert condition_function(alpha, k, lam, T, F) >= F


@settings(max_examples=100, deadline=None)
@given(alpha=st.floats(1e-4, 1), lam=st.floats(1e-3, 1.999), T=st.floats(0, 10), F=st.floats(0, 5))
def test_condition_non_increasing_in_k(alpha, lam, T, F):
    if abs(1 - alpha * lam) >= 1:
        return
    vals = [condition_function(alpha, k, lam, T, F) for k in range(1, 101)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


@settings(max_examples=100, deadline=None)
@given(alpha=st.floats(1e-3, 1.0), lam=st.floats(0.01, 1.5), T=st.floats(0, 3), F=st.floats(0, 0.999))
def test_min_k_bracketing(alpha, lam, T, F):
    if alpha * lam >= 1:
        return
    k = min_k_for_contraction(alpha, lam, T, F)
    assert k is not None
    assert condition_function(alpha, k, lam, T, F) < 1
    if k > 1:
        assert condition_function(alpha, k - 1, lam, T, F) >= 1


# checks

@pytest.mark.parametrize("seed", range(5))
def test_low_shift_passes_on_policy(seed):
    mdp, feats, d, pi = on_policy_problem(seed)
    model = ExpectationModel(mdp, d, pi, pi)
    g = gram_matrices(mdp, feats, d, pi, pi)
    ok, margin = low_distribution_shift_check(g.Phi, second_moment_lookahead(model, feats), mdp.gamma)
    assert ok and margin > 0


def test_low_shift_gamma_zero_and_baird(baird):
    mdp, feats, d, pi = on_policy_problem(3)
    model = ExpectationModel(mdp, d, pi, pi)
    g = gram_matrices(mdp, feats, d, pi, pi)
    ok, margin = low_distribution_shift_check(g.Phi, second_moment_lookahead(model, feats), 0.0)
    assert ok and margin == pytest.approx(eigvalsh(g.Phi)[0], abs=1e-14)
    bm, bf, bpi, bmu, bd = baird
    for iw in (False, True):
        m = ExpectationModel(bm, bd, bmu, bpi, iw)
        gb = gram_matrices(bm, bf, bd, bmu, bpi, iw)
        ok, margin = low_distribution_shift_check(gb.Phi, second_moment_lookahead(m, bf), bm.gamma)
        assert not ok and margin <= 0


def test_nonlinear_bound_linear_case():
    mdp, feats, d, pi = on_policy_problem(9)
    mu = Policy.uniform(mdp.n_states, mdp.n_actions)
    g = gram_matrices(mdp, feats, d, mu, pi)
    J = td_jacobian_linear(g)
    bound = nonlinear_jacobian_bound(LinearApproximator(feats), mdp, d, mu, pi, [np.zeros(feats.dim)])
    assert bound == pytest.approx(eigvalsh(0.5 * (J + J.T))[-1], abs=1e-12)


def test_nonlinear_bound_zero_bellman_error():
    mdp0, approx, d, pi = small_mlp_problem(10)
    mdp = FiniteMdp(mdp0.transition, np.zeros_like(mdp0.reward_mean), mdp0.gamma)
    w = approx.init_params(np.random.default_rng(0))
    w[approx._sl_w2] = 0.0
    w[approx._i_b2] = 0.0
    model = ExpectationModel(mdp, d, pi, pi)
    G = approx.grads_all(w)
    outer = mdp.gamma * G.T @ model.W @ G - G.T @ (model.rho[:, None] * G)
    np.testing.assert_allclose(model.td_jacobian(approx, w), outer, atol=1e-14)
    bound = nonlinear_jacobian_bound(approx, mdp, d, pi, pi, [w])
    assert bound == pytest.approx(eigvalsh(0.5 * (outer + outer.T))[-1], abs=1e-12)


def test_nonlinear_bound_dominates_pointwise_eigenvalues():
    mdp, approx, d, pi = small_mlp_problem(11)
    rng = np.random.default_rng(11)
    samples = [approx.init_params(rng) for _ in range(6)]
    bound = nonlinear_jacobian_bound(approx, mdp, d, pi, pi, samples)
    model = ExpectationModel(mdp, d, pi, pi)
    top = max(np.max(eigvals(pointwise_jacobians(model, approx, w, w).J_TD).real) for w in samples)
    assert bound >= top - 1e-12


# reports

def test_analyze_cycle_all_stable():
    pol = Policy(np.ones((2, 1)))
    rep = analyze(cycle2_mdp(), LinearApproximator(FeatureMap.one_hot(2, 1)), StateDistribution.uniform(2), pol, pol,
                  alpha=0.1, k=10, n_sigma_points=4, n_sigma_samples=200)
    assert rep.verdicts["td_jacobian_stable"] and rep.verdicts["fpe_contracts"] and rep.verdicts["low_shift"]
    assert rep.condition_value >= rep.j_fpe_norm_star
    assert not rep.unavailable


def test_analyze_baird_k1_unstable(baird):
    mdp, feats, pi, mu, d = baird
    rep = analyze(mdp, LinearApproximator(feats), d, mu, pi, 0.01, 1, center=BAIRD_INIT, importance_weighting=True,
                  n_sigma_points=2, n_sigma_samples=100)
    assert rep.condition_value > 1 and not rep.predicted_stable


def test_analyze_baird_k500_predicted_stable(baird):
    mdp, feats, pi, mu, d = baird
    rep = analyze(mdp, LinearApproximator(feats), d, mu, pi, 0.01, 500, center=BAIRD_INIT, importance_weighting=True,
                  n_sigma_points=2, n_sigma_samples=100)
    assert rep.extras["exact_map_spectral_radius"] < 1
    assert rep.predicted_stable


def test_analyze_mlp_fills_fields():
    mdp, approx, d, pi = small_mlp_problem(12, hidden=2)
    center = approx.init_params(np.random.default_rng(0))
    rep = analyze(mdp, approx, d, pi, pi, 0.1, 5, center=center, radius=0.1, n_region=4, n_sigma_points=2,
                  n_sigma_samples=50)
    # 17 parameters against 6 state-action pairs: the Hessian may be singular, which must be reported
    for name in ("lambda_h_star", "j_td_norm_star", "j_fpe_norm_star", "condition_value", "sigma_delta"):
        if name in rep.unavailable:
            assert rep.unavailable[name]
        elif name == "condition_value" and "j_fpe_norm_star" in rep.unavailable:
            assert rep.condition_value == math.inf and not rep.predicted_stable
        else:
            assert math.isfinite(getattr(rep, name))
    assert rep.margins["region_samples"] == 4
    assert rep.condition_value >= rep.j_fpe_norm_star or "j_fpe_norm_star" in rep.unavailable


def test_analyze_records_unavailable_fields():
    # a zero-feature column makes Phi singular with an invariant null space the reduction removes,
    # while a zero discount keeps everything else finite
    feats = FeatureMap(np.array([[1.0, 0.0]]), 1, 1)
    rep = analyze(selfloop_mdp(1.0, 0.9), LinearApproximator(feats), D1, ONE, ONE, 0.1, 3, n_sigma_points=2,
                  n_sigma_samples=10)
    assert rep.conventions.get("coordinates")
    rep2 = analyze_synthetic(0.1, 3, 0.0, 1.0, 0.5, sigma_delta=1.0)
    assert "sigma_k" in rep2.unavailable and rep2.sigma_k is None


def test_report_json_keys():
    rep = analyze_synthetic(0.1, 28, 1.0, 1.5, 0.85)
    import json
    doc = json.loads(rep.to_json())
    for key in ("lambda_h_star", "j_td_norm_star", "j_fpe_norm_star", "condition_value", "sigma_k", "k_min",
                "sigma_delta", "verdicts", "margins", "conventions"):
        assert key in doc
    assert doc["k_min"] == 28 and doc["verdicts"]["pfpe_contracts"] is True


@pytest.mark.parametrize("mix", [0.2, 0.5])
def test_regularised_norm_approaches_stated_limit(baird, mix):
    # stated large-eta limit |sgn(1 - mix) - mix / (1 - mix)|; the trend over the eta grid must close in on it
    mdp, feats, pi, mu, d = baird
    from pfpe.spectral import reduce_to_range
    _, red, _ = reduce_to_range(gram_matrices(mdp, feats, d, mu, pi, importance_weighting=True))
    target = abs(np.sign(1 - mix) - mix / (1 - mix))
    gaps = [abs(regularised_fpe_norm(red.Phi, red.gamma * red.PhiPrime, mix, eta) - target)
            for eta in (10.0, 1e2, 1e3, 1e4)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < 1e-2
