import json
import math

import numpy as np
import pytest

from comigs import convex as cv
from comigs.convex import DecoupledInstance, QuadraticBilevel

HAND = QuadraticBilevel(2 * np.eye(2), [[2.0]], [[1.0, 0.0]])


# ------------------------------------------------------------------ quadratic


def test_hand_instance_operator_and_trajectory():
    np.testing.assert_allclose(cv.quad_operator_T(HAND), [[0.25, 0.0], [0.0, 0.0]], atol=1e-15)
    traj = cv.quad_alternate(HAND, [1.0, 1.0], 5)
    for k, th in enumerate(traj.thetas[1:], start=1):
        assert th[0] == pytest.approx(0.25**k, rel=1e-14)
        assert th[1] == 0.0
    rates = cv.contraction_rate(HAND)
    assert rates.euclidean == pytest.approx(0.25)
    assert rates.eig_bound >= rates.euclidean


def test_zero_coupling_and_fixed_point():
    q = QuadraticBilevel(np.eye(2), np.eye(3), np.zeros((3, 2)))
    np.testing.assert_array_equal(cv.quad_operator_T(q), np.zeros((2, 2)))
    assert cv.contraction_rate(q).euclidean == 0.0
    assert np.all(cv.quad_alternate(HAND, [0.0, 0.0], 10).norms == 0.0)


def test_rejects_non_pd_and_bad_shapes():
    with pytest.raises(ValueError, match="positive definite"):
        QuadraticBilevel(np.eye(1), np.eye(1), [[2.0]])
    with pytest.raises(ValueError):
        QuadraticBilevel(np.eye(2), np.eye(1), np.ones((2, 2)))
    with pytest.raises(ValueError):
        QuadraticBilevel([[1.0, 0.5], [0.0, 1.0]], np.eye(1), np.zeros((1, 2)))


def test_partial_argmins_match_gradient_zero():
    rng = np.random.default_rng(0)
    q = QuadraticBilevel.random(3, 2, rng)
    th = rng.standard_normal(3)
    ph = q.argmin_phi(th)
    np.testing.assert_allclose(q.C @ th + q.B @ ph, 0.0, atol=1e-10)
    th2 = q.argmin_theta(ph)
    np.testing.assert_allclose(q.A @ th2 + q.C.T @ ph, 0.0, atol=1e-10)
    assert q.objective(th2, ph) <= q.objective(th, ph) + 1e-12


def test_random_instances_contract_per_step():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, r = (int(v) for v in rng.integers(1, 9, size=2))
        q = QuadraticBilevel.random(p, r, rng)
        T = cv.quad_operator_T(q)
        norm = cv.power_norm(T)
        assert norm == pytest.approx(np.linalg.norm(T, 2), rel=1e-8, abs=1e-12)
        rates = cv.contraction_rate(q)
        traj = cv.quad_alternate(q, rng.standard_normal(p), 30)
        assert np.all(traj.ratios() <= norm + 1e-9)
        # the map contracts in the A-weighted norm at a rate inside the eigenvalue bound
        assert rates.spectral_radius < 1.0
        assert rates.a_norm <= rates.eig_bound + 1e-12
        a_norms = np.array([math.sqrt(t @ q.A @ t) for t in traj.thetas])
        with np.errstate(invalid="ignore", divide="ignore"):
            a_ratios = np.where(a_norms[:-1] > 1e-300, a_norms[1:] / a_norms[:-1], 0.0)
        assert np.all(a_ratios <= rates.a_norm + 1e-9)


def test_euclidean_norm_of_T_can_exceed_one():
    # badly scaled A: the Euclidean operator norm is not a valid contraction certificate
    q = QuadraticBilevel(np.diag([1.0, 100.0]), np.eye(1), [[0.5, 5.0]])
    rates = cv.contraction_rate(q)
    assert rates.euclidean > 1.0
    assert rates.spectral_radius < 1.0 and rates.a_norm <= rates.eig_bound


# ------------------------------------------------------------------ decoupled objective


def _instance(seed, n=8, d=3, K=3, loss="quadratic", randomize=True, mu_pen=1.0):
    rng = np.random.default_rng(seed)
    inst = DecoupledInstance.random(n, d, K, rng, loss=loss, mu_pen=mu_pen)
    if randomize:
        inst.Theta = rng.standard_normal((d, K))
        inst.Phi = rng.standard_normal((d, K))
        inst.Lam = rng.dirichlet(np.ones(K), size=n).T
    return inst


def _independent_objective(inst):
    total = 0.0
    for i in range(inst.n):
        x, lam = inst.X[i], inst.Lam[:, i]
        t = sum(lam[j] * (inst.Theta[:, j] @ x) for j in range(inst.n_experts))
        loss = 0.5 * (t - inst.targets[i]) ** 2 if inst.loss == "quadratic" else math.log1p(math.exp(-inst.targets[i] * t))
        logits = [inst.Phi[:, j] @ x for j in range(inst.n_experts)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        ent = sum(p * math.log(p) for p in lam if p > 0)
        total += loss + inst.mu_pen * (ent + lse - sum(lam[j] * logits[j] for j in range(inst.n_experts)))
    reg = 0.5 * inst.alpha * (np.sum(inst.Theta**2) + np.sum(inst.Phi**2))
    return total / inst.n + reg


@pytest.mark.parametrize("loss", ["quadratic", "logistic"])
def test_objective_matches_independent_evaluator(loss):
    for seed in range(10):
        inst = _instance(seed, loss=loss)
        assert cv.decoupled_objective(inst) == pytest.approx(_independent_objective(inst), rel=1e-12, abs=1e-12)


def test_objective_at_origin_quadratic_zero_targets():
    inst = _instance(0, randomize=False)
    inst.targets[...] = 0.0
    assert abs(cv.decoupled_objective(inst)) < 1e-15


def test_objective_rejects_off_simplex():
    inst = _instance(1)
    inst.Lam[0, 0] += 1e-6
    with pytest.raises(ValueError):
        cv.decoupled_objective(inst)


def test_single_expert_degeneracy():
    inst = _instance(2, K=1)
    cv.step_lambda(inst)
    np.testing.assert_array_equal(inst.Lam, np.ones((1, inst.n)))
    assert np.all(np.abs(cv.kl_block(inst)) < 1e-15)


def test_kl_identity():
    for seed in range(50):
        for loss in ("quadratic", "logistic"):
            inst = _instance(seed, loss=loss)
            inst.Lam = cv.router_probs(inst)
            assert np.all(np.abs(cv.kl_block(inst)) < 1e-13)
            assert abs(cv.decoupled_objective(inst) - cv.lin_model_objective(inst)) <= 1e-12


def test_shift_invariance_of_router():
    for seed in range(10):
        inst = _instance(seed)
        c = np.random.default_rng(seed).standard_normal((inst.d, 1))
        shifted = inst.Phi + c  # the same vector added to every expert column
        np.testing.assert_allclose(cv.router_probs(inst, shifted), cv.router_probs(inst), atol=1e-14)
        np.testing.assert_allclose(cv.kl_block(inst, shifted), cv.kl_block(inst), atol=1e-12)
        reg = 0.5 * inst.alpha * (np.sum(shifted**2) - np.sum(inst.Phi**2))
        F1 = cv.decoupled_objective(inst, Phi=shifted)
        assert F1 - cv.decoupled_objective(inst) == pytest.approx(reg, abs=1e-10)


# ------------------------------------------------------------------ block steps


def test_lambda_step_closed_form_without_loss():
    inst = _instance(3)
    inst.Theta[...] = 0.0  # l(<lam, 0>) is constant
    cv.step_lambda(inst)
    np.testing.assert_allclose(inst.Lam, cv.router_probs(inst), atol=1e-14)
    eg = inst.copy()
    cv.step_lambda(eg, method="eg")
    np.testing.assert_allclose(eg.Lam, cv.router_probs(inst), atol=1e-9)


def test_lambda_step_root_and_eg_agree():
    for seed in range(10):
        for loss in ("quadratic", "logistic"):
            a = _instance(seed, loss=loss)
            b = a.copy()
            cv.step_lambda(a)
            cv.step_lambda(b, method="eg")
            np.testing.assert_allclose(a.Lam, b.Lam, atol=1e-8)
            assert cv.lambda_residual(a) < 1e-9


def test_lambda_step_large_penalty_limit():
    gaps = []
    for mu in (1.0, 10.0, 100.0, 1000.0):
        inst = _instance(4, mu_pen=mu)
        inst.alpha = 1.0
        cv.step_lambda(inst)
        gaps.append(np.abs(inst.Lam - cv.router_probs(inst)).max())
    assert np.all(np.diff(gaps) < 0) and gaps[-1] < 1e-2


def test_lambda_step_needs_penalty():
    inst = _instance(5, mu_pen=1.0)
    inst.mu_pen = 0.0
    with pytest.raises(ValueError):
        cv.step_lambda(inst)


def test_theta_step_matches_normal_equations_oracle():
    for seed in range(10):
        inst = _instance(seed)
        cv.step_theta(inst)
        # oracle: stacked least squares on the kron design with sqrt(n alpha) ridge rows
        n, d, K = inst.n, inst.d, inst.n_experts
        Z = np.array([np.kron(inst.X[i], inst.Lam[:, i]) for i in range(n)])
        Zs = np.vstack([Z, math.sqrt(n * inst.alpha) * np.eye(d * K)])
        bs = np.concatenate([inst.targets, np.zeros(d * K)])
        oracle, *_ = np.linalg.lstsq(Zs, bs, rcond=None)
        np.testing.assert_allclose(inst.Theta.reshape(-1), oracle, atol=1e-10)


def test_theta_step_logistic_stationary():
    inst = _instance(6, loss="logistic")
    cv.step_theta(inst)
    Z = cv.theta_design(inst)
    t = Z @ inst.Theta.reshape(-1)
    grad = Z.T @ (-inst.targets / (1 + np.exp(inst.targets * t))) / inst.n + inst.alpha * inst.Theta.reshape(-1)
    assert np.linalg.norm(grad) <= 1e-10


def test_phi_step_gradient_and_symmetry():
    inst = _instance(7)
    cv.step_phi(inst)
    P = cv.router_probs(inst)
    grad = inst.mu_pen / inst.n * inst.X.T @ (P - inst.Lam).T + inst.alpha * inst.Phi
    assert np.linalg.norm(grad) <= 1e-10
    sym = _instance(8, randomize=False)
    sym.Phi = np.random.default_rng(0).standard_normal(sym.Phi.shape)
    cv.step_phi(sym)
    for j in range(1, sym.n_experts):
        np.testing.assert_allclose(sym.Phi[:, j], sym.Phi[:, 0], atol=1e-10)


def test_block_steps_need_regularizer():
    inst = _instance(9)
    inst.alpha = 0.0
    with pytest.raises(ValueError):
        cv.step_phi(inst)
    with pytest.raises(ValueError):
        cv.step_theta(inst)


def test_every_block_step_descends():
    for seed in range(5):
        for loss in ("quadratic", "logistic"):
            steps, per_sweep, _ = cv.run_alternation(_instance(seed, loss=loss), 30)
            assert np.all(np.diff(steps) <= 1e-12)
            assert per_sweep.size == 31


# ------------------------------------------------------------------ curvature


def test_alpha_bound_fixed_point():
    for loss in ("quadratic", "logistic"):
        inst = _instance(10, loss=loss, randomize=False)
        a = cv.alpha_bound(inst)
        inst.alpha = a
        assert cv.satisfies_bound(inst)
        inst.alpha = 0.999 * a
        assert not cv.satisfies_bound(inst)
    inst = _instance(11, loss="logistic")
    assert cv.alpha_bound(inst) == pytest.approx(2 * inst.x_norm**2 * max(inst.mu_pen, 1 / inst.mu_pen))


def test_analytic_and_fd_curvature_agree():
    rng = np.random.default_rng(12)
    for loss in ("quadratic", "logistic"):
        inst = _instance(12, loss=loss)
        for _ in range(20):
            p = cv.random_point(inst, rng, floor=0.05)
            z = cv.random_direction(inst, rng)
            assert cv.fd_quadform(inst, p, z) == pytest.approx(cv.hessian_quadform(inst, p, z), rel=1e-5, abs=1e-6)


def test_random_direction_is_tangent():
    rng = np.random.default_rng(13)
    inst = _instance(13)
    for basis in (False, True):
        dT, dP, dL = cv.random_direction(inst, rng, basis=basis)
        np.testing.assert_allclose(dL.sum(axis=0), 0.0, atol=1e-15)
        assert sum(np.sum(a**2) for a in (dT, dP, dL)) == pytest.approx(1.0)


def test_curvature_positive_at_bound():
    rng = np.random.default_rng(14)
    for seed in range(3):
        for loss in ("quadratic", "logistic"):
            inst = _instance(seed, loss=loss, randomize=False)
            rep = cv.strong_convexity_check(inst, 500, rng)
            assert rep.convex and rep.min_curvature > 0


def test_curvature_near_alpha_when_regularizer_dominates():
    inst = _instance(15, randomize=False)
    inst.alpha = 1e6
    rng = np.random.default_rng(15)
    p = cv.random_point(inst, rng, radius=1.0, floor=0.1)
    dT = np.random.default_rng(1).standard_normal(inst.Theta.shape)
    dT /= np.linalg.norm(dT)
    c = cv.hessian_quadform(inst, p, (dT, np.zeros_like(dT), np.zeros_like(inst.Lam)))
    assert c == pytest.approx(1e6, rel=1e-4)


def test_negative_curvature_without_regularizer():
    inst = _instance(16, randomize=False)
    inst.alpha = 0.0
    rep = cv.negative_curvature_search(inst, np.random.default_rng(16))
    assert rep.min_curvature < 0 and not rep.convex


# ------------------------------------------------------------------ rate


def test_verify_linear_rate_cases():
    assert cv.verify_linear_rate([0.0, 0.0, 0.0], 0.5, 1.0, 0.0).holds
    vals = 1.0 + 0.5 ** np.arange(10)
    assert cv.verify_linear_rate(vals, 0.1, 1.0, 1.0).holds
    chk = cv.verify_linear_rate(1.0 + 0.99 ** np.arange(10), 0.5, 1.0, 1.0)
    assert not chk.holds and chk.first_violation == 1
    with pytest.raises(ValueError):
        cv.verify_linear_rate(vals, 2.0, 1.0, 1.0)


def test_certify_example_instance():
    rng = np.random.default_rng(17)
    inst = DecoupledInstance.random(10, 3, 3, rng)
    rep = cv.certify_decoupled(inst, 200, rng, directions=300)
    assert rep["monotone"] and rep["envelope_holds"]
    assert rep["mu_sc"] > 0 and rep["rate"] < 1
    json.dumps(rep)  # report is JSON-ready
    # observed convergence is far faster than the envelope
    assert rep["final_gap"] <= rep["F0"] - rep["F_star"]


def test_certify_quadratic_report():
    rep = cv.certify_quadratic(HAND, [1.0, 1.0], 10)
    assert rep["contracts"] and rep["rate_euclidean"] == pytest.approx(0.25)
    assert rep["max_step_ratio"] <= 0.25 + 1e-12
    json.dumps(rep)
