import math

import numpy as np
import pytest

from fedcd.graphmask import acyclicity_value, gumbel_sigmoid, logistic_noise
from fedcd.localsolver import (AdamState, AlmState, ClientState, DivergenceError, SolverConfig,
                               adam_step, alm_update, default_rho_beta, deterministic_h,
                               make_adam, outer_loop_should_stop, self_update, solve_local,
                               subproblem_value)
from fedcd.mechanisms import MlpStack, local_score, mlp_init, score_and_gradients
from fedcd.numkit import DimensionError, RngStream


def adam_oracle(x, grads, lr=0.03, b1=0.9, b2=0.999, eps=1e-8):
    # textbook scalar Adam, ascent form
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x + lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_zero_gradient_noop():
    p = np.array([1.0, -2.0])
    adam_step(AdamState(), [p], [np.zeros(2)])
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    # the first step is lr * |g| / (|g| + eps); within 1e-9 of lr once |g| >= 0.3
    for g in (0.3, 1.0, -5.0, 1e3):
        p = np.zeros(1)
        adam_step(AdamState(lr=0.03), [p], [np.array([g])])
        assert abs(abs(p[0]) - 0.03) <= 1e-9
        assert np.sign(p[0]) == np.sign(g)
    p = np.zeros(1)
    adam_step(AdamState(lr=0.03), [p], [np.array([1e-8])])
    assert abs(p[0] - 0.03 * 1e-8 / (1e-8 + 1e-8)) <= 1e-15


def test_adam_matches_oracle():
    p = np.zeros(1)
    st = AdamState(lr=0.03)
    for _ in range(2):
        adam_step(st, [p], [np.ones(1)])
    assert abs(p[0] - adam_oracle(0.0, [1.0, 1.0])) <= 1e-12
    grads = RngStream(0).gaussian(50)
    p = np.zeros(1)
    st = AdamState(lr=0.03)
    for g in grads:
        adam_step(st, [p], [np.array([g])])
    assert abs(p[0] - adam_oracle(0.0, grads)) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])


def test_subproblem_value():
    alm = AlmState(alpha=2.0, rho=4.0)
    assert subproblem_value(-1.0, 0.0, alm) == -1.0
    assert subproblem_value(-1.0, 0.5, alm) == -2.5
    assert subproblem_value(-1.0, 0.5, AlmState(2.0, 5.0)) < -2.5


def test_alm_update_rules():
    cfg = SolverConfig(beta=10.0, gamma=0.25)
    a = alm_update(AlmState(0.3, 6e-3, t=4), 0.0, 1.0, cfg)
    assert (a.alpha, a.rho, a.t) == (0.3, 6e-3, 5)
    a = alm_update(AlmState(0.0, 6e-3), 0.5, 1.0, cfg)
    assert abs(a.rho - 6e-2) < 1e-18 and a.alpha == 6e-3 * 0.5
    a = alm_update(AlmState(0.0, 6e-3), 0.2, 1.0, cfg)
    assert a.rho == 6e-3


def test_stop_rule():
    cfg = SolverConfig()
    assert outer_loop_should_stop(AlmState(0, 1.0, t=1), 1e-12, cfg)
    assert outer_loop_should_stop(AlmState(0, 1.0, t=26), 1.0, cfg)
    assert outer_loop_should_stop(AlmState(0, 1e15, t=2), 1.0, cfg)
    assert not outer_loop_should_stop(AlmState(0, 1.0, t=1), 1.0, cfg)


def test_linear_support_stop():
    cfg = SolverConfig()
    chain = np.array([[0, 0.9, 0.1], [0, 0, -0.5], [0.2, 0, 0]])
    moved = chain * 1.1
    cycle = chain.copy()
    cycle[2, 0] = 0.4
    fresh = AlmState(0, 1.0, t=1)
    later = AlmState(0, 1.0, t=2)
    # a stable acyclic support stops the loop, but never before the first sub-problem
    assert outer_loop_should_stop(later, 1.0, cfg, moved, chain)
    assert not outer_loop_should_stop(fresh, 1.0, cfg, moved, chain)
    assert not outer_loop_should_stop(later, 1.0, cfg, chain, None)
    assert not outer_loop_should_stop(later, 1.0, cfg, cycle, cycle)
    grown = chain.copy()
    grown[0, 2] = 0.6
    assert not outer_loop_should_stop(later, 1.0, cfg, grown, chain)
    from dataclasses import replace
    off = replace(cfg, linear_support_stop=False)
    assert not outer_loop_should_stop(later, 1.0, off, moved, chain)


def test_rho_beta_table_and_interpolation():
    assert default_rho_beta(10, "DS") == (6e-3, 10.0)
    assert default_rho_beta(20, "DS") == (6e-5, 20.0)
    assert default_rho_beta(20, "AS") == (1e-5, 20.0)
    assert default_rho_beta(40, "AS") == (1e-11, 120.0)
    assert default_rho_beta(5, "DS") == (6e-3, 10.0)
    assert default_rho_beta(80, "DS") == (1e-11, 120.0)
    rho, beta = default_rho_beta(15, "DS")
    assert abs(math.log10(rho) - 0.5 * (math.log10(6e-3) + math.log10(6e-5))) < 1e-12
    assert beta == 15.0


def test_solver_config_validation():
    for bad in (SolverConfig(gamma=1.0), SolverConfig(beta=1.0), SolverConfig(it_fl=2000),
                SolverConfig(rho_init=-1.0), SolverConfig(tau=0.0)):
        with pytest.raises(ValueError):
            bad.validate()
    SolverConfig().validate()


def make_client(X, seed=0, cfg=None, linear=False):
    cfg = cfg or SolverConfig()
    d = X.shape[1]
    stream = RngStream(seed).split(0)
    phi = None if linear else mlp_init(d, stream)
    return ClientState(0, X, np.zeros((d, d)), phi, stream, make_adam(cfg), make_adam(cfg))


def two_node_data(n=200, seed=0):
    s = RngStream(seed)
    x1 = s.gaussian(n)
    return np.column_stack([x1, np.sin(2 * x1) + 0.3 * s.gaussian(n)])


def test_self_update_deterministic():
    X = two_node_data()
    cfg = SolverConfig().resolved(2)
    a, b = make_client(X, 3, cfg), make_client(X, 3, cfg)
    alm = AlmState(0.0, cfg.rho_init)
    self_update(a, alm, 25, cfg)
    self_update(b, alm, 25, cfg)
    assert a.U.tobytes() == b.U.tobytes()
    assert a.phi.flat().tobytes() == b.phi.flat().tobytes()


def test_self_update_does_not_touch_data():
    X = two_node_data()
    keep = X.copy()
    cfg = SolverConfig().resolved(2)
    c = make_client(X, 0, cfg)
    self_update(c, AlmState(0.0, cfg.rho_init), 10, cfg)
    assert np.array_equal(c.data, keep)


def test_self_update_zero_gradient_fixed_point():
    d = 3
    X = np.zeros((5, d))
    cfg = SolverConfig(lambda_l1=0.0).resolved(d)
    c = make_client(X, 0, cfg)
    c.phi = MlpStack.zeros_like(c.phi)
    c.U = np.full((d, d), -60.0)     # mask is numerically zero, so h = 0
    before = c.U.copy()
    self_update(c, AlmState(0.0, cfg.rho_init), 20, cfg)
    assert np.max(np.abs(c.U - before)) < 1e-12
    assert all(np.all(p == 0) for p in c.phi.params())


def test_self_update_rejects_zero_steps():
    X = two_node_data()
    cfg = SolverConfig().resolved(2)
    with pytest.raises(ValueError):
        self_update(make_client(X, 0, cfg), AlmState(0.0, 1.0), 0, cfg)


def test_divergence_reports_step():
    X = two_node_data()
    X[3, 1] = np.nan
    cfg = SolverConfig().resolved(2)
    with pytest.raises(DivergenceError) as info:
        self_update(make_client(X, 0, cfg), AlmState(0.0, 1.0), 5, cfg)
    assert info.value.step == 1 and info.value.client_id == 0


def test_sp_gradient_finite_differences():
    # full penalized objective with the noise held fixed, w.r.t. U
    d, tau = 3, 0.5
    cfg = SolverConfig(tau=tau)
    for seed in range(20):
        s = RngStream(seed).split(2)
        X = s.gaussian((6, d))
        phi = mlp_init(d, s, hidden=4)
        U = s.gaussian((d, d))
        noise = logistic_noise(s, d)
        alm = AlmState(alpha=0.7, rho=1.3)

        def sp(U_):
            M = gumbel_sigmoid(U_, tau, noise)
            return subproblem_value(local_score(X, phi, M, cfg.lambda_l1), acyclicity_value(M), alm)

        from fedcd.graphmask import acyclicity_value_and_grad
        M = gumbel_sigmoid(U, tau, noise)
        _, _, gM = score_and_gradients(X, phi, M, cfg.lambda_l1)
        h, gh = acyclicity_value_and_grad(M)
        gU = (gM - (alm.alpha + alm.rho * h) * gh) * M * (1 - M) / tau
        np.fill_diagonal(gU, 0)
        eps = 1e-6
        for i in range(d):
            for j in range(d):
                if i == j:
                    continue
                P, Q = U.copy(), U.copy()
                P[i, j] += eps
                Q[i, j] -= eps
                fd = (sp(P) - sp(Q)) / (2 * eps)
                assert abs(fd - gU[i, j]) <= 1e-4 * max(abs(gU[i, j]), 1e-4)


@pytest.mark.parametrize("seed", range(4))
def test_two_node_sp_settles(seed):
    s = RngStream(seed)
    x1 = s.gaussian(300)
    X = np.column_stack([x1, np.tanh(2 * x1) + 0.1 * s.gaussian(300)])
    cfg = SolverConfig().resolved(2)
    c = make_client(X, 1, cfg)
    alm = AlmState(0.0, cfg.rho_init)
    probe = RngStream(77)
    noises = [logistic_noise(probe, 2) for _ in range(400)]

    def expected_sp():
        # common random numbers: the same noise draws at both checkpoints
        vals = []
        for g in noises:
            M = gumbel_sigmoid(c.U, cfg.tau, g)
            vals.append(subproblem_value(local_score(X, c.phi, M, cfg.lambda_l1),
                                         acyclicity_value(M), alm))
        return np.mean(vals)

    self_update(c, alm, 900, cfg)
    early = expected_sp()
    self_update(c, alm, 100, cfg)
    assert expected_sp() >= early - 1e-3


def test_solve_local_two_nodes_finds_edge():
    X = two_node_data(600, 2)
    cfg = SolverConfig(it_in=300).resolved(2)
    rep = solve_local(make_client(X, 0, cfg), cfg)
    assert rep.adjacency.tolist() == [[0, 1], [0, 0]]
    assert rep.outer_iters == len(rep.h_trace) >= 1
    assert all(b >= a for a, b in zip(rep.alpha_trace, rep.alpha_trace[1:]))
    ratios = [b / a for a, b in zip(rep.rho_trace, rep.rho_trace[1:])]
    assert all(r in (1.0, cfg.beta) for r in ratios)


def test_deterministic_h_linear_uses_squares():
    W = np.array([[0.0, -2.0], [0.5, 0.0]])
    assert deterministic_h(W, True, 0.2) == acyclicity_value(W * W)
