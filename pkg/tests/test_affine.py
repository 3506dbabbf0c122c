import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from mzlq import three_regime_game
from mzlq.affine import feedback_offset, regime_probabilities, solve_eta, value
from mzlq.benchmarks import zero_game
from mzlq.model import validate
from mzlq.game import build_strategy, solve_game
from mzlq.riccati import solve_cdre
from mzlq.sim import mc_estimate

from conftest import random_model

INHOMOGENEOUS = dict(
    b=np.array([[0.3], [-0.2], [0.1]]),
    sigma=np.array([[0.2], [0.4], [-0.3]]),
    q=np.array([[1.0], [-0.5], [0.25]]),
    rho1=np.array([[0.5], [-1.0], [0.3]]),
    rho2=np.array([[-0.4], [0.2], [0.7]]),
    g=np.array([[0.1], [-0.3], [0.2]]),
)


def six_inhomogeneous(steps=400, scale=1.0):
    m = three_regime_game(steps=steps)
    # vector data carry a leading cell axis, except the per-regime terminal g
    return m.replace(**{k: scale * (v if k == "g" else v[None]) for k, v in INHOMOGENEOUS.items()})


def scalar_joint_oracle(model, t_eval):
    """(P, eta) for a scalar game by direct transcription of the coupled ODEs."""
    c = {k: np.asarray(getattr(model, k))[0, :, ...] for k in
         ("A", "B1", "B2", "C", "D1", "D2", "Q", "S1", "S2", "R11", "R12", "R22")}
    v = {k: np.asarray(getattr(model, k))[0, :, 0] for k in ("b", "sigma", "q", "rho1", "rho2")}
    v["g"] = model.g[:, 0]
    Pi, L = model.generator, model.L

    def rhs(t, y):
        P, eta = y[:L], y[L:]
        dP, deta = np.empty(L), np.empty(L)
        for i in range(L):
            A, C, Q = c["A"][i, 0, 0], c["C"][i, 0, 0], c["Q"][i, 0, 0]
            B = np.array([c["B1"][i, 0, 0], c["B2"][i, 0, 0]])
            D = np.array([c["D1"][i, 0, 0], c["D2"][i, 0, 0]])
            S = np.array([c["S1"][i, 0, 0], c["S2"][i, 0, 0]])
            R = np.array([[c["R11"][i, 0, 0], c["R12"][i, 0, 0]], [c["R12"][i, 0, 0], c["R22"][i, 0, 0]]])
            rho = np.array([v["rho1"][i], v["rho2"][i]])
            p = P[i]
            M = 2 * A * p + C * C * p + Q + Pi[i] @ P
            Lr = p * B + C * p * D + S
            N = p * np.outer(D, D) + R
            K = np.linalg.solve(N, Lr)  # N^-1 L' (N symmetric)
            dP[i] = -(M - Lr @ K)
            deta[i] = -((A - K @ B) * eta[i] + (C - K @ D) * p * v["sigma"][i] - K @ rho
                        + p * v["b"][i] + v["q"][i] + Pi[i] @ eta)
        return np.concatenate([dP, deta])

    y_T = np.concatenate([model.G[:, 0, 0], v["g"]])
    out = solve_ivp(rhs, (model.T, 0.0), y_T, method="DOP853", rtol=1e-12, atol=1e-13, t_eval=t_eval[::-1])
    return out.y[:L, ::-1].T, out.y[L:, ::-1].T


def test_eta_terminal_condition_and_oracle():
    m = six_inhomogeneous()
    assert validate(m) == []
    ric = solve_cdre(m, delta_min=0.1)
    eta = solve_eta(m, ric)
    assert np.array_equal(eta.eta[-1], m.g)
    P_ref, eta_ref = scalar_joint_oracle(m, ric.grid.nodes)
    assert np.abs(ric.P[:, :, 0, 0] - P_ref).max() < 1e-9
    assert np.abs(eta.eta[:, :, 0] - eta_ref).max() < 1e-10


def test_eta_converges_at_fourth_order():
    errs = []
    for K in (50, 100, 200):
        m = six_inhomogeneous(steps=K)
        ric = solve_cdre(m, delta_min=0.1, residual=False)
        _, eta_ref = scalar_joint_oracle(m, ric.grid.nodes)
        errs.append(np.abs(solve_eta(m, ric).eta[:, :, 0] - eta_ref).max())
    order = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(order >= 3.5), (errs, order)


def test_eta_matches_matrix_exponential():
    # S = Q = G = 0 keeps P identically zero, so eta solves a constant-coefficient linear system
    rng = np.random.default_rng(4)
    base = random_model(rng, L=2, n=2, m1=1, m2=1, steps=200, T=1.0, inhomogeneous=True)
    z = np.zeros_like
    m = base.replace(Q=z(base.Q), S1=z(base.S1), S2=z(base.S2), G=z(base.G))
    ric = solve_cdre(m)
    assert not np.any(ric.P)
    eta = solve_eta(m, ric)
    A, q, g, Pi = m.A[0], m.q[0], m.g, m.generator
    L, n = 2, 2
    big = np.kron(Pi, np.eye(n)) + np.block([[A[0].T, np.zeros((n, n))], [np.zeros((n, n)), A[1].T]])
    aug = np.zeros((2 * n + 1, 2 * n + 1))
    aug[:-1, :-1], aug[:-1, -1] = big, q.reshape(-1)
    for k in (0, 57, 200):
        s = m.T - ric.grid.nodes[k]
        y = expm(aug * s) @ np.append(g.reshape(-1), 1.0)
        assert eta.eta[k].reshape(-1) == pytest.approx(y[:-1], abs=1e-10)


def test_eta_q_only_is_linear_in_time():
    m = zero_game(L=1, n=1, steps=50, T=2.0).replace(q=np.array([[[3.0]]]))
    eta = solve_eta(m, solve_cdre(m))
    assert eta.eta[:, 0, 0] == pytest.approx(3.0 * (2.0 - eta.grid.nodes), abs=1e-13)


def test_eta_is_linear_in_inhomogeneous_data():
    one, two = six_inhomogeneous(scale=1.0), six_inhomogeneous(scale=2.0)
    ric = solve_cdre(one, delta_min=0.1)
    e1, e2 = solve_eta(one, ric), solve_eta(two, ric)
    assert e2.eta == pytest.approx(2.0 * e1.eta, rel=1e-12, abs=1e-14)
    assert np.array_equal(e1.zeta, np.zeros_like(e1.eta))
    assert e1.jumps()[5, 0, 1] == pytest.approx(e1.eta[5, 1] - e1.eta[5, 0])


def test_homogeneous_offsets_vanish(six_solution):
    assert not np.any(six_solution.eta.eta)
    assert not np.any(six_solution.offset.nu)


def test_rho_only_offset_is_static_response():
    rho1, rho2 = 0.7, -0.3
    m = zero_game(L=1, m1=1, m2=1, steps=20).replace(
        R11=np.full((1, 1, 1, 1), 2.0), R22=np.full((1, 1, 1, 1), -4.0),
        rho1=np.full((1, 1, 1), rho1), rho2=np.full((1, 1, 1), rho2))
    ric = solve_cdre(m)
    eta = solve_eta(m, ric)
    off = feedback_offset(m, ric, eta)
    assert not np.any(eta.eta)
    assert off.nu[:, 0] == pytest.approx(np.broadcast_to([-rho1 / 2.0, -rho2 / -4.0], off.nu[:, 0].shape))


def test_sigma_only_offset_residual():
    m = three_regime_game(steps=200).replace(sigma=np.array([[[0.5], [1.0], [-0.7]]]))
    ric = solve_cdre(m, delta_min=0.1)
    off = feedback_offset(m, ric, solve_eta(m, ric))
    assert off.residual <= 1e-9
    assert np.any(off.nu)


def test_offset_rejects_grid_mismatch():
    m = six_inhomogeneous(steps=100)
    ric = solve_cdre(m, delta_min=0.1)
    other = solve_cdre(six_inhomogeneous(steps=50), delta_min=0.1)
    with pytest.raises(ValueError):
        feedback_offset(m, ric, solve_eta(m, other))


def test_regime_probabilities_match_expm():
    m = three_regime_game(steps=100)
    p = regime_probabilities(m.generator, 2, m.grid)
    assert p[-1] == pytest.approx(expm(m.generator)[1], abs=1e-10)
    assert p.sum(axis=1) == pytest.approx(np.ones(101), abs=1e-13)


def test_homogeneous_value_is_quadratic(six_solution):
    P0 = six_solution.riccati.P[0]
    for i in (1, 2, 3):
        assert six_solution.value(2.0, i) == pytest.approx(4.0 * P0[i - 1, 0, 0], abs=1e-14)


def test_value_matches_monte_carlo():
    m = six_inhomogeneous(steps=400)
    sol = solve_game(m, delta_min=0.1)
    v = sol.value(0.5, 2)
    est = mc_estimate(m, sol.strategy, 0.5, 2, n_paths=20_000, seed=3)
    # Euler bias at h = 1/400 is well below the Monte-Carlo error here
    assert abs(est.mean - v) <= 3 * est.se + 5e-3
