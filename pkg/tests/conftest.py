import numpy as np
import pytest

from mzlq import GameModel, solve_game, three_regime_game


def scalar_model(L=1, steps=100, T=1.0, generator=None, **coeffs):
    """Scalar two-player game (n = m1 = m2 = 1) with everything zero except ``coeffs``.

    Coefficients are given per regime as floats (broadcast to all regimes) or
    length-L sequences.  R11 and R22 default to 1 and -1.
    """
    gen = np.zeros((L, L)) if generator is None else np.asarray(generator, dtype=float)
    base = dict.fromkeys(("A", "B1", "B2", "C", "D1", "D2", "Q", "S1", "S2", "R12", "G"), 0.0)
    base.update(R11=1.0, R22=-1.0)
    base.update(coeffs)
    per = {}
    for name, val in base.items():
        arr = np.broadcast_to(np.asarray(val, dtype=float), (L,))
        per[name] = arr.reshape(L, 1) if name in ("b", "sigma", "q", "rho1", "rho2", "g") else arr.reshape(L, 1, 1)
    return GameModel.time_invariant(gen, T, steps, **per)


def random_generator(rng, L):
    Pi = rng.uniform(0.0, 1.0, (L, L))
    np.fill_diagonal(Pi, 0.0)
    np.fill_diagonal(Pi, -Pi.sum(axis=1))
    return Pi


def random_model(rng, L=2, n=2, m1=1, m2=1, steps=50, T=0.5, scale=0.3, inhomogeneous=False):
    """Seeded random game with comfortably saddle-shaped control weights."""
    def mat(r, c, s=scale):
        return s * rng.standard_normal((L, r, c))

    def spd(k, shift):
        X = mat(k, k)
        return X @ X.transpose(0, 2, 1) + shift * np.eye(k)

    kw = dict(
        A=mat(n, n), B1=mat(n, m1), B2=mat(n, m2), C=mat(n, n), D1=mat(n, m1), D2=mat(n, m2),
        Q=mat(n, n), S1=mat(m1, n), S2=mat(m2, n),
        R11=spd(m1, 3.0), R12=mat(m1, m2), R22=-spd(m2, 3.0),
    )
    Gh = mat(n, n)
    kw["G"] = 0.5 * (Gh + Gh.transpose(0, 2, 1))
    kw["Q"] = 0.5 * (kw["Q"] + kw["Q"].transpose(0, 2, 1))
    if inhomogeneous:
        for name, d in (("b", n), ("sigma", n), ("q", n), ("rho1", m1), ("rho2", m2), ("g", n)):
            kw[name] = scale * rng.standard_normal((L, d))
    return GameModel.time_invariant(random_generator(rng, L), T, steps, **kw)


@pytest.fixture(scope="session")
def six_model():
    return three_regime_game(steps=1000)


@pytest.fixture(scope="session")
def six_solution(six_model):
    return solve_game(six_model, delta_min=0.1)
