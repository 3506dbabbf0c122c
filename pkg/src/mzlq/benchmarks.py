"""Built-in problem instances."""
from __future__ import annotations

import numpy as np

from .model import GameModel

THREE_REGIME_GENERATOR = np.array(
    [
        [-0.5, 0.3, 0.2],
        [0.2, -0.4, 0.2],
        [0.3, 0.2, -0.5],
    ]
)

# columns: A, B1, B2, C, D1, D2, Q, S1, S2, R11, R12, R22, G
_THREE_REGIME_TABLE = np.array(
    [
        [-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -2.0, 10.0, 8.0, -12.0, -1.0],
        [-1.5, -1.0, 0.0, 1.0, -1.0, 0.0, 5.0, 5.0, 0.0, 12.0, -4.0, -15.0, 2.0],
        [-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 14.0, 6.0, -13.0, 0.0],
    ]
)
_COLUMNS = ("A", "B1", "B2", "C", "D1", "D2", "Q", "S1", "S2", "R11", "R12", "R22", "G")

# Control-weight entries N_k(i) as printed alongside the example.  Four of them
# (player 1 regimes 1-2, player 2 regimes 1 and 3) do not match
# D_k' G D_k + R_kk evaluated from the coefficient table; kept only so the
# published hand bound can be reproduced.
PRINTED_CONTROL_WEIGHTS = {
    1: np.array([11.0, 13.0, 14.0]),
    2: np.array([-11.0, -15.0, -12.0]),
}


def three_regime_game(steps: int = 1000, T: float = 1.0) -> GameModel:
    """Scalar two-player game with three regimes on [0, 1], homogeneous data."""
    per_regime = {
        name: _THREE_REGIME_TABLE[:, j].reshape(3, 1, 1) for j, name in enumerate(_COLUMNS)
    }
    return GameModel.time_invariant(THREE_REGIME_GENERATOR, T, steps, **per_regime)


def zero_game(L: int = 1, n: int = 1, m1: int = 1, m2: int = 1, steps: int = 100, T: float = 1.0,
              G=None) -> GameModel:
    """All dynamics and costs zero, control weight ``diag(I, -I)``."""
    gen = np.zeros((L, L))
    z = lambda r, c: np.zeros((L, r, c))  # noqa: E731
    R11 = np.broadcast_to(np.eye(m1), (L, m1, m1))
    R22 = np.broadcast_to(-np.eye(m2), (L, m2, m2))
    return GameModel.time_invariant(
        gen, T, steps,
        A=z(n, n), B1=z(n, m1), B2=z(n, m2), C=z(n, n), D1=z(n, m1), D2=z(n, m2),
        Q=z(n, n), S1=z(m1, n), S2=z(m2, n), R11=R11, R12=z(m1, m2), R22=R22,
        G=z(n, n) if G is None else G,
    )
