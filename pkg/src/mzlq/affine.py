"""Inhomogeneous part of the closed-loop solution.

With deterministic ``b, sigma, q, rho, g`` the adjoint offset is a function
``eta(t, alpha(t))`` of time and regime, its Brownian integrand vanishes, and
the backward equation becomes a system of ``L`` coupled linear ODEs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import GameModel, TimeGrid, check_regime
from .riccati import (
    RiccatiSolution,
    _cell_data,
    _inverses,
    assemble_all,
    node_coefficients,
    riccati_map,
    write_csv,
)


@dataclass
class EtaSolution:
    grid: TimeGrid
    eta: np.ndarray  # (K + 1, L, n)

    @property
    def zeta(self) -> np.ndarray:
        return np.zeros_like(self.eta)

    def jumps(self) -> np.ndarray:
        """``z_j(t, i) = eta(t, j) - eta(t, i)``, shape ``(K + 1, L_i, L_j, n)``."""
        return self.eta[:, None, :, :] - self.eta[:, :, None, :]

    def to_csv(self, path: str | Path) -> None:
        K1, L, n = self.eta.shape
        header = ["t"] + [f"eta[{i}][{r}]" for i in range(1, L + 1) for r in range(n)]
        write_csv(path, header, np.concatenate([self.grid.nodes[:, None], self.eta.reshape(K1, -1)], axis=1))


@dataclass
class FeedbackOffset:
    grid: TimeGrid
    rho_tilde: np.ndarray  # (K + 1, L, m)
    nu: np.ndarray  # (K + 1, L, m)
    residual: float  # max |N nu + rho_tilde|

    def to_csv(self, path: str | Path) -> None:
        K1, L, m = self.nu.shape
        header = ["t"]
        header += [f"rho_tilde[{i}][{r}]" for i in range(1, L + 1) for r in range(m)]
        header += [f"nu[{i}][{r}]" for i in range(1, L + 1) for r in range(m)]
        rows = np.concatenate(
            [self.grid.nodes[:, None], self.rho_tilde.reshape(K1, -1), self.nu.reshape(K1, -1)], axis=1
        )
        write_csv(path, header, rows)


def _inhomogeneous(model: GameModel, cell: int):
    return (model.coeff("b", cell), model.coeff("sigma", cell), model.coeff("q", cell),
            model.rho[0 if model.rho.shape[0] == 1 else cell])


def _eta_drift(model: GameModel, cell: int, P: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Minus the time derivative of ``eta(., i)`` for all regimes, shape (L, n)."""
    A, At, C, Ct, Q, B, D, Dt, St, R = _cell_data(model, cell)
    b, sigma, q, rho = _inhomogeneous(model, cell)
    _, Lm, N = assemble_all(model, cell, P)
    gain = Lm @ _inverses(N, model.m1, None)  # L N^-1
    col = lambda v: v[..., None]  # noqa: E731
    out = (At - gain @ B.mT) @ col(eta)
    out += (Ct - gain @ Dt) @ (P @ col(sigma))
    out += -gain @ col(rho) + P @ col(b) + col(q)
    return out[..., 0] + model.generator @ eta


def solve_eta(model: GameModel, riccati: RiccatiSolution) -> EtaSolution:
    """Integrate the offset equations backward from ``eta(T, i) = g(i)`` (RK4).

    Stage values of ``P`` at cell midpoints are cubic Hermite interpolants
    of the stored nodes and their derivatives, which keeps fourth order.
    """
    if not riccati.solved:
        raise ValueError(f"Riccati solution not available: {riccati.status} {riccati.message}")
    grid = riccati.grid
    K, h, nodes = grid.steps, grid.h, grid.nodes
    eta = np.empty((K + 1, model.L, model.n))
    eta[K] = model.g
    if model.homogeneous:
        eta[:] = 0.0
        return EtaSolution(grid, eta)
    for k in range(K - 1, -1, -1):
        cell = model.cell_index(nodes[k + 1] - 0.5 * h)
        P1, P0 = riccati.P[k + 1], riccati.P[k]
        # dP/dt = -F, so the Hermite midpoint is (P0 + P1)/2 + h (F1 - F0)/8
        F0 = riccati_map(model, cell, P0, float(nodes[k]))
        F1 = riccati_map(model, cell, P1, float(nodes[k + 1]))
        Pm = 0.5 * (P0 + P1) + 0.125 * h * (F1 - F0)
        e = eta[k + 1]
        f1 = _eta_drift(model, cell, P1, e)
        f2 = _eta_drift(model, cell, Pm, e + 0.5 * h * f1)
        f3 = _eta_drift(model, cell, Pm, e + 0.5 * h * f2)
        f4 = _eta_drift(model, cell, P0, e + h * f3)
        eta[k] = e + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
    return EtaSolution(grid, eta)


def _rho_tilde(model: GameModel, cell: int, P: np.ndarray, eta: np.ndarray) -> np.ndarray:
    _, _, _, _, _, B, _, Dt, _, _ = _cell_data(model, cell)
    _, sigma, _, rho = _inhomogeneous(model, cell)
    return (B.mT @ eta[..., None] + Dt @ (P @ sigma[..., None]))[..., 0] + rho


def feedback_offset(model: GameModel, riccati: RiccatiSolution, eta: EtaSolution) -> FeedbackOffset:
    """``rho_tilde = B' eta + D' P sigma + rho`` and ``nu = -N^-1 rho_tilde`` at every node."""
    if eta.grid != riccati.grid:
        raise ValueError("eta and Riccati solutions are on different grids")
    nc = node_coefficients(model, riccati)
    K1 = riccati.grid.steps + 1
    rt = np.empty((K1, model.L, model.m))
    for k in range(K1):
        rt[k] = _rho_tilde(model, nc.cells[k], riccati.P[k], eta.eta[k])
    nu = -(nc.Ninv @ rt[..., None])[..., 0]
    residual = float(np.max(np.abs((nc.N @ nu[..., None])[..., 0] + rt))) if rt.size else 0.0
    return FeedbackOffset(riccati.grid, rt, nu, residual)


def regime_probabilities(Pi, i: int, grid: TimeGrid) -> np.ndarray:
    """Forward equation ``p' = p Pi`` from ``p(0) = e_i`` by RK4; shape (K + 1, L)."""
    Pi = np.asarray(Pi, dtype=float)
    L = Pi.shape[0]
    h = grid.h
    p = np.zeros((grid.steps + 1, L))
    p[0, i - 1] = 1.0
    for k in range(grid.steps):
        a = p[k]
        k1 = a @ Pi
        k2 = (a + 0.5 * h * k1) @ Pi
        k3 = (a + 0.5 * h * k2) @ Pi
        k4 = (a + h * k3) @ Pi
        p[k + 1] = a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return p


def _running_value(model: GameModel, cell: int, P: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """``<P sigma, sigma> + 2 <eta, b> - <N^-1 rho~, rho~>`` per regime."""
    b, sigma, _, _ = _inhomogeneous(model, cell)
    _, _, N = assemble_all(model, cell, P)
    rt = _rho_tilde(model, cell, P, eta)
    Ninv = _inverses(N, model.m1, None)
    quad = np.einsum("la,lab,lb->l", sigma, P, sigma)
    lin = 2.0 * np.einsum("la,la->l", eta, b)
    corr = np.einsum("la,lab,lb->l", rt, Ninv, rt)
    return quad + lin - corr


def value(model: GameModel, riccati: RiccatiSolution, eta: EtaSolution, x, i: int) -> float:
    """Closed-loop value ``<P(0,i)x,x> + 2<eta(0,i),x> + int_0^T E[...] dt``.

    The expectation over regimes uses the regime probabilities; the time
    integral is the trapezoid rule per cell.
    """
    idx = check_regime(model, i)
    x = np.asarray(x, dtype=float).reshape(model.n)
    if not riccati.solved:
        raise ValueError(f"Riccati solution not available: {riccati.status} {riccati.message}")
    v = float(x @ riccati.P[0, idx] @ x + 2.0 * eta.eta[0, idx] @ x)
    if model.homogeneous:
        return v
    grid = riccati.grid
    nodes, h = grid.nodes, grid.h
    p = regime_probabilities(model.generator, i, grid)
    total = 0.0
    for k in range(grid.steps):
        cell = model.cell_index(nodes[k + 1] - 0.5 * h)
        left = p[k] @ _running_value(model, cell, riccati.P[k], eta.eta[k])
        right = p[k + 1] @ _running_value(model, cell, riccati.P[k + 1], eta.eta[k + 1])
        total += 0.5 * h * (left + right)
    return v + float(total)
