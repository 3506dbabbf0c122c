"""Coupled Riccati equations with the saddle sign constraints.

The backward integrator is classical RK4 on the uniform grid.  The indefinite
control weight ``N = [[N11, N12], [N21, N22]]`` is always inverted through its
Schur complement, so any loss of ``N11 > 0`` or ``N22 - N21 N11^-1 N12 < 0``
surfaces as :class:`IndefinitenessError` instead of a silently wrong solve.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .model import GameModel, TimeGrid, check_regime

DEFAULT_DELTA_MIN = 1e-6
DEFAULT_P_MAX = 1e6

SOLVED = "solved"
CONSTRAINT_VIOLATED = "constraint_violated"
BLOW_UP = "blow_up"


class IndefinitenessError(ArithmeticError):
    """The control weight lost the sign structure required for a saddle."""

    def __init__(self, message: str, t: float | None = None, regime: int | None = None):
        super().__init__(message)
        self.t = t
        self.regime = regime

    def at(self, t: float | None = None, regime: int | None = None) -> "IndefinitenessError":
        if self.t is None:
            self.t = t
        if self.regime is None:
            self.regime = regime
        return self

    def __str__(self):
        extra = []
        if self.t is not None:
            extra.append(f"t={self.t:.9g}")
        if self.regime is not None:
            extra.append(f"regime {self.regime}")
        base = super().__str__()
        return f"{base} ({', '.join(extra)})" if extra else base


def sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.mT)


@dataclass(frozen=True)
class RiccatiCoefficients:
    M: np.ndarray
    L: np.ndarray
    N: np.ndarray
    m1: int

    @property
    def N11(self):
        return self.N[: self.m1, : self.m1]

    @property
    def N12(self):
        return self.N[: self.m1, self.m1:]

    @property
    def N22(self):
        return self.N[self.m1:, self.m1:]

    @property
    def L1(self):
        return self.L[:, : self.m1]

    @property
    def L2(self):
        return self.L[:, self.m1:]


def _cellwise(model: GameModel, cell: int):
    """``(A, C, Q, B, D, S, R)`` on one cell, all regimes."""
    c = lambda name: model.coeff(name, cell)  # noqa: E731
    pick = lambda arr: arr[0 if arr.shape[0] == 1 else cell]  # noqa: E731
    return c("A"), c("C"), c("Q"), pick(model.B), pick(model.D), pick(model.S), pick(model.R)


def _cell_data(model: GameModel, cell: int):
    cache = model.__dict__.setdefault("_riccati_cells", {})
    key = cell if model.time_varying else 0
    if key not in cache:
        A, C, Q, B, D, S, R = _cellwise(model, cell)
        cache[key] = (A, A.mT.copy(), C, C.mT.copy(), Q, B, D, D.mT.copy(), S.mT.copy(), R)
    return cache[key]


def assemble_all(model: GameModel, cell: int, Pall: np.ndarray):
    """``(M, L, N)`` for every regime on grid cell ``cell``; shapes (L,n,n), (L,n,m), (L,m,m)."""
    A, At, C, Ct, Q, B, D, Dt, St, R = _cell_data(model, cell)
    Pall = np.asarray(Pall, dtype=float)
    if Pall.shape != (model.L, model.n, model.n):
        raise ValueError(f"expected {model.L} matrices of size {model.n}x{model.n}, got {Pall.shape}")
    PA = Pall @ A
    CtP = Ct @ Pall
    coupling = np.tensordot(model.generator, Pall, axes=1)
    M = PA + PA.mT + CtP @ C + Q + coupling
    Lm = Pall @ B + CtP @ D + St
    N = Dt @ Pall @ D + R
    return sym(M), Lm, sym(N)


def assemble(model: GameModel, t: float, i: int, Pall, cell: int | None = None) -> RiccatiCoefficients:
    """Riccati coefficient maps at ``(t, i)`` for the per-regime matrices ``Pall``."""
    idx = check_regime(model, i)
    if cell is None:
        cell = model.cell_index(t)
    M, Lm, N = assemble_all(model, cell, Pall)
    return RiccatiCoefficients(M=M[idx], L=Lm[idx], N=N[idx], m1=model.m1)


def pinv(M, rtol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the SVD.

    Singular values below ``rtol * s_max`` are treated as zero (default
    ``max(p, q) * eps``).  Symmetric input yields an exactly symmetric result.
    """
    M = np.asarray(M, dtype=float)
    p, q = M.shape
    if M.size == 0:
        return np.zeros((q, p))
    if rtol is None:
        rtol = max(p, q) * np.finfo(float).eps
    symmetric = p == q and np.array_equal(M, M.T)
    if symmetric:
        w, V = np.linalg.eigh(M)
        cut = rtol * np.abs(w).max()
        inv_w = np.zeros_like(w)
        keep = np.abs(w) > cut
        inv_w[keep] = 1.0 / w[keep]
        return sym((V * inv_w) @ V.T)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cut = rtol * (s[0] if s.size else 0.0)
    inv_s = np.zeros_like(s)
    keep = s > cut
    inv_s[keep] = 1.0 / s[keep]
    return (Vt.T * inv_s) @ U.T


def range_check(Lmat, N, tol: float = 1e-8) -> tuple[bool, float]:
    """Whether every column of ``Lmat'`` lies in the range of ``N``; returns (ok, residual)."""
    Lmat = np.asarray(Lmat, dtype=float)
    N = np.asarray(N, dtype=float)
    Lt = Lmat.T
    residual = float(np.linalg.norm(N @ pinv(N) @ Lt - Lt))
    return residual <= tol * (1.0 + np.linalg.norm(Lmat)), residual


def _spd_inverse(X: np.ndarray) -> np.ndarray:
    """Inverse of a stack of SPD matrices via Cholesky; LinAlgError if not SPD."""
    Linv = np.linalg.inv(np.linalg.cholesky(X))
    return Linv.mT @ Linv


def _schur_inverse(N: np.ndarray, m1: int) -> np.ndarray:
    """Batched Schur-complement inverse over the leading axes of ``N``."""
    m = N.shape[-1]
    N11, N12, N22 = N[..., :m1, :m1], N[..., :m1, m1:], N[..., m1:, m1:]
    if m1:
        try:
            inv11 = _spd_inverse(N11)
        except np.linalg.LinAlgError:
            lam = np.linalg.eigvalsh(N11)[..., 0]
            raise IndefinitenessError(
                f"N11 is not positive definite (min eigenvalue {lam.min():.3g})"
            ) from None
        K = inv11 @ N12  # N11^-1 N12
    else:
        inv11 = np.zeros(N.shape[:-2] + (0, 0))
        K = np.zeros(N.shape[:-2] + (0, m))
    if m == m1:
        return inv11
    Phi = N22 - N12.mT @ K
    try:
        inv_phi = -_spd_inverse(-Phi)
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(Phi)[..., -1]
        raise IndefinitenessError(
            f"Schur complement is not negative definite (max eigenvalue {lam.max():.3g})"
        ) from None
    Kt = K.mT
    out = np.empty_like(N)
    out[..., :m1, :m1] = inv11 + K @ inv_phi @ Kt
    out[..., :m1, m1:] = -K @ inv_phi
    out[..., m1:, :m1] = -inv_phi @ Kt
    out[..., m1:, m1:] = inv_phi
    return sym(out)


def block_inverse(N, m1: int) -> np.ndarray:
    """Invert a symmetric saddle matrix through its Schur complement.

    Requires ``N11 > 0`` (leading ``m1 x m1`` block) and
    ``Phi = N22 - N21 N11^-1 N12 < 0``; raises IndefinitenessError otherwise.
    """
    N = sym(np.asarray(N, dtype=float))
    if N.ndim != 2 or N.shape[0] != N.shape[1] or not 0 <= m1 <= N.shape[0]:
        raise ValueError(f"expected a square matrix with m1 <= size, got {N.shape}, m1={m1}")
    return _schur_inverse(N, m1)


def _inverses(N: np.ndarray, m1: int, t: float | None) -> np.ndarray:
    try:
        return _schur_inverse(N, m1)
    except IndefinitenessError:
        pass
    for i in range(N.shape[0]):  # locate the offending regime
        try:
            _schur_inverse(N[i], m1)
        except IndefinitenessError as exc:
            raise exc.at(t, i + 1)
    raise AssertionError("unreachable")


def riccati_map(model: GameModel, cell: int, Pall: np.ndarray, t: float | None = None) -> np.ndarray:
    """``M - L N^-1 L'`` for every regime (equals ``-dP/dt``)."""
    M, Lm, N = assemble_all(model, cell, Pall)
    Ninv = _inverses(N, model.m1, t)
    return sym(M - Lm @ Ninv @ Lm.mT)


def cdre_rhs(model: GameModel, t: float, Pall, cell: int | None = None) -> np.ndarray:
    """Time derivative ``dP/dt(t, i)`` for all regimes, shape ``(L, n, n)``."""
    if cell is None:
        cell = model.cell_index(t)
    return -riccati_map(model, cell, np.asarray(Pall, dtype=float), t)


def margins(model: GameModel, cell: int, Pall: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(lambda_min(N11), -lambda_max(N22))`` per regime; ``inf`` for an empty block."""
    _, _, N = assemble_all(model, cell, Pall)
    m1 = model.m1
    inf = np.full(model.L, np.inf)
    d1 = np.linalg.eigvalsh(N[:, :m1, :m1])[:, 0] if m1 else inf
    d2 = -np.linalg.eigvalsh(N[:, m1:, m1:])[:, -1] if model.m2 else inf
    return d1, d2


@dataclass
class RiccatiSolution:
    """Solution of the constrained coupled Riccati equations on a grid."""

    grid: TimeGrid
    P: np.ndarray  # (K + 1, L, n, n); NaN before a failure point
    delta1: np.ndarray  # (K + 1, L)
    delta2: np.ndarray
    status: str = SOLVED
    failure_time: float | None = None
    failure_regime: int | None = None
    message: str = ""
    residual: float = float("nan")
    player: int | None = None
    m1: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == SOLVED

    @property
    def L(self) -> int:
        return self.P.shape[1]

    @property
    def n(self) -> int:
        return self.P.shape[2]

    def min_margins(self) -> tuple[float, float]:
        return float(np.nanmin(self.delta1)), float(np.nanmin(self.delta2))

    def to_csv(self, path: str | Path) -> None:
        L, n = self.L, self.n
        header = ["t"]
        for i in range(1, L + 1):
            header += [f"P[{i}][{r}][{c}]" for r in range(n) for c in range(n)]
        header += [f"delta1[{i}]" for i in range(1, L + 1)]
        header += [f"delta2[{i}]" for i in range(1, L + 1)]
        rows = np.concatenate(
            [self.grid.nodes[:, None], self.P.reshape(self.P.shape[0], -1), self.delta1, self.delta2],
            axis=1,
        )
        write_csv(path, header, rows)

    def summary(self) -> dict:
        d1, d2 = self.min_margins() if not np.all(np.isnan(self.delta1)) else (np.nan, np.nan)
        return {
            "status": self.status,
            "failure_time": self.failure_time,
            "failure_regime": self.failure_regime,
            "message": self.message,
            "min_delta1": d1,
            "min_delta2": d2,
            "residual": self.residual,
        }


def write_csv(path: str | Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(float(v), ".17g") for v in row])


def _integrate(model: GameModel, grid: TimeGrid, delta_min: float, p_max: float) -> RiccatiSolution:
    K, h, nodes = grid.steps, grid.h, grid.nodes
    L, n = model.L, model.n
    P = np.full((K + 1, L, n, n), np.nan)
    d1 = np.full((K + 1, L), np.nan)
    d2 = np.full((K + 1, L), np.nan)
    sol = RiccatiSolution(grid=grid, P=P, delta1=d1, delta2=d2, m1=model.m1)

    def fail(status, k, regime, message):
        sol.status = status
        sol.failure_time = float(nodes[k]) if k is not None else None
        sol.failure_regime = regime
        sol.message = message
        return sol

    def accept(k, Pk) -> bool:
        if not np.all(np.isfinite(Pk)):
            fail(BLOW_UP, k, None, "non-finite solution")
            return False
        norms = np.linalg.norm(Pk, axis=(1, 2))
        if np.any(norms > p_max):
            i = int(np.argmax(norms))
            fail(BLOW_UP, k, i + 1, f"|P| = {norms[i]:.3g} exceeds {p_max:.3g}")
            return False
        P[k] = Pk
        d1[k], d2[k] = margins(model, model.cell_index(nodes[k]), Pk)
        for name, dk in (("N11 lower margin", d1[k]), ("N22 upper margin", d2[k])):
            if np.any(dk < delta_min):
                i = int(np.argmin(dk))
                fail(CONSTRAINT_VIOLATED, k, i + 1, f"{name} {dk[i]:.3g} below {delta_min:.3g}")
                return False
        return True

    if not accept(K, sym(model.G.copy())):
        return sol
    Pk = P[K]
    for k in range(K - 1, -1, -1):
        t1 = nodes[k + 1]
        tm = t1 - 0.5 * h
        cell = model.cell_index(tm)
        try:
            k1 = riccati_map(model, cell, Pk, t1)
            k2 = riccati_map(model, cell, Pk + 0.5 * h * k1, tm)
            k3 = riccati_map(model, cell, Pk + 0.5 * h * k2, tm)
            k4 = riccati_map(model, cell, Pk + h * k3, nodes[k])
        except IndefinitenessError as exc:
            return fail(CONSTRAINT_VIOLATED, k, exc.regime, str(exc))
        with np.errstate(over="ignore", invalid="ignore"):
            Pk = sym(Pk + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if not accept(k, Pk):
            return sol
    return sol


def _integral_residual(model: GameModel, coarse: RiccatiSolution, fine: RiccatiSolution) -> float:
    """max_k |P(t_k) - G - int_{t_k}^T (M - L N^-1 L') ds| with Simpson per cell.

    Midpoint values come from the half-step solution ``fine``.
    """
    grid = coarse.grid
    K, h, nodes = grid.steps, grid.h, grid.nodes
    acc = np.zeros_like(coarse.P[0])
    worst = 0.0
    for k in range(K - 1, -1, -1):
        cell = model.cell_index(nodes[k + 1] - 0.5 * h)
        f0 = riccati_map(model, cell, coarse.P[k])
        fm = riccati_map(model, cell, fine.P[2 * k + 1])
        f1 = riccati_map(model, cell, coarse.P[k + 1])
        acc = acc + (h / 6.0) * (f0 + 4.0 * fm + f1)
        r = coarse.P[k] - model.G - acc
        worst = max(worst, float(np.max(np.linalg.norm(r, axis=(1, 2)))))
    return worst


def solve_cdre(
    model: GameModel,
    grid: TimeGrid | None = None,
    delta_min: float = DEFAULT_DELTA_MIN,
    p_max: float = DEFAULT_P_MAX,
    residual: bool = True,
) -> RiccatiSolution:
    """Integrate the constrained coupled Riccati equations backward from ``P(T) = G``.

    Failure (loss of ``N11 >= delta_min``, ``N22 <= -delta_min`` or
    ``|P| <= p_max``) is reported through ``status``, not raised.
    """
    grid = model.grid if grid is None else grid
    if abs(grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise ValueError("grid horizon does not match the model")
    sol = _integrate(model, grid, delta_min, p_max)
    if sol.solved and residual:
        fine = _integrate(model, grid.refined(2), delta_min, p_max)
        if fine.solved:
            sol.residual = _integral_residual(model, sol, fine)
            sol.extras["half_step_node_diff"] = float(np.max(np.abs(fine.P[::2] - sol.P)))
    return sol


def restrict_to_player(model: GameModel, k: int) -> GameModel:
    """The single-player control problem keeping only player ``k``'s data.

    Player 1's data stays in the first block (``m2 = 0``), player 2's in the
    second (``m1 = 0``), so the sign constraints carry over unchanged.
    """
    if k not in (1, 2):
        raise ValueError("player must be 1 or 2")
    cells_n = lambda arr, r, c: np.zeros(arr.shape[:2] + (r, c))  # noqa: E731
    if k == 1:
        changes = dict(
            m2=0,
            B2=cells_n(model.B2, model.n, 0), D2=cells_n(model.D2, model.n, 0),
            S2=cells_n(model.S2, 0, model.n), R12=cells_n(model.R12, model.m1, 0),
            R22=cells_n(model.R22, 0, 0), rho2=np.zeros(model.rho2.shape[:2] + (0,)),
        )
    else:
        changes = dict(
            m1=0,
            B1=cells_n(model.B1, model.n, 0), D1=cells_n(model.D1, model.n, 0),
            S1=cells_n(model.S1, 0, model.n), R12=cells_n(model.R12, 0, model.m2),
            R11=cells_n(model.R11, 0, 0), rho1=np.zeros(model.rho1.shape[:2] + (0,)),
        )
    return model.replace(**changes)


def solve_single_player(
    model: GameModel,
    k: int,
    grid: TimeGrid | None = None,
    delta_min: float = DEFAULT_DELTA_MIN,
    p_max: float = DEFAULT_P_MAX,
    residual: bool = False,
) -> RiccatiSolution:
    """Riccati equations of player ``k`` alone; enforces ``(-1)^(k+1) N_kk >= delta_min``."""
    sol = solve_cdre(restrict_to_player(model, k), grid, delta_min, p_max, residual=residual)
    sol.player = k
    return sol


@dataclass(frozen=True)
class ComparisonReport:
    lower_margin: float  # min lambda_min(P - P1)
    upper_margin: float  # min lambda_min(P2 - P)
    lower_at: tuple[float, int]
    upper_at: tuple[float, int]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "lower_margin": self.lower_margin,
            "upper_margin": self.upper_margin,
            "lower_at": list(self.lower_at),
            "upper_at": list(self.upper_at),
            "passed": self.passed,
        }


def comparison_check(P: RiccatiSolution, P1: RiccatiSolution, P2: RiccatiSolution,
                     tol: float = 1e-7) -> ComparisonReport:
    """Check ``P1 <= P <= P2`` in the Loewner order at every node and regime."""
    for other in (P1, P2):
        if other.grid != P.grid or other.P.shape != P.P.shape:
            raise ValueError("solutions are on different grids")
    nodes = P.grid.nodes
    low = np.linalg.eigvalsh(sym(P.P - P1.P))[..., 0]
    up = np.linalg.eigvalsh(sym(P2.P - P.P))[..., 0]
    kl, il = np.unravel_index(np.nanargmin(low), low.shape)
    ku, iu = np.unravel_index(np.nanargmin(up), up.shape)
    lo, hi = float(low[kl, il]), float(up[ku, iu])
    return ComparisonReport(
        lower_margin=lo,
        upper_margin=hi,
        lower_at=(float(nodes[kl]), int(il) + 1),
        upper_at=(float(nodes[ku]), int(iu) + 1),
        passed=bool(lo >= -tol and hi >= -tol and not np.isnan(low).any() and not np.isnan(up).any()),
    )


# --- dimension-lifted form ---------------------------------------------------

def cyclic_successor(i: int, j: int, L: int) -> int:
    """0-based regime reached from ``i`` by the ``j``-th cyclic shift."""
    return (i + j) % L


def permutation_blocks(Pi, n: int) -> list[np.ndarray]:
    """Coupling matrices ``T_j`` (j = 1..L-1), each ``(nL, nL)``.

    Block ``(i, i + j mod L)`` of ``T_j`` is ``sqrt(pi_{i, i+j}) I_n``.
    """
    Pi = np.asarray(Pi, dtype=float)
    L = Pi.shape[0]
    out = []
    for j in range(1, L):
        T = np.zeros((n * L, n * L))
        for i in range(L):
            s = cyclic_successor(i, j, L)
            T[i * n:(i + 1) * n, s * n:(s + 1) * n] = np.sqrt(Pi[i, s]) * np.eye(n)
        out.append(T)
    return out


def lift(Pall) -> np.ndarray:
    return sla.block_diag(*np.asarray(Pall, dtype=float))


def unlift(Pbig: np.ndarray, L: int, n: int) -> np.ndarray:
    return np.stack([Pbig[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(L)])


def _is_block_diagonal(X: np.ndarray, L: int, n: int) -> bool:
    mask = np.kron(np.eye(L), np.ones((n, n))) == 0
    return not np.any(X[mask])


def lifted_rhs(model: GameModel, t: float, Pbig, cell: int | None = None) -> np.ndarray:
    """Time derivative of the single ``(nL) x (nL)`` Riccati equation.

    Chain coupling enters only through the diagonal shift ``A + pi_ii I / 2``
    and ``sum_j T_j P T_j'``; the indefinite weight is inverted by a dense solve.
    """
    L, n = model.L, model.n
    Pbig = np.asarray(Pbig, dtype=float)
    if Pbig.shape != (n * L, n * L) or not _is_block_diagonal(Pbig, L, n):
        raise ValueError("lifted state must be block diagonal with L blocks of size n")
    if cell is None:
        cell = model.cell_index(t)
    A, C, Q, B, D, S, R = _cellwise(model, cell)
    Pi = model.generator
    Abig = sla.block_diag(*[A[i] + 0.5 * Pi[i, i] * np.eye(n) for i in range(L)])
    Cbig = sla.block_diag(*C)
    Bbig = sla.block_diag(*B)
    Dbig = sla.block_diag(*D)
    Sbig = sla.block_diag(*S)
    Rbig = sla.block_diag(*R)
    coupling = sum((T @ Pbig @ T.T for T in permutation_blocks(Pi, n)), np.zeros_like(Pbig))
    M = Pbig @ Abig + Abig.T @ Pbig + Cbig.T @ Pbig @ Cbig + sla.block_diag(*Q) + coupling
    Lm = Pbig @ Bbig + Cbig.T @ Pbig @ Dbig + Sbig.T
    N = Dbig.T @ Pbig @ Dbig + Rbig
    return -sym(M - Lm @ np.linalg.solve(N, Lm.T))


# --- node-wise quantities shared by the feedback constructions ---------------

@dataclass(frozen=True)
class NodeCoefficients:
    """``L``, ``N`` and ``N^-1`` at every grid node, shapes (K+1, L, ...)."""

    Lm: np.ndarray
    N: np.ndarray
    Ninv: np.ndarray
    cells: np.ndarray


def node_coefficients(model: GameModel, sol: RiccatiSolution) -> NodeCoefficients:
    if not sol.solved:
        raise ValueError(f"Riccati solution not available: {sol.status} {sol.message}")
    nodes = sol.grid.nodes
    K1 = nodes.size
    L, n, m = model.L, model.n, model.m
    Lm = np.empty((K1, L, n, m))
    N = np.empty((K1, L, m, m))
    Ninv = np.empty((K1, L, m, m))
    cells = np.array([model.cell_index(t) for t in nodes])
    for k in range(K1):
        _, Lm[k], N[k] = assemble_all(model, cells[k], sol.P[k])
        Ninv[k] = _inverses(N[k], model.m1, float(nodes[k]))
    return NodeCoefficients(Lm=Lm, N=N, Ninv=Ninv, cells=cells)
