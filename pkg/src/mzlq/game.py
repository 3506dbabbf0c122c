"""Closed-loop saddle strategies and their verification.

Covers the feedback construction from the Riccati and offset solutions,
realized costs, Monte-Carlo saddle probes with common random numbers, the
stationarity residual along simulated paths, and a sufficient certificate
for uniform convexity-concavity built from coefficient bounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .affine import EtaSolution, FeedbackOffset, feedback_offset, solve_eta, value
from .chain import ChainPath
from .model import GameModel, TimeGrid, check_regime
from .riccati import (
    DEFAULT_DELTA_MIN,
    DEFAULT_P_MAX,
    ComparisonReport,
    RiccatiSolution,
    assemble_all,
    comparison_check,
    node_coefficients,
    solve_cdre,
    solve_single_player,
    write_csv,
)
from .sim import CHUNK, ControlLaw, McEstimate, NoisePath, run_chunks, simulate, simulate_deviations, summarize


def _player_slice(m1: int, m: int, k: int) -> slice:
    if k == 1:
        return slice(0, m1)
    if k == 2:
        return slice(m1, m)
    raise ValueError(f"player must be 1 or 2, got {k}")


@dataclass
class FeedbackStrategy:
    """Closed-loop strategy ``u = Theta(t, alpha) X + nu(t, alpha)`` at the grid nodes."""

    grid: TimeGrid
    theta: np.ndarray  # (K + 1, L, m, n)
    nu: np.ndarray  # (K + 1, L, m)
    m1: int
    gain_residual: float = 0.0  # max |N Theta + L'|
    offset_residual: float = 0.0  # max |N nu + rho_tilde|

    @property
    def m(self) -> int:
        return self.theta.shape[2]

    def player_slice(self, k: int) -> slice:
        return _player_slice(self.m1, self.m, k)

    @property
    def theta1(self) -> np.ndarray:
        return self.theta[:, :, : self.m1]

    @property
    def theta2(self) -> np.ndarray:
        return self.theta[:, :, self.m1:]

    def shifted(self, player: int = 1, gain=0.0, offset=0.0) -> "FeedbackStrategy":
        """Copy with ``gain`` added to one player's Theta and ``offset`` to its nu."""
        rows = self.player_slice(player)
        theta, nu = self.theta.copy(), self.nu.copy()
        theta[:, :, rows] += gain
        nu[:, :, rows] += offset
        return FeedbackStrategy(self.grid, theta, nu, self.m1, float("nan"), float("nan"))

    def to_csv(self, path: str | Path) -> None:
        K1, L, m, n = self.theta.shape
        header = ["t"]
        header += [f"Theta[{i}][{r}][{c}]" for i in range(1, L + 1) for r in range(m) for c in range(n)]
        header += [f"nu[{i}][{r}]" for i in range(1, L + 1) for r in range(m)]
        rows = np.concatenate(
            [self.grid.nodes[:, None], self.theta.reshape(K1, -1), self.nu.reshape(K1, -1)], axis=1
        )
        write_csv(path, header, rows)


def build_strategy(model: GameModel, riccati: RiccatiSolution, offset: FeedbackOffset | None = None
                   ) -> FeedbackStrategy:
    """``Theta = -N^-1 L'`` node by node (Schur block inverse); ``nu`` from ``offset``."""
    nc = node_coefficients(model, riccati)
    theta = -(nc.Ninv @ nc.Lm.mT)
    gain_res = float(np.max(np.abs(nc.N @ theta + nc.Lm.mT))) if theta.size else 0.0
    if offset is None:
        nu = np.zeros(theta.shape[:3])
        off_res = 0.0
    else:
        nu, off_res = offset.nu.copy(), offset.residual
    return FeedbackStrategy(riccati.grid, theta, nu, model.m1, gain_res, off_res)


def cost(model: GameModel, path: ChainPath, noise: NoisePath, control, x, i: int) -> float:
    """Realized cost of one path (left-endpoint running cost plus terminal term).

    ``control`` is a FeedbackStrategy, a ControlLaw or an explicit ``(K, m)`` array.
    """
    if not isinstance(control, (FeedbackStrategy, ControlLaw)):
        control = ControlLaw.open_loop(control)
    return simulate(model, control, path, noise, x, i).cost


# --- saddle probe ------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """Deviation ``du = gain X + offset`` for one player (piecewise constant in time)."""

    player: int
    offset: np.ndarray  # (K, m_k)
    gain: np.ndarray  # (m_k, n)
    kind: str = "offset"

    def scaled(self, s: float) -> "Perturbation":
        return Perturbation(self.player, s * self.offset, s * self.gain, self.kind)

    def embedded(self, model: GameModel) -> tuple[np.ndarray, np.ndarray]:
        """Offset ``(K, m)`` and gain ``(m, n)`` padded with zeros for the other player."""
        rows = _player_slice(model.m1, model.m, self.player)
        offset = np.zeros((model.steps, model.m))
        gain = np.zeros((model.m, model.n))
        offset[:, rows] = self.offset
        gain[rows] = self.gain
        return offset, gain

    def law(self, model: GameModel, u_star: np.ndarray) -> ControlLaw:
        """Control law for ``u* + du`` given the recorded center controls ``u_star`` (P, K, m)."""
        K = model.steps
        rows = _player_slice(model.m1, model.m, self.player)
        explicit = u_star.copy()
        explicit[..., rows] += self.offset
        gain = None
        if np.any(self.gain):
            gain = np.zeros((K + 1, model.L, model.m, model.n))
            gain[:, :, rows] = self.gain
        return ControlLaw(gain=gain, explicit=explicit)

    def to_dict(self) -> dict:
        return {
            "player": self.player,
            "kind": self.kind,
            "offset_rms": float(np.sqrt(np.mean(self.offset ** 2))) if self.offset.size else 0.0,
            "gain": self.gain.tolist(),
        }


def random_perturbations(model: GameModel, per_player: int = 8, seed: int = 0, scale: float = 0.5,
                         blocks: int = 4) -> list[Perturbation]:
    """Seeded antithetic perturbations, ``per_player`` for each player with controls.

    Pairs alternate between open-loop offsets (constant on ``blocks`` equal
    time blocks) and feedback gains on the deviating state.
    """
    if per_player % 2:
        raise ValueError("per_player must be even (perturbations come in +/- pairs)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5AD]))
    K, n = model.steps, model.n
    block_of = np.minimum(np.arange(K) * blocks // K, blocks - 1)
    out = []
    for k, mk in ((1, model.m1), (2, model.m2)):
        if mk == 0:
            continue
        for pair in range(per_player // 2):
            if pair % 2 == 0:
                levels = rng.normal(0.0, scale, (blocks, mk))
                base = Perturbation(k, levels[block_of], np.zeros((mk, n)), "offset")
            else:
                z = rng.normal(size=(mk, n))
                z *= scale * rng.uniform(0.5, 1.0) / np.linalg.norm(z)
                base = Perturbation(k, np.zeros((K, mk)), z, "gain")
            out += [base, base.scaled(-1.0)]
    return out


@dataclass(frozen=True)
class ArmResult:
    perturbation: Perturbation
    estimate: McEstimate
    diff_mean: float  # arm minus center, paired
    diff_se: float
    passed: bool

    def to_dict(self) -> dict:
        d = self.perturbation.to_dict()
        d.update(
            mean=self.estimate.mean, se=self.estimate.se,
            diff_mean=self.diff_mean, diff_se=self.diff_se, passed=self.passed,
        )
        return d


@dataclass
class SaddleReport:
    center: McEstimate
    arms: list[ArmResult]
    value: float | None = None
    n_sigma: float = 3.0

    @property
    def inequalities_pass(self) -> bool:
        return all(a.passed for a in self.arms)

    @property
    def value_agrees(self) -> bool | None:
        if self.value is None:
            return None
        return bool(abs(self.center.mean - self.value) <= self.n_sigma * self.center.se)

    @property
    def passed(self) -> bool:
        return self.inequalities_pass and self.value_agrees is not False

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "inequalities_pass": self.inequalities_pass,
            "value": self.value,
            "value_agrees": self.value_agrees,
            "n_sigma": self.n_sigma,
            "center": self.center.to_dict(),
            "arms": [a.to_dict() for a in self.arms],
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def probe_costs(model: GameModel, strategy: FeedbackStrategy, x, i: int, n_paths: int, seed: int,
                perturbations: Sequence[Perturbation], workers: int = 1, chunk: int = CHUNK) -> np.ndarray:
    """Costs of the center and every perturbed arm on common paths, shape ``(1 + P, n_paths)``.

    The center plays the feedback strategy; its realized controls ``u*`` are
    recorded and every arm replays them as open-loop controls with one
    player's deviation added.
    """
    center = ControlLaw.feedback(strategy)
    embedded = [p.embedded(model) for p in perturbations]
    offsets = np.array([e[0] for e in embedded]).reshape(len(embedded), model.steps, model.m)
    gains = np.array([e[1] for e in embedded]).reshape(len(embedded), model.m, model.n)

    def fn(batch):
        return simulate_deviations(model, center, offsets, gains, batch.regimes, batch.final_regime, batch.dW, x)

    return run_chunks(fn, model, i, n_paths, seed, workers, chunk)


def saddle_probe(model: GameModel, strategy: FeedbackStrategy, x, i: int, n_paths: int, seed: int,
                 perturbations: int | Sequence[Perturbation] = 8, workers: int = 1, value_ref: float | None = None,
                 n_sigma: float = 3.0, chunk: int = CHUNK) -> SaddleReport:
    """Monte-Carlo check of the saddle inequalities at ``(x, i)``.

    Player 1 passes an arm when ``J(u1* + du1, u2*) >= J(u*) - n_sigma SE``,
    player 2 when ``J(u1*, u2* + du2) <= J(u*) + n_sigma SE``; SE is the
    standard error of the paired difference.
    """
    check_regime(model, i)
    if isinstance(perturbations, int):
        perturbations = random_perturbations(model, perturbations, seed)
    costs = probe_costs(model, strategy, x, i, n_paths, seed, perturbations, workers, chunk)
    center = summarize(costs[0])
    arms = []
    for p, row in zip(perturbations, costs[1:]):
        d = summarize(row - costs[0])
        tol = n_sigma * d.se
        ok = d.mean >= -tol if p.player == 1 else d.mean <= tol
        arms.append(ArmResult(p, summarize(row), d.mean, d.se, bool(ok)))
    return SaddleReport(center, arms, value_ref, n_sigma)


# --- stationarity residual ---------------------------------------------------

def fbsde_residual(model: GameModel, riccati: RiccatiSolution, eta: EtaSolution, strategy: FeedbackStrategy,
                   path: ChainPath, noise: NoisePath, x, i: int, return_trajectory: bool = False):
    """max over nodes of ``|B'Y + D'Z + S X + R u + rho|`` along the closed-loop path.

    ``Y = P X + eta`` and ``Z = P (C X + D u + sigma)`` are rebuilt from the
    decoupling field; the Brownian part of the offset vanishes.
    """
    traj = simulate(model, strategy, path, noise, x, i)
    nodes = riccati.grid.nodes
    worst = 0.0
    for k, t in enumerate(nodes):
        cell = model.cell_index(t)
        pick = lambda arr: arr[0 if arr.shape[0] == 1 else cell, traj.regime[k] - 1]  # noqa: E731
        B, D, C, S, R = pick(model.B), pick(model.D), pick(model.C), pick(model.S), pick(model.R)
        sigma, rho = pick(model.sigma), pick(model.rho)
        reg = traj.regime[k] - 1
        P = riccati.P[k, reg]
        X, u = traj.X[k], traj.u[k]
        Y = P @ X + eta.eta[k, reg]
        Z = P @ (C @ X + D @ u + sigma)
        r = B.T @ Y + D.T @ Z + S @ X + R @ u + rho
        worst = max(worst, float(np.linalg.norm(r)))
    return (worst, traj) if return_trajectory else worst


# --- uniform convexity-concavity certificate ---------------------------------

@dataclass(frozen=True)
class PlayerBound:
    c: float  # max lambda_max of the control-to-state growth matrix
    gamma: float  # Gronwall growth factor
    mu: float  # worst curvature of the state part after the Young split
    n: float  # worst control weight margin
    lam: float  # certified constant n - max(0, -mu) gamma

    @property
    def certified(self) -> bool:
        return bool(np.isfinite(self.lam) and self.lam > 0)

    def to_dict(self) -> dict:
        return {"c": self.c, "gamma": self.gamma, "mu": self.mu, "n": self.n, "lambda": self.lam,
                "certified": self.certified}


@dataclass
class UccCertificate:
    a: float
    players: dict[int, PlayerBound]
    young_weight: float
    tables: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return all(p.certified for p in self.players.values())

    @property
    def constant(self) -> float:
        return min(p.lam for p in self.players.values())

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "constant": self.constant,
            "a": self.a,
            "young_weight": self.young_weight,
            "players": {str(k): p.to_dict() for k, p in self.players.items()},
            "tables": {name: arr.tolist() for name, arr in self.tables.items()},
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _lmin(X: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(X))) if X.shape[-1] else np.inf


def _lmax(X: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvalsh(X))) if X.shape[-1] else -np.inf


def certificate_tables(model: GameModel) -> dict[str, np.ndarray]:
    """G-based coefficient tables over all cells, each with leading axes ``(cells, L)``."""
    n, m1 = model.n, model.m1
    cells = model.cells
    eye = np.eye(n)
    out: dict[str, list] = {k: [] for k in ("calA", "calB1", "calB2", "calM", "calL1", "calL2", "calN1", "calN2")}
    for cell in range(cells):
        A, C = model.coeff("A", cell), model.coeff("C", cell)
        out["calA"].append(A + A.mT + C.mT @ C + eye)
        for k, (B, D) in ((1, (model.coeff("B1", cell), model.coeff("D1", cell))),
                          (2, (model.coeff("B2", cell), model.coeff("D2", cell)))):
            E = B + C.mT @ D
            out[f"calB{k}"].append(E.mT @ E + D.mT @ D)
        M, Lm, N = assemble_all(model, cell, model.G)
        out["calM"].append(M)
        out["calL1"].append(Lm[..., :m1])
        out["calL2"].append(Lm[..., m1:])
        out["calN1"].append(N[:, :m1, :m1])
        out["calN2"].append(N[:, m1:, m1:])
    return {k: np.array(v) for k, v in out.items()}


def ucc_certificate(model: GameModel, growth_rate: float | None = None, young_weight: float = 1.0,
                    control_weights: dict | None = None) -> UccCertificate:
    """Sufficient certificate for uniform convexity in ``u1`` and concavity in ``u2``.

    Player ``k``'s constant is ``n_k - max(0, -mu_k) gamma_k`` with
    ``gamma_k = c_k (e^{aT} - 1) / a``.  ``growth_rate`` replaces the computed
    ``a`` (any upper bound is valid); ``control_weights`` replaces the
    ``N_k`` tables, per player, with arrays of shape ``(L,)`` or
    ``(L, m_k, m_k)``.  A negative verdict proves nothing.

    The Young split only absorbs the cross term ``2 <L_k' X, u_k>``; when
    ``L_k`` vanishes identically it is skipped for that player.
    """
    if not young_weight > 0:
        raise ValueError("young_weight must be positive")
    tab = certificate_tables(model)
    if control_weights:
        for k, arr in control_weights.items():
            mk = model.m1 if k == 1 else model.m2
            arr = np.asarray(arr, dtype=float).reshape(model.L, mk, mk)
            tab[f"calN{k}"] = np.broadcast_to(arr, tab[f"calN{k}"].shape).copy()
    a = _lmax(tab["calA"]) if growth_rate is None else float(growth_rate)
    T = model.T
    growth = T if a == 0 else float(np.expm1(a * T) / a)
    players = {}
    for k, mk in ((1, model.m1), (2, model.m2)):
        sign = 1.0 if k == 1 else -1.0
        Lk = tab[f"calL{k}"]
        split = bool(np.any(Lk))
        c = _lmax(tab[f"calB{k}"]) if mk else 0.0
        mu = _lmin(sign * tab["calM"] - (Lk @ Lk.mT / young_weight if split else 0.0))
        eps = young_weight if split else 0.0
        nk = _lmin(sign * tab[f"calN{k}"] - eps * np.eye(mk)) if mk else np.inf
        gamma = c * growth
        lam = nk - max(0.0, -mu) * gamma
        players[k] = PlayerBound(c=c, gamma=gamma, mu=mu, n=nk, lam=lam)
    return UccCertificate(a=a, players=players, young_weight=young_weight, tables=tab)


# --- full pipeline -----------------------------------------------------------

@dataclass
class GameSolution:
    model: GameModel
    riccati: RiccatiSolution
    single: tuple[RiccatiSolution, RiccatiSolution] | None = None
    comparison: ComparisonReport | None = None
    eta: EtaSolution | None = None
    offset: FeedbackOffset | None = None
    strategy: FeedbackStrategy | None = None

    @property
    def solved(self) -> bool:
        return self.riccati.solved

    def value(self, x, i: int) -> float:
        return value(self.model, self.riccati, self.eta, x, i)


def solve_game(model: GameModel, grid: TimeGrid | None = None, delta_min: float = DEFAULT_DELTA_MIN,
               p_max: float = DEFAULT_P_MAX, compare: bool = True) -> GameSolution:
    """Riccati, single-player comparison, offset and strategy in one call.

    Stops after the Riccati stage if it does not solve.
    """
    ric = solve_cdre(model, grid, delta_min, p_max)
    out = GameSolution(model, ric)
    if not ric.solved:
        return out
    if compare:
        p1 = solve_single_player(model, 1, grid, delta_min, p_max)
        p2 = solve_single_player(model, 2, grid, delta_min, p_max)
        out.single = (p1, p2)
        if p1.solved and p2.solved:
            out.comparison = comparison_check(ric, p1, p2)
    out.eta = solve_eta(model, ric)
    out.offset = feedback_offset(model, ric, out.eta)
    out.strategy = build_strategy(model, ric, out.offset)
    return out


def _jsonable(obj):
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps(doc) -> str:
    """JSON text; floats keep their shortest round-trip form (at most 17 digits).

    NaN (not computed) becomes null and infinities become "inf"/"-inf".
    """
    return json.dumps(_jsonable(doc), indent=2)
