"""Euler-Maruyama simulation of the regime-switching state and Monte-Carlo costs.

A single scalar Brownian motion drives the diffusion.  The regime is sampled
exactly (see :mod:`mzlq.chain`) and then frozen at the left endpoint of every
grid cell.  Controls follow one law for every case::

    u_k = Theta(t_k, alpha_k) X_k + nu(t_k, alpha_k) + e_k

where ``Theta``/``nu`` are optional feedback parts and ``e`` an optional
explicit control.  With no feedback part ``u_k = e_k`` exactly, which makes a
recorded feedback run reproducible bit-for-bit as an explicit run.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .chain import ChainPath, path_seeds, sample_path
from .model import GameModel, TimeGrid, check_regime

CHUNK = 512  # paths per work unit; fixed so results do not depend on worker count


class SimulationError(FloatingPointError):
    """State became non-finite."""


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments ``dW_k ~ N(0, h)`` on the cells of a grid."""

    dW: np.ndarray
    seed: object = None

    @classmethod
    def sample(cls, grid: TimeGrid, seed) -> "NoisePath":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(grid.h), grid.steps), seed)

    @classmethod
    def zeros(cls, grid: TimeGrid) -> "NoisePath":
        return cls(np.zeros(grid.steps))

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dW)])


@dataclass
class Trajectory:
    grid: TimeGrid
    X: np.ndarray  # (K + 1, n)
    u: np.ndarray  # (K + 1, m); last row uses the law at t_K
    regime: np.ndarray  # (K + 1,), 1-based
    cost: float = float("nan")

    def to_rows(self, path_index: int | None = None) -> list[list[str]]:
        rows = []
        for k, t in enumerate(self.grid.nodes):
            row = [] if path_index is None else [str(path_index)]
            row += [format(float(t), ".17g"), str(int(self.regime[k]))]
            row += [format(float(v), ".17g") for v in self.X[k]]
            row += [format(float(v), ".17g") for v in self.u[k]]
            rows.append(row)
        return rows

    def header(self, with_path: bool = False) -> list[str]:
        head = ["path"] if with_path else []
        head += ["t", "regime"]
        head += [f"X[{r}]" for r in range(self.X.shape[1])]
        head += [f"u[{r}]" for r in range(self.u.shape[1])]
        return head

    def to_csv(self, path: str | Path) -> None:
        write_trajectories(path, [self])


def write_trajectories(path: str | Path, trajectories: Sequence[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not trajectories:
            return
        w.writerow(trajectories[0].header(with_path=True))
        for j, tr in enumerate(trajectories):
            w.writerows(tr.to_rows(j))


@dataclass(frozen=True)
class ControlLaw:
    """``u = gain X + offset + explicit`` on the simulation grid.

    gain: ``(K + 1, L, m, n)`` or None; offset: ``(K + 1, L, m)`` or None;
    explicit: ``(K, m)`` shared by all paths, ``(P, K, m)`` per path, or None.
    """

    gain: np.ndarray | None = None
    offset: np.ndarray | None = None
    explicit: np.ndarray | None = None

    @classmethod
    def feedback(cls, strategy) -> "ControlLaw":
        return cls(gain=strategy.theta, offset=strategy.nu)

    @classmethod
    def open_loop(cls, u) -> "ControlLaw":
        return cls(explicit=np.asarray(u, dtype=float))

    @classmethod
    def mixed(cls, strategy, u, feedback_player: int) -> "ControlLaw":
        """One player plays its feedback strategy, the other the explicit control ``u``.

        ``u`` has the full control dimension ``m``; the feedback player's
        columns of ``u`` are added to its feedback control.
        """
        rows = strategy.player_slice(feedback_player)
        gain = np.zeros_like(strategy.theta)
        offset = np.zeros_like(strategy.nu)
        gain[..., rows, :] = strategy.theta[..., rows, :]
        offset[..., rows] = strategy.nu[..., rows]
        return cls(gain=gain, offset=offset, explicit=np.asarray(u, dtype=float))

    def check(self, model: GameModel, steps: int) -> None:
        L, n, m = model.L, model.n, model.m
        if self.gain is not None and self.gain.shape != (steps + 1, L, m, n):
            raise ValueError(f"gain has shape {self.gain.shape}; expected {(steps + 1, L, m, n)}")
        if self.offset is not None and self.offset.shape != (steps + 1, L, m):
            raise ValueError(f"offset has shape {self.offset.shape}; expected {(steps + 1, L, m)}")
        if self.explicit is not None and self.explicit.shape[-2:] != (steps, m):
            raise ValueError(f"explicit control has shape {self.explicit.shape}; expected (..., {steps}, {m})")


@dataclass
class BatchResult:
    cost: np.ndarray  # (P,)
    X: np.ndarray | None = None  # (P, K + 1, n)
    u: np.ndarray | None = None  # (P, K + 1, m)


def _cell_coeffs(model: GameModel, cell: int):
    pick = lambda arr: arr[0 if arr.shape[0] == 1 else cell]  # noqa: E731
    return (pick(model.A), pick(model.B), pick(model.b), pick(model.C), pick(model.D), pick(model.sigma),
            pick(model.Q), pick(model.S), pick(model.R), pick(model.q), pick(model.rho))


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    # column sums: much faster than batched matmul for the tiny matrices used here
    if M.shape[-1] == 0:
        return np.zeros(np.broadcast_shapes(M.shape[:-2], v.shape[:-1]) + M.shape[-2:-1])
    out = M[..., 0] * v[..., None, 0]
    for j in range(1, M.shape[-1]):
        out = out + M[..., j] * v[..., None, j]
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=-1)


def _control(law: ControlLaw, k: int, reg: np.ndarray, X: np.ndarray, m: int) -> np.ndarray:
    K = None if law.explicit is None else law.explicit.shape[-2]
    if law.explicit is not None:
        e = law.explicit[..., min(k, K - 1), :]
        e = np.broadcast_to(e, X.shape[:-1] + (m,))
    if law.gain is None and law.offset is None:
        return np.array(e) if law.explicit is not None else np.zeros(X.shape[:-1] + (m,))
    u = _mv(law.gain[k, reg], X) if law.gain is not None else np.zeros(X.shape[:-1] + (m,))
    if law.offset is not None:
        u = u + law.offset[k, reg]
    if law.explicit is not None:
        u = u + e
    return u


def _gather(coeffs, reg: np.ndarray):
    return tuple(c[reg] for c in coeffs)


def _running_cost(g, X: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Running cost integrand; broadcasts over leading axes of ``X`` and ``u``."""
    _, _, _, _, _, _, Q, S, R, q, rho = g
    return _dot(X, _mv(Q, X) + 2.0 * q) + _dot(u, _mv(R, u) + 2.0 * _mv(S, X) + 2.0 * rho)


def _euler(g, X: np.ndarray, u: np.ndarray, h: float, dW: np.ndarray) -> np.ndarray:
    A, B, b, C, D, sig = g[:6]
    drift = _mv(A, X) + _mv(B, u) + b
    diffusion = _mv(C, X) + _mv(D, u) + sig
    return X + drift * h + diffusion * dW[..., None]


def _terminal_cost(model: GameModel, final_regime: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _dot(X, _mv(model.G[final_regime], X) + 2.0 * model.g[final_regime])


def _check_finite(X: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise SimulationError(f"state of path {int(bad[-2])} became non-finite at t={t:.9g}")


def simulate_batch(model: GameModel, law: ControlLaw, regimes: np.ndarray, final_regime: np.ndarray,
                   dW: np.ndarray, x, record: bool = False) -> BatchResult:
    """Simulate ``P`` paths at once and return their realized costs.

    ``regimes`` holds 0-based labels ``alpha(t_k)`` for ``k < K`` (shape
    ``(P, K)``), ``final_regime`` the label at ``T``, ``dW`` the increments.
    The cost uses left-endpoint quadrature of the running cost plus the
    terminal term.
    """
    grid = model.grid
    K, h = grid.steps, grid.h
    P = regimes.shape[0]
    n, m = model.n, model.m
    law.check(model, K)
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(n), (P, n)).copy()
    cost = np.zeros(P)
    Xs = np.empty((P, K + 1, n)) if record else None
    us = np.empty((P, K + 1, m)) if record else None
    coeffs = _cell_coeffs(model, 0)
    for k in range(K):
        if model.time_varying:
            coeffs = _cell_coeffs(model, k)
        reg = regimes[:, k]
        g = _gather(coeffs, reg)
        u = _control(law, k, reg, X, m)
        if record:
            Xs[:, k], us[:, k] = X, u
        cost += h * _running_cost(g, X, u)
        X = _euler(g, X, u, h, dW[:, k])
        _check_finite(X, grid.nodes[k + 1])
    cost += _terminal_cost(model, final_regime, X)
    if record:
        Xs[:, K] = X
        us[:, K] = _control(law, K, final_regime, X, m)
    return BatchResult(cost=cost, X=Xs, u=us)


def simulate_deviations(model: GameModel, law: ControlLaw, offsets: np.ndarray, gains: np.ndarray,
                        regimes: np.ndarray, final_regime: np.ndarray, dW: np.ndarray, x) -> np.ndarray:
    """Center path under ``law`` plus deviation arms on the same noise, in lockstep.

    Arm ``a`` replays the center's realized control and adds
    ``offsets[a, k] + gains[a] X_a``: ``offsets`` is ``(arms, K, m)``,
    ``gains`` is ``(arms, m, n)``.  Returns costs of shape ``(1 + arms, P)``,
    row 0 being the center.
    """
    grid = model.grid
    K, h = grid.steps, grid.h
    P = regimes.shape[0]
    n, m = model.n, model.m
    law.check(model, K)
    arms = offsets.shape[0]
    if offsets.shape != (arms, K, m) or gains.shape != (arms, m, n):
        raise ValueError("deviation offsets/gains have the wrong shape")
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(n), (1 + arms, P, n)).copy()
    cost = np.zeros((1 + arms, P))
    coeffs = _cell_coeffs(model, 0)
    gains = gains[:, None]  # (arms, 1, m, n)
    for k in range(K):
        if model.time_varying:
            coeffs = _cell_coeffs(model, k)
        reg = regimes[:, k]
        g = _gather(coeffs, reg)
        u0 = _control(law, k, reg, X[0], m)
        u = np.empty((1 + arms, P, m))
        u[0] = u0
        u[1:] = u0 + offsets[:, k, None, :] + _mv(gains, X[1:])
        cost += h * _running_cost(g, X, u)
        X = _euler(g, X, u, h, dW[:, k])
        _check_finite(X, grid.nodes[k + 1])
    cost += _terminal_cost(model, final_regime, X)
    return cost


def simulate(model: GameModel, control, path: ChainPath, noise: NoisePath, x, i: int) -> Trajectory:
    """Simulate one path under ``control`` (a ControlLaw or a FeedbackStrategy)."""
    idx = check_regime(model, i)
    if path.i0 != i:
        raise ValueError(f"path starts in regime {path.i0}, expected {i}")
    grid = model.grid
    if abs(path.T - grid.T) > 1e-12 * max(1.0, grid.T) or noise.dW.shape != (grid.steps,):
        raise ValueError("path or noise does not match the model grid")
    law = control if isinstance(control, ControlLaw) else ControlLaw.feedback(control)
    labels = path.on_grid(grid)
    if law.explicit is not None and law.explicit.ndim == 3:
        raise ValueError("single-path simulation takes explicit controls of shape (K, m)")
    res = simulate_batch(model, law, labels[None, :-1] - 1, labels[-1:] - 1, noise.dW[None], x, record=True)
    assert labels[0] - 1 == idx
    return Trajectory(grid=grid, X=res.X[0], u=res.u[0], regime=labels, cost=float(res.cost[0]))


# --- Monte Carlo -------------------------------------------------------------

@dataclass(frozen=True)
class PathBatch:
    """Common random numbers for a contiguous block of path indices."""

    indices: np.ndarray
    regimes: np.ndarray  # (P, K) 0-based, left endpoints
    final_regime: np.ndarray  # (P,)
    dW: np.ndarray  # (P, K)
    paths: tuple[ChainPath, ...]


def sample_batch(model: GameModel, i: int, seed: int, indices) -> PathBatch:
    """Chain paths and Brownian increments for path ``indices`` (each independently seeded)."""
    check_regime(model, i)
    grid = model.grid
    indices = np.asarray(indices, dtype=int)
    regimes = np.empty((indices.size, grid.steps), dtype=int)
    final = np.empty(indices.size, dtype=int)
    dW = np.empty((indices.size, grid.steps))
    paths = []
    for r, j in enumerate(indices):
        chain_ss, noise_ss = path_seeds(seed, int(j))
        path = sample_path(model.generator, i, model.T, chain_ss)
        labels = path.on_grid(grid) - 1
        regimes[r], final[r] = labels[:-1], labels[-1]
        dW[r] = NoisePath.sample(grid, noise_ss).dW
        paths.append(path)
    return PathBatch(indices, regimes, final, dW, tuple(paths))


def run_chunks(fn: Callable[[PathBatch], np.ndarray], model: GameModel, i: int, n_paths: int, seed: int,
               workers: int = 1, chunk: int = CHUNK) -> np.ndarray:
    """Apply ``fn`` to fixed-size index-ordered chunks and concatenate along the last axis.

    ``fn`` maps a PathBatch to an array whose last axis runs over its paths.
    The chunk layout depends only on ``n_paths`` and ``chunk``, so the result
    is identical for any number of workers.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    starts = range(0, n_paths, chunk)

    def work(start):
        idx = np.arange(start, min(start + chunk, n_paths))
        return fn(sample_batch(model, i, seed, idx))

    if workers <= 1:
        parts = [work(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    se: float
    n_paths: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n_paths": self.n_paths}


def summarize(samples: np.ndarray) -> McEstimate:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    se = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return McEstimate(float(np.mean(samples)), se, n)


def mc_costs(model: GameModel, control, x, i: int, n_paths: int, seed: int, workers: int = 1,
             chunk: int = CHUNK) -> np.ndarray:
    """Realized cost of every path, ordered by path index."""
    law = control if isinstance(control, ControlLaw) else ControlLaw.feedback(control)
    if law.explicit is not None and law.explicit.ndim == 3:
        raise ValueError("per-path explicit controls are not supported here")
    return run_chunks(
        lambda batch: simulate_batch(model, law, batch.regimes, batch.final_regime, batch.dW, x).cost,
        model, i, n_paths, seed, workers, chunk,
    )


def mc_estimate(model: GameModel, control, x, i: int, n_paths: int, seed: int, workers: int = 1,
                chunk: int = CHUNK) -> McEstimate:
    """Sample mean and standard error of the cost over independently seeded paths."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    return summarize(mc_costs(model, control, x, i, n_paths, seed, workers, chunk))
