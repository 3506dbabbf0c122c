"""Continuous-time Markov chain: exact path sampling and compensated jump counts."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import TimeGrid

GENERATOR_TOL = 1e-12


def check_generator(Pi) -> np.ndarray:
    """Return ``Pi`` as a float array, raising ValueError unless it is a generator."""
    Pi = np.asarray(Pi, dtype=float)
    if Pi.ndim != 2 or Pi.shape[0] != Pi.shape[1]:
        raise ValueError(f"generator must be square, got shape {Pi.shape}")
    if not np.all(np.isfinite(Pi)):
        raise ValueError("generator has non-finite entries")
    off = Pi - np.diag(np.diag(Pi))
    if np.any(off < 0):
        raise ValueError("generator has negative off-diagonal rates")
    scale = np.maximum(1.0, np.abs(Pi).max(axis=1))
    if np.any(np.abs(Pi.sum(axis=1)) > GENERATOR_TOL * scale):
        raise ValueError("generator rows must sum to zero")
    return Pi


@dataclass(frozen=True)
class ChainPath:
    """Regime trajectory on ``[0, T]``; regimes are 1-based."""

    i0: int
    jump_times: np.ndarray
    jump_states: np.ndarray
    T: float

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float).reshape(-1)
        states = np.asarray(self.jump_states, dtype=int).reshape(-1)
        if times.shape != states.shape:
            raise ValueError("jump_times and jump_states differ in length")
        if times.size and (times[0] <= 0 or times[-1] > self.T or np.any(np.diff(times) <= 0)):
            raise ValueError("jump times must be strictly increasing in (0, T]")
        seq = np.concatenate([[self.i0], states])
        if np.any(seq[1:] == seq[:-1]):
            raise ValueError("consecutive regimes must differ")
        object.__setattr__(self, "jump_times", times)
        object.__setattr__(self, "jump_states", states)
        object.__setattr__(self, "T", float(self.T))

    @property
    def jumps(self) -> list[tuple[float, int]]:
        return [(float(t), int(j)) for t, j in zip(self.jump_times, self.jump_states)]

    def regime_at(self, t) -> np.ndarray | int:
        """Right-continuous regime label alpha(t)."""
        states = np.concatenate([[self.i0], self.jump_states])
        k = np.searchsorted(self.jump_times, t, side="right")
        return states[k] if np.ndim(t) else int(states[k])

    def left_regime_at(self, t) -> np.ndarray | int:
        """Left limit alpha(t-)."""
        states = np.concatenate([[self.i0], self.jump_states])
        k = np.searchsorted(self.jump_times, t, side="left")
        return states[k] if np.ndim(t) else int(states[k])

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Regime labels at the grid nodes, shape ``(K + 1,)``."""
        return self.regime_at(grid.nodes)

    def to_dict(self) -> dict:
        return {"i0": int(self.i0), "jumps": [[t, j] for t, j in self.jumps], "T": self.T}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainPath":
        if set(doc) != {"i0", "jumps", "T"}:
            raise ValueError(f"chain path fields must be i0, jumps, T; got {sorted(doc)}")
        jumps = doc["jumps"]
        times = [float(t) for t, _ in jumps]
        states = [int(j) for _, j in jumps]
        return cls(int(doc["i0"]), np.array(times), np.array(states, dtype=int), float(doc["T"]))

    @classmethod
    def from_json(cls, text: str) -> "ChainPath":
        return cls.from_dict(json.loads(text))


def sample_path(Pi, i0: int, T: float, seed) -> ChainPath:
    """Sample the chain with generator ``Pi`` from regime ``i0`` on ``[0, T]``.

    Holding times are exponential with rate ``-Pi[i, i]``; the next regime is
    drawn with probabilities ``Pi[i, j] / -Pi[i, i]``.  ``seed`` may be an
    integer, a SeedSequence or a Generator.
    """
    Pi = check_generator(Pi)
    L = Pi.shape[0]
    if not 1 <= i0 <= L:
        raise ValueError(f"initial regime must be in 1..{L}, got {i0}")
    if not T > 0:
        raise ValueError("horizon must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rates = -np.diag(Pi)
    times, states = [], []
    t, state = 0.0, i0 - 1
    while True:
        rate = rates[state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > T:
            break
        probs = Pi[state].copy()
        probs[state] = 0.0
        nxt = int(rng.choice(L, p=probs / rate))
        times.append(t)
        states.append(nxt + 1)
        state = nxt
    return ChainPath(i0, np.array(times), np.array(states, dtype=int), T)


def compensated_counts(path: ChainPath, Pi, grid: TimeGrid) -> np.ndarray:
    """Compensated jump counts ``N_j(t) - int_0^t pi_{alpha(s-), j} 1{alpha(s-) != j} ds``.

    Returns an array of shape ``(K + 1, L)``; column ``j - 1`` is regime ``j``.
    The compensator is integrated exactly (it is piecewise constant).
    """
    Pi = check_generator(Pi)
    if abs(path.T - grid.T) > 1e-12 * max(1.0, grid.T):
        raise ValueError("path horizon does not match the grid")
    L = Pi.shape[0]
    nodes = grid.nodes
    intensity = Pi - np.diag(np.diag(Pi))  # row = current regime, column = target

    # segments of constant regime: [start_k, end_k) in regime seg_state[k]
    starts = np.concatenate([[0.0], path.jump_times])
    ends = np.concatenate([path.jump_times, [path.T]])
    seg_state = np.concatenate([[path.i0], path.jump_states]) - 1

    out = np.zeros((nodes.size, L))
    for start, end, s in zip(starts, ends, seg_state):
        overlap = np.clip(nodes, start, end) - start  # time spent in this segment up to each node
        out -= overlap[:, None] * intensity[s][None, :]
    for t, j in zip(path.jump_times, path.jump_states):
        out[nodes >= t, j - 1] += 1.0
    return out


def stationary_distribution(Pi) -> np.ndarray:
    """Solve ``p Pi = 0`` with ``sum(p) = 1`` (irreducible chains)."""
    Pi = check_generator(Pi)
    L = Pi.shape[0]
    lhs = np.vstack([Pi.T, np.ones((1, L))])
    rhs = np.concatenate([np.zeros(L), [1.0]])
    p, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return p


def path_seeds(master_seed: int, index: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Independent (chain, noise) seed streams for path ``index``."""
    chain_ss, noise_ss = np.random.SeedSequence([int(master_seed), int(index)]).spawn(2)
    return chain_ss, noise_ss
