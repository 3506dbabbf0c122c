"""Problem data for regime-switching zero-sum LQ games.

Every coefficient is stored as an array whose first two axes are
``(cell, regime)``.  The cell axis has length 1 (time-invariant data) or
``steps`` (piecewise constant on the uniform grid, right-continuous).
Regimes are labelled ``1..L`` in every public signature; arrays are
indexed ``0..L-1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

SYM_TOL = 1e-12

# name -> (row dim, col dim); None means a vector field
MATRIX_FIELDS: dict[str, tuple[str, str]] = {
    "A": ("n", "n"),
    "B1": ("n", "m1"),
    "B2": ("n", "m2"),
    "C": ("n", "n"),
    "D1": ("n", "m1"),
    "D2": ("n", "m2"),
    "Q": ("n", "n"),
    "S1": ("m1", "n"),
    "S2": ("m2", "n"),
    "R11": ("m1", "m1"),
    "R12": ("m1", "m2"),
    "R22": ("m2", "m2"),
}
VECTOR_FIELDS: dict[str, str] = {
    "b": "n",
    "sigma": "n",
    "q": "n",
    "rho1": "m1",
    "rho2": "m2",
}
SYMMETRIC_FIELDS = ("Q", "R11", "R22")
REQUIRED_REGIME_KEYS = tuple(MATRIX_FIELDS) + ("G",)
OPTIONAL_REGIME_KEYS = tuple(VECTOR_FIELDS) + ("g",)
TOP_LEVEL_KEYS = ("L", "n", "m1", "m2", "T", "steps", "generator", "regimes")


class ProblemFileError(ValueError):
    """Raised when a problem document cannot be parsed into a model."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / K`` on ``[0, T]``."""

    T: float
    steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return self.T / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor)


@dataclass(frozen=True)
class Violation:
    field: str
    message: str
    regime: int | None = None
    cell: int | None = None

    def __str__(self):
        where = []
        if self.regime is not None:
            where.append(f"regime {self.regime}")
        if self.cell is not None:
            where.append(f"cell {self.cell}")
        loc = f" ({', '.join(where)})" if where else ""
        return f"{self.field}{loc}: {self.message}"


@dataclass(frozen=True)
class StackedView:
    """Both players' data concatenated at one (t, regime)."""

    B: np.ndarray
    D: np.ndarray
    S: np.ndarray
    R: np.ndarray
    rho: np.ndarray
    m1: int

    def player_blocks(self) -> dict[str, np.ndarray]:
        m1 = self.m1
        return {
            "B1": self.B[:, :m1],
            "B2": self.B[:, m1:],
            "D1": self.D[:, :m1],
            "D2": self.D[:, m1:],
            "S1": self.S[:m1],
            "S2": self.S[m1:],
            "R11": self.R[:m1, :m1],
            "R12": self.R[:m1, m1:],
            "R22": self.R[m1:, m1:],
            "rho1": self.rho[:m1],
            "rho2": self.rho[m1:],
        }


def _as_cells(value, ndim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == ndim:
        return arr[None]
    if arr.ndim == ndim + 1:
        return arr
    raise ValueError(f"expected {ndim + 1} or {ndim + 2} axes, got shape {arr.shape}")


@dataclass(frozen=True, eq=False)
class GameModel:
    """Full problem data for one game.

    Matrix coefficients have shape ``(cells, L, rows, cols)``, vector
    coefficients ``(cells, L, dim)``; ``G`` is ``(L, n, n)`` and ``g`` is
    ``(L, n)``.  Use :meth:`time_invariant` to build from per-regime data.
    """

    L: int
    n: int
    m1: int
    m2: int
    T: float
    steps: int
    generator: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Q: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    R11: np.ndarray
    R12: np.ndarray
    R22: np.ndarray
    G: np.ndarray
    b: np.ndarray = None
    sigma: np.ndarray = None
    q: np.ndarray = None
    rho1: np.ndarray = None
    rho2: np.ndarray = None
    g: np.ndarray = None

    def __post_init__(self):
        dims = {"n": self.n, "m1": self.m1, "m2": self.m2}
        put = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        put("generator", np.asarray(self.generator, dtype=float))
        put("T", float(self.T))
        for name in MATRIX_FIELDS:
            put(name, _as_cells(getattr(self, name), 3))
        for name, d in VECTOR_FIELDS.items():
            val = getattr(self, name)
            if val is None:
                val = np.zeros((1, self.L, dims[d]))
            put(name, _as_cells(val, 2))
        put("G", np.asarray(self.G, dtype=float))
        put("g", np.zeros((self.L, self.n)) if self.g is None else np.asarray(self.g, dtype=float))
        for name in MATRIX_FIELDS | VECTOR_FIELDS:
            getattr(self, name).setflags(write=False)
        for name in ("generator", "G", "g"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def time_invariant(cls, generator, T, steps, **per_regime) -> "GameModel":
        """Build a model from per-regime arrays (leading axis = regime)."""
        generator = np.asarray(generator, dtype=float)
        L = generator.shape[0]
        A = np.asarray(per_regime["A"], dtype=float)
        n = A.shape[-1]
        m1 = np.asarray(per_regime["B1"], dtype=float).reshape(L, n, -1).shape[-1]
        m2 = np.asarray(per_regime["B2"], dtype=float).reshape(L, n, -1).shape[-1]
        dims = {"n": n, "m1": m1, "m2": m2}
        kw: dict[str, Any] = {}
        for name, (r, c) in MATRIX_FIELDS.items():
            kw[name] = np.asarray(per_regime[name], dtype=float).reshape(1, L, dims[r], dims[c])
        for name, d in VECTOR_FIELDS.items():
            if per_regime.get(name) is not None:
                kw[name] = np.asarray(per_regime[name], dtype=float).reshape(1, L, dims[d])
        kw["G"] = np.asarray(per_regime["G"], dtype=float).reshape(L, n, n)
        if per_regime.get("g") is not None:
            kw["g"] = np.asarray(per_regime["g"], dtype=float).reshape(L, n)
        unknown = set(per_regime) - set(MATRIX_FIELDS) - set(VECTOR_FIELDS) - {"G", "g"}
        if unknown:
            raise TypeError(f"unknown coefficient(s): {sorted(unknown)}")
        return cls(L=L, n=n, m1=m1, m2=m2, T=T, steps=steps, generator=generator, **kw)

    def replace(self, **changes) -> "GameModel":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return GameModel(**kw)

    @property
    def m(self) -> int:
        return self.m1 + self.m2

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.steps)

    @property
    def cells(self) -> int:
        return self.A.shape[0]

    @cached_property
    def time_varying(self) -> bool:
        return any(getattr(self, k).shape[0] > 1 for k in MATRIX_FIELDS | VECTOR_FIELDS)

    @property
    def homogeneous(self) -> bool:
        return all(not np.any(getattr(self, k)) for k in tuple(VECTOR_FIELDS) + ("g",))

    def cell_index(self, t: float) -> int:
        """Grid cell containing ``t`` (right-continuous; ``t = T`` maps to the last cell)."""
        if not (0.0 <= t <= self.T):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        k = int(np.floor(t / self.T * self.steps))
        return min(k, self.steps - 1)

    def coeff(self, name: str, cell: int) -> np.ndarray:
        """Coefficient ``name`` on grid cell ``cell`` for every regime."""
        arr = getattr(self, name)
        return arr[0] if arr.shape[0] == 1 else arr[cell]

    # stacked (both-player) views, all regimes at once: shape (cells, L, ...)
    @cached_property
    def B(self) -> np.ndarray:
        return _cells_concat(self.B1, self.B2, axis=-1)

    @cached_property
    def D(self) -> np.ndarray:
        return _cells_concat(self.D1, self.D2, axis=-1)

    @cached_property
    def S(self) -> np.ndarray:
        return _cells_concat(self.S1, self.S2, axis=-2)

    @cached_property
    def R(self) -> np.ndarray:
        R21 = np.swapaxes(self.R12, -1, -2)
        top = _cells_concat(self.R11, self.R12, axis=-1)
        bottom = _cells_concat(R21, self.R22, axis=-1)
        return _cells_concat(top, bottom, axis=-2)

    @cached_property
    def rho(self) -> np.ndarray:
        return _cells_concat(self.rho1, self.rho2, axis=-1)

    def to_dict(self) -> dict:
        regimes = []
        for i in range(self.L):
            entry = {}
            for name in tuple(MATRIX_FIELDS) + tuple(VECTOR_FIELDS):
                arr = getattr(self, name)[:, i]
                entry[name] = (arr[0] if arr.shape[0] == 1 else arr).tolist()
            entry["G"] = self.G[i].tolist()
            entry["g"] = self.g[i].tolist()
            regimes.append(entry)
        return {
            "L": self.L,
            "n": self.n,
            "m1": self.m1,
            "m2": self.m2,
            "T": self.T,
            "steps": self.steps,
            "generator": self.generator.tolist(),
            "regimes": regimes,
        }

    def to_json(self, path: str | Path | None = None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _cells_concat(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    cells = max(a.shape[0], b.shape[0])
    a = np.broadcast_to(a, (cells,) + a.shape[1:])
    b = np.broadcast_to(b, (cells,) + b.shape[1:])
    out = np.concatenate([a, b], axis=axis)
    out.setflags(write=False)
    return out


def check_regime(model: GameModel, i: int) -> int:
    """Validate a 1-based regime label and return its 0-based index."""
    if int(i) != i or not 1 <= i <= model.L:
        raise ValueError(f"regime must be in 1..{model.L}, got {i}")
    return int(i) - 1


def stack(model: GameModel, t: float, i: int) -> StackedView:
    """Concatenate both players' coefficients at time ``t`` in regime ``i``."""
    idx = check_regime(model, i)
    cell = model.cell_index(t)
    pick = lambda arr: arr[0 if arr.shape[0] == 1 else cell, idx]  # noqa: E731
    return StackedView(
        B=pick(model.B),
        D=pick(model.D),
        S=pick(model.S),
        R=pick(model.R),
        rho=pick(model.rho),
        m1=model.m1,
    )


def validate(model: GameModel) -> list[Violation]:
    """Return every violated model invariant; an empty list means valid."""
    out: list[Violation] = []
    dims = {"n": model.n, "m1": model.m1, "m2": model.m2}
    for key, val in dims.items():
        if int(val) != val or val < 0 or (key == "n" and val < 1):
            out.append(Violation(key, f"invalid dimension {val}"))
    if model.L < 1:
        out.append(Violation("L", f"invalid regime count {model.L}"))
    if not (np.isfinite(model.T) and model.T > 0):
        out.append(Violation("T", f"horizon must be positive, got {model.T}"))
    if int(model.steps) != model.steps or model.steps < 1:
        out.append(Violation("steps", f"steps must be a positive integer, got {model.steps}"))
    if out:
        return out

    L = model.L
    Pi = model.generator
    if Pi.shape != (L, L):
        out.append(Violation("generator", f"shape {Pi.shape} != {(L, L)}"))
    elif not np.all(np.isfinite(Pi)):
        out.append(Violation("generator", "non-finite entries"))
    else:
        for i in range(L):
            row = Pi[i]
            off = np.delete(row, i)
            if np.any(off < 0):
                out.append(Violation("generator", f"row {i + 1} has a negative off-diagonal rate", regime=i + 1))
            scale = max(1.0, float(np.max(np.abs(row))))
            if abs(row.sum()) > SYM_TOL * scale:
                out.append(Violation("generator", f"row {i + 1} sum {row.sum():.3g} != 0", regime=i + 1))

    def check_shape(name, arr, tail):
        if arr.ndim != 2 + len(tail) or arr.shape[1] != L or arr.shape[2:] != tail:
            out.append(Violation(name, f"shape {arr.shape[1:]} != {(L,) + tail}"))
            return False
        if arr.shape[0] not in (1, model.steps):
            out.append(Violation(name, f"{arr.shape[0]} time cells; expected 1 or {model.steps}"))
            return False
        return True

    for name, (r, c) in MATRIX_FIELDS.items():
        arr = getattr(model, name)
        if not check_shape(name, arr, (dims[r], dims[c])):
            continue
        _check_finite(out, name, arr)
        if name in SYMMETRIC_FIELDS:
            asym = np.abs(arr - np.swapaxes(arr, -1, -2))
            for cell, i in zip(*np.nonzero(np.any(asym > SYM_TOL, axis=(-1, -2)))):
                out.append(Violation(name, "not symmetric", regime=int(i) + 1, cell=int(cell)))
    for name, d in VECTOR_FIELDS.items():
        arr = getattr(model, name)
        if check_shape(name, arr, (dims[d],)):
            _check_finite(out, name, arr)

    if model.G.shape != (L, model.n, model.n):
        out.append(Violation("G", f"shape {model.G.shape} != {(L, model.n, model.n)}"))
    else:
        _check_finite(out, "G", model.G[None])
        for i in range(L):
            if np.any(np.abs(model.G[i] - model.G[i].T) > SYM_TOL):
                out.append(Violation("G", "not symmetric", regime=i + 1))
    if model.g.shape != (L, model.n):
        out.append(Violation("g", f"shape {model.g.shape} != {(L, model.n)}"))
    else:
        _check_finite(out, "g", model.g[None])
    return out


def _check_finite(out: list[Violation], name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr).reshape(arr.shape[0], arr.shape[1], -1).all(axis=-1)
    for cell, i in zip(*np.nonzero(bad)):
        out.append(Violation(name, "non-finite entries", regime=int(i) + 1, cell=int(cell)))


def _parse_coefficient(name: str, value, shape: tuple[int, ...], steps: int, regime: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemFileError(f"regime {regime}: {name} is not a numeric array ({exc})") from None
    size = int(np.prod(shape))
    if size == 0:
        # empty blocks (m1 or m2 = 0) may be written as [] or [[], ...]
        if arr.size != 0:
            raise ProblemFileError(f"regime {regime}: {name} must be empty for shape {shape}")
        return np.zeros((1,) + shape)
    if arr.shape == shape:
        return arr[None]
    if arr.shape == (steps,) + shape:
        return arr
    raise ProblemFileError(
        f"regime {regime}: {name} has shape {arr.shape}; expected {shape} or {(steps,) + shape}"
    )


def model_from_dict(doc: dict) -> GameModel:
    """Strictly parse a problem document (see README for the schema)."""
    if not isinstance(doc, dict):
        raise ProblemFileError("problem document must be a JSON object")
    unknown = set(doc) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ProblemFileError(f"unknown top-level field(s): {sorted(unknown)}")
    missing = [k for k in TOP_LEVEL_KEYS if k not in doc]
    if missing:
        raise ProblemFileError(f"missing top-level field(s): {missing}")
    for key in ("L", "n", "m1", "m2", "steps"):
        if not isinstance(doc[key], int) or isinstance(doc[key], bool) or doc[key] < 0:
            raise ProblemFileError(f"{key} must be a non-negative integer")
    if doc["L"] < 1 or doc["n"] < 1 or doc["steps"] < 1:
        raise ProblemFileError("L, n and steps must be positive")
    if not isinstance(doc["T"], (int, float)) or isinstance(doc["T"], bool) or not doc["T"] > 0:
        raise ProblemFileError("T must be a positive number")
    L, steps = doc["L"], doc["steps"]
    dims = {"n": doc["n"], "m1": doc["m1"], "m2": doc["m2"]}
    try:
        generator = np.asarray(doc["generator"], dtype=float)
    except (TypeError, ValueError):
        raise ProblemFileError("generator is not a numeric matrix") from None
    if generator.shape != (L, L):
        raise ProblemFileError(f"generator has shape {generator.shape}; expected {(L, L)}")
    regimes = doc["regimes"]
    if not isinstance(regimes, list) or len(regimes) != L:
        raise ProblemFileError(f"regimes must be a list of {L} objects")

    collected: dict[str, list[np.ndarray]] = {}
    G, g = [], []
    for i, reg in enumerate(regimes, start=1):
        if not isinstance(reg, dict):
            raise ProblemFileError(f"regime {i} must be an object")
        unknown = set(reg) - set(REQUIRED_REGIME_KEYS) - set(OPTIONAL_REGIME_KEYS)
        if unknown:
            raise ProblemFileError(f"regime {i}: unknown field(s) {sorted(unknown)}")
        missing = [k for k in REQUIRED_REGIME_KEYS if k not in reg]
        if missing:
            raise ProblemFileError(f"regime {i}: missing field(s) {missing}")
        for name, (r, c) in MATRIX_FIELDS.items():
            collected.setdefault(name, []).append(
                _parse_coefficient(name, reg[name], (dims[r], dims[c]), steps, i)
            )
        for name, d in VECTOR_FIELDS.items():
            val = reg.get(name, [0.0] * dims[d])
            collected.setdefault(name, []).append(_parse_coefficient(name, val, (dims[d],), steps, i))
        G.append(_parse_coefficient("G", reg["G"], (dims["n"], dims["n"]), 1, i)[0])
        g.append(_parse_coefficient("g", reg.get("g", [0.0] * dims["n"]), (dims["n"],), 1, i)[0])

    kw = {}
    for name, per_regime in collected.items():
        cells = max(a.shape[0] for a in per_regime)
        kw[name] = np.stack([np.broadcast_to(a, (cells,) + a.shape[1:]) for a in per_regime], axis=1)
    return GameModel(
        L=L, n=dims["n"], m1=dims["m1"], m2=dims["m2"], T=float(doc["T"]), steps=steps,
        generator=generator, G=np.array(G), g=np.array(g), **kw,
    )


def load_model(path: str | Path) -> GameModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(doc)
