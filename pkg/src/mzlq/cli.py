"""Command-line entry point: ``mzlq {validate,certify,solve,saddle-check,example}``.

Exit codes: 0 ok, 1 verification failed, 2 parse or configuration error,
3 Riccati constraint violated, 4 Riccati blow-up.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .benchmarks import three_regime_game
from .chain import path_seeds, sample_path
from .game import (
    GameSolution,
    dumps,
    fbsde_residual,
    random_perturbations,
    saddle_probe,
    solve_game,
    ucc_certificate,
)
from .model import GameModel, ProblemFileError, load_model, validate
from .riccati import BLOW_UP, CONSTRAINT_VIOLATED, DEFAULT_DELTA_MIN, DEFAULT_P_MAX
from .sim import NoisePath, simulate, write_trajectories

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_PARSE = 2
EXIT_CONSTRAINT = 3
EXIT_BLOWUP = 4

MIN_STEPS = 10
MIN_SADDLE_PATHS = 100


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: Path | None = None
    steps: int | None = None
    delta_min: float = DEFAULT_DELTA_MIN
    p_max: float = DEFAULT_P_MAX
    paths: int = 10_000
    seed: int = 0
    workers: int = 1
    perturbations: int = 8
    out: Path | None = None
    dump_trajectories: int = 0
    x: tuple[float, ...] | None = None
    regime: int = 1
    gain_shift: float = 0.0
    residual_paths: int = 100

    def check(self, command: str) -> None:
        if self.steps is not None and self.steps < MIN_STEPS:
            raise ConfigError(f"--steps must be at least {MIN_STEPS}")
        if command in ("saddle-check", "example") and self.paths < MIN_SADDLE_PATHS:
            raise ConfigError(f"--paths must be at least {MIN_SADDLE_PATHS} for {command}")
        if self.workers < 1:
            raise ConfigError("--workers must be positive")
        if self.perturbations < 2 or self.perturbations % 2:
            raise ConfigError("--perturbations must be a positive even number")
        if not self.delta_min > 0 or not self.p_max > 0:
            raise ConfigError("--delta-min and --p-max must be positive")
        if self.dump_trajectories < 0 or self.residual_paths < 0:
            raise ConfigError("path counts must be non-negative")


def fmt(v) -> str:
    """Human-readable number with 9 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return "-" if v is None else str(v)


def table(rows: list[tuple], header: tuple | None = None) -> str:
    rows = [tuple(fmt(c) for c in r) for r in rows]
    if header:
        rows = [tuple(header)] + rows
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def load(cfg: RunConfig) -> GameModel:
    if cfg.problem is None:
        raise ConfigError("--problem is required")
    model = load_model(cfg.problem)
    return _with_steps(model, cfg.steps)


def _with_steps(model: GameModel, steps: int | None) -> GameModel:
    if steps is None or steps == model.steps:
        return model
    if model.time_varying:
        raise ConfigError("--steps cannot override the grid of time-varying coefficients")
    return model.replace(steps=steps)


def _initial(cfg: RunConfig, model: GameModel) -> np.ndarray:
    if not 1 <= cfg.regime <= model.L:
        raise ConfigError(f"--regime must be in 1..{model.L}")
    if cfg.x is None:
        return np.ones(model.n)
    if len(cfg.x) != model.n:
        raise ConfigError(f"--x needs {model.n} values")
    return np.array(cfg.x, dtype=float)


def _require_valid(model: GameModel) -> None:
    violations = validate(model)
    if violations:
        raise ConfigError("invalid problem: " + "; ".join(str(v) for v in violations))


def _outdir(cfg: RunConfig, default: str | None = None) -> Path | None:
    out = cfg.out if cfg.out is not None else (Path(default) if default else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------

def cmd_validate(cfg: RunConfig) -> int:
    model = load(cfg)
    violations = validate(model)
    for v in violations:
        print(f"violation: {v}")
    if violations:
        return EXIT_VERIFY
    print(f"valid: L={model.L} n={model.n} m1={model.m1} m2={model.m2} T={fmt(model.T)} steps={model.steps}")
    return EXIT_OK


def _certificate_table(cert) -> str:
    rows = [(k, p.c, p.gamma, p.mu, p.n, p.lam, p.certified) for k, p in cert.players.items()]
    return f"a = {fmt(cert.a)}\n" + table(rows, ("player", "c", "gamma", "mu", "n", "lambda", "certified"))


def cmd_certify(cfg: RunConfig) -> int:
    model = load(cfg)
    _require_valid(model)
    cert = ucc_certificate(model)
    print(_certificate_table(cert), file=sys.stderr)
    print(cert.to_json())
    out = _outdir(cfg)
    if out is not None:
        cert.to_json(out / "certificate.json")
    return EXIT_OK if cert.certified else EXIT_VERIFY


def _status_exit(status: str) -> int:
    return {CONSTRAINT_VIOLATED: EXIT_CONSTRAINT, BLOW_UP: EXIT_BLOWUP}.get(status, EXIT_OK)


def _solve_stage(model: GameModel, cfg: RunConfig, out: Path | None) -> tuple[GameSolution, int, dict]:
    """Solve, write riccati/eta/gains/summary outputs, and return the exit code."""
    sol = solve_game(model, delta_min=cfg.delta_min, p_max=cfg.p_max)
    ric = sol.riccati
    summary = {
        "problem": {"L": model.L, "n": model.n, "m1": model.m1, "m2": model.m2, "T": model.T,
                    "steps": model.steps},
        "delta_min": cfg.delta_min,
        "p_max": cfg.p_max,
        "riccati": ric.summary(),
    }
    summary["riccati"]["half_step_node_diff"] = ric.extras.get("half_step_node_diff")
    code = _status_exit(ric.status)
    if ric.solved:
        comp = sol.comparison
        summary["single_player"] = [s.summary() for s in sol.single]
        summary["comparison"] = comp.to_dict() if comp is not None else None
        summary["gain_residual"] = sol.strategy.gain_residual
        summary["offset_residual"] = sol.offset.residual
        x = _initial(cfg, model)
        summary["value"] = {"x": x.tolist(), "regime": cfg.regime, "value": sol.value(x, cfg.regime)}
        summary["P0"] = ric.P[0].tolist()
        if comp is None or not comp.passed:
            code = EXIT_VERIFY
    summary["passed"] = code == EXIT_OK
    if out is not None:
        ric.to_csv(out / "riccati.csv")
        if ric.solved:
            sol.eta.to_csv(out / "eta.csv")
            sol.strategy.to_csv(out / "gains.csv")
        (out / "summary.json").write_text(dumps(summary) + "\n")
    return sol, code, summary


def _solve_table(summary: dict) -> str:
    r = summary["riccati"]
    rows = [("status", r["status"]), ("min delta1", r["min_delta1"]), ("min delta2", r["min_delta2"]),
            ("residual", r["residual"])]
    if r["status"] != "solved":
        rows += [("failure time", r["failure_time"]), ("failure regime", r["failure_regime"]),
                 ("message", r["message"])]
    else:
        comp = summary["comparison"]
        rows += [("comparison", None if comp is None else comp["passed"]),
                 ("gain residual", summary["gain_residual"]), ("value", summary["value"]["value"])]
        rows += [(f"P(0,{i + 1})", np.asarray(p).ravel()[0] if np.size(p) == 1 else str(np.round(p, 9).tolist()))
                 for i, p in enumerate(summary["P0"])]
    return table(rows)


def cmd_solve(cfg: RunConfig) -> int:
    model = load(cfg)
    _require_valid(model)
    _initial(cfg, model)
    _, code, summary = _solve_stage(model, cfg, _outdir(cfg, "out"))
    print(_solve_table(summary))
    return code


def _saddle_stage(model: GameModel, sol: GameSolution, cfg: RunConfig, out: Path | None):
    x = _initial(cfg, model)
    strategy = sol.strategy
    if cfg.gain_shift:
        strategy = strategy.shifted(1, gain=cfg.gain_shift)
    ref = sol.value(x, cfg.regime)
    perts = random_perturbations(model, cfg.perturbations, cfg.seed)
    report = saddle_probe(model, strategy, x, cfg.regime, cfg.paths, cfg.seed, perts, workers=cfg.workers,
                          value_ref=ref)
    if out is not None:
        report.to_json(out / "saddle.json")
        if cfg.dump_trajectories:
            trajs = []
            for j in range(min(cfg.dump_trajectories, cfg.paths)):
                chain_ss, noise_ss = path_seeds(cfg.seed, j)
                path = sample_path(model.generator, cfg.regime, model.T, chain_ss)
                trajs.append(simulate(model, strategy, path, NoisePath.sample(model.grid, noise_ss), x, cfg.regime))
            write_trajectories(out / "trajectories.csv", trajs)
    return report


def _saddle_table(report) -> str:
    rows = [("center", "-", report.center.mean, report.center.se, "-", "-", "-")]
    for j, a in enumerate(report.arms):
        p = a.perturbation
        rows.append((f"arm {j + 1}", f"{p.player}/{p.kind}", a.estimate.mean, a.estimate.se, a.diff_mean,
                     a.diff_se, a.passed))
    head = ("arm", "player", "mean", "se", "diff", "diff se", "pass")
    lines = [table(rows, head), f"value formula: {fmt(report.value)}  agrees: {fmt(report.value_agrees)}",
             f"saddle check: {'pass' if report.passed else 'FAIL'}"]
    return "\n".join(lines)


def cmd_saddle_check(cfg: RunConfig) -> int:
    model = load(cfg)
    _require_valid(model)
    _initial(cfg, model)
    out = _outdir(cfg, "out")
    sol, code, summary = _solve_stage(model, cfg, out)
    if not sol.solved:
        print(_solve_table(summary))
        return code
    report = _saddle_stage(model, sol, cfg, out)
    print(_saddle_table(report))
    return EXIT_OK if report.passed else EXIT_VERIFY


def _residual_stage(model: GameModel, sol: GameSolution, cfg: RunConfig) -> dict:
    x = _initial(cfg, model)
    worst, worst_ratio = 0.0, 0.0
    for j in range(cfg.residual_paths):
        chain_ss, noise_ss = path_seeds(cfg.seed + 1, j)
        path = sample_path(model.generator, cfg.regime, model.T, chain_ss)
        noise = NoisePath.sample(model.grid, noise_ss)
        r, traj = fbsde_residual(model, sol.riccati, sol.eta, sol.strategy, path, noise, x, cfg.regime,
                                 return_trajectory=True)
        worst = max(worst, r)
        worst_ratio = max(worst_ratio, r / (1.0 + float(np.max(np.abs(traj.X)))))
    return {"paths": cfg.residual_paths, "max_residual": worst, "max_scaled_residual": worst_ratio,
            "passed": worst_ratio <= 1e-6}


def cmd_example(cfg: RunConfig) -> int:
    """Full pipeline on the built-in three-regime scalar game."""
    model = three_regime_game(steps=cfg.steps or 1000)
    out = _outdir(cfg, "example_out")
    model.to_json(out / "problem.json")
    stages: dict[str, bool] = {}

    violations = validate(model)
    stages["validate"] = not violations

    cert = ucc_certificate(model)
    cert.to_json(out / "certificate.json")
    stages["certify"] = cert.certified
    print(_certificate_table(cert))

    sol, code, summary = _solve_stage(model, cfg, out)
    stages["solve"] = code == EXIT_OK
    print(_solve_table(summary))
    if not sol.solved:
        _write_stages(out, stages)
        return code

    res = _residual_stage(model, sol, cfg)
    (out / "stationarity.json").write_text(dumps(res) + "\n")
    stages["stationarity"] = res["passed"]
    print(f"stationarity residual: {fmt(res['max_scaled_residual'])} over {res['paths']} paths")

    report = _saddle_stage(model, sol, cfg, out)
    stages["saddle"] = report.passed
    print(_saddle_table(report))
    _write_stages(out, stages)
    print(table([(k, v) for k, v in stages.items()], ("stage", "pass")))
    return EXIT_OK if all(stages.values()) else EXIT_VERIFY


def _write_stages(out: Path, stages: dict) -> None:
    (out / "stages.json").write_text(dumps(stages) + "\n")


COMMANDS = {
    "validate": cmd_validate,
    "certify": cmd_certify,
    "solve": cmd_solve,
    "saddle-check": cmd_saddle_check,
    "example": cmd_example,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mzlq", description="Regime-switching zero-sum LQ games.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name != "example":
            p.add_argument("--problem", type=Path, required=True, help="problem JSON file")
        p.add_argument("--steps", type=int, help="override the grid size K (time-invariant data only)")
        p.add_argument("--out", type=Path, help="output directory")
        if name in ("solve", "saddle-check", "example"):
            p.add_argument("--delta-min", type=float, default=DEFAULT_DELTA_MIN)
            p.add_argument("--p-max", type=float, default=DEFAULT_P_MAX)
            p.add_argument("--x", type=float, nargs="+", help="initial state (default: all ones)")
            p.add_argument("--regime", type=int, default=1, help="initial regime, 1-based")
        if name in ("saddle-check", "example"):
            p.add_argument("--paths", type=int, default=10_000)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--perturbations", type=int, default=8, help="perturbations per player (even)")
            p.add_argument("--dump-trajectories", type=int, nargs="?", const=10, default=0, metavar="N",
                           help="write the first N center paths to trajectories.csv")
        if name == "saddle-check":
            p.add_argument("--gain-shift", type=float, default=0.0, help="add to player 1's feedback gain")
        if name == "example":
            p.add_argument("--residual-paths", type=int, default=100)
    return parser


def parse_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    for key, val in vars(args).items():
        if key == "command":
            continue
        if key == "x" and val is not None:
            val = tuple(val)
        setattr(cfg, key, val)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors already
        return int(exc.code or 0)
    cfg = parse_config(args)
    try:
        cfg.check(args.command)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ProblemFileError, OSError) as exc:
        _err(str(exc))
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
