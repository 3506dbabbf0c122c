"""Regime-switching zero-sum stochastic LQ games: Riccati solver, feedback
saddle strategies and Monte-Carlo verification."""
from .affine import EtaSolution, FeedbackOffset, feedback_offset, solve_eta, value
from .benchmarks import three_regime_game, zero_game
from .chain import ChainPath, compensated_counts, sample_path, stationary_distribution
from .game import (
    FeedbackStrategy,
    SaddleReport,
    UccCertificate,
    build_strategy,
    cost,
    fbsde_residual,
    saddle_probe,
    solve_game,
    ucc_certificate,
)
from .model import GameModel, ProblemFileError, TimeGrid, load_model, model_from_dict, stack, validate
from .riccati import (
    IndefinitenessError,
    RiccatiSolution,
    assemble,
    block_inverse,
    comparison_check,
    lifted_rhs,
    pinv,
    solve_cdre,
    solve_single_player,
)
from .sim import ControlLaw, NoisePath, Trajectory, mc_estimate, simulate

__version__ = "0.1.0"
