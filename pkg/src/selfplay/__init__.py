"""Desk-scale self-play RL over a synthetic verifiable token world.

A single autoregressive policy plays both challenger (query generator,
conditioned on a reserved prompt token) and solver (query answerer), trained
with group-relative policy gradients, KL regularization to a frozen
reference, and a deterministic interaction-quality self-reward.  A
data-based GRPO baseline and a pairwise win-rate harness complete the
experiment loop.
"""

from .core import (
    Mode,
    PlayoutBatch,
    PlayoutGroup,
    Role,
    RunConfig,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    load_config,
    parse_config,
    save_config,
    seeded_stream,
    validate_batch,
)
from .harness import WinRateReport, evaluate_win_rate, export_curves, gradient_check
from .numerics import (
    Gradient,
    OptimizerState,
    ParameterVector,
    Tape,
    apply_update,
    finite_diff_check,
    init_optimizer,
)
from .objective import (
    AdvantageSet,
    LossBreakdown,
    apply_quality,
    challenger_advantages,
    challenger_loss,
    compute_advantages,
    group_value,
    kl_estimate,
    solver_advantages,
    solver_loss,
    total_loss,
)
from .policy import (
    Policy,
    PolicyArchitecture,
    ReferenceSnapshot,
    SampledSequence,
    load_checkpoint,
    make_policy,
    save_checkpoint,
    snapshot_reference,
)
from .task_world import (
    TaskGrammar,
    expected_answer,
    generate_dataset,
    held_out_set,
    parse_query,
    quality_score,
    task_reward,
)
from .trainer import (
    EpochReport,
    TrainerState,
    evaluate_heldout,
    make_trainer,
    run,
    train_epoch,
    train_grpo_epoch,
)

__all__ = [name for name in dir() if not name.startswith("_")]
