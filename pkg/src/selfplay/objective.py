"""Group values, both advantages, the quality augmentation, and the losses.

The policy-gradient terms use the stop-gradient ratio exp(logp - detach(logp)):
its value is identically 1, so the loss value reduces to the negated mean
advantage, while its gradient is the score-function form A * grad(log pi).
KL regularization to the frozen reference uses the nonnegative per-sequence
estimator k3 = r - log r - 1 with r = pi_ref(seq) / pi(seq).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, Mode, PlayoutBatch
from .numerics import Node, Tape
from .policy import ReferenceSnapshot, sequence_logprob_nodes


@dataclass(frozen=True)
class AdvantageSet:
    """Everything derived from one playout batch before loss construction."""

    group_values: np.ndarray       # (N,) mean task reward per group
    baseline: float                # mean of group_values
    quality_means: np.ndarray      # (N,) mean quality score per group
    solver_rewards: np.ndarray     # (N, G) rewards entering solver advantages
    challenger_scores: np.ndarray  # (N,) scores entering challenger advantages
    solver_adv: np.ndarray         # (N, G), zero-sum per group
    challenger_adv: np.ndarray     # (N,), zero-sum over the batch


def group_value(rewards) -> float:
    """Mean reward of one answer group."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ConfigError(f"group value needs >= 2 rewards, got {rewards.size}")
    return float(np.mean(rewards))


def solver_advantages(rewards, value: float) -> np.ndarray:
    """Per-answer reward minus the group value; zero-sum within the group."""
    return np.asarray(rewards, dtype=np.float64) - value


def challenger_advantages(group_values) -> np.ndarray:
    """Batch baseline minus each group value; positive for harder queries."""
    group_values = np.asarray(group_values, dtype=np.float64)
    if group_values.size < 2:
        raise ConfigError(f"challenger advantages need >= 2 groups, got {group_values.size}")
    return np.mean(group_values) - group_values


def apply_quality(batch: PlayoutBatch, mode: Mode) -> tuple[np.ndarray, np.ndarray]:
    """Rewards entering the advantage computation, per mode.

    In lsp the per-answer quality score is added to the solver reward and its
    group mean to the challenger score; in lsp-zero both players keep the raw
    task reward and the game stays exactly zero-sum.
    """
    rewards = np.array([g.task_rewards for g in batch.groups], dtype=np.float64)
    quality = np.array([g.quality_scores for g in batch.groups], dtype=np.float64)
    values = rewards.mean(axis=1)
    if mode is Mode.LSP:
        return rewards + quality, -values + quality.mean(axis=1)
    return rewards, -values


def compute_advantages(batch: PlayoutBatch, mode: Mode) -> AdvantageSet:
    rewards = np.array([g.task_rewards for g in batch.groups], dtype=np.float64)
    quality = np.array([g.quality_scores for g in batch.groups], dtype=np.float64)
    if rewards.shape[0] < 2 or rewards.shape[1] < 2:
        raise ConfigError(f"need N >= 2 and G >= 2, got shape {rewards.shape}")
    solver_rewards, challenger_scores = apply_quality(batch, mode)
    group_values = rewards.mean(axis=1)
    return AdvantageSet(
        group_values=group_values,
        baseline=float(np.mean(group_values)),
        quality_means=quality.mean(axis=1),
        solver_rewards=solver_rewards,
        challenger_scores=challenger_scores,
        solver_adv=solver_rewards - solver_rewards.mean(axis=1, keepdims=True),
        challenger_adv=challenger_scores - np.mean(challenger_scores),
    )


def kl_estimate_node(tape: Tape, logp: Node, ref_logp: np.ndarray) -> Node:
    """Per-sequence k3 estimate, differentiable through the current log-probs."""
    log_ratio = tape.sub(tape.const(ref_logp), logp)
    ratio = tape.exp(log_ratio)
    ones = tape.const(np.ones_like(np.asarray(ref_logp, dtype=np.float64)))
    return tape.sub(tape.sub(ratio, log_ratio), ones)


def kl_estimate(policy, reference: ReferenceSnapshot, prefix, tokens, temperature: float = 1.0) -> float:
    """k3 = r - log r - 1 for one sequence; >= 0, zero iff the log-probs match."""
    tape = Tape(policy.params)
    logp = policy.logprob_nodes(tape, [(prefix, tokens)], temperature)
    ref_logp = reference.sequence_logprobs([(prefix, tokens)], temperature)
    return float(kl_estimate_node(tape, logp, ref_logp).value[0])


@dataclass
class LossTerm:
    """One player's loss node plus the scalars worth logging."""

    node: Node
    pg: float                 # policy-gradient part of the loss value
    kl: float                 # beta-weighted KL part of the loss value
    kl_estimates: np.ndarray  # unweighted per-sequence k3 values


def _ratio_advantage_loss(
    tape: Tape,
    reference: ReferenceSnapshot,
    items,
    advantages: np.ndarray,
    beta: float,
    temperature: float,
    frozen_logp: np.ndarray | None,
) -> LossTerm:
    count = len(items)
    logp = sequence_logprob_nodes(tape, reference.arch, reference.vocab, items, temperature)
    # ratio pi / stop-grad(pi): with the on-policy detach the value is exactly
    # 1 and the gradient is A * grad(log pi).  Passing `frozen_logp` (the
    # log-probs at some fixed parameter point) instead makes the loss a real
    # function of the parameters with the identical gradient at that point,
    # which is what finite-difference checking needs.
    if frozen_logp is None:
        denominator = tape.detach(logp)
    else:
        denominator = tape.const(frozen_logp)
    ratio = tape.exp(tape.sub(logp, denominator))
    pg = tape.scale(tape.sum(tape.mul(ratio, tape.const(advantages))), -1.0 / count)
    ref_logp = reference.sequence_logprobs(items, temperature)
    k3 = kl_estimate_node(tape, logp, ref_logp)
    kl = tape.scale(tape.sum(k3), beta / count)
    return LossTerm(
        node=tape.add(pg, kl),
        pg=float(pg.value),
        kl=float(kl.value),
        kl_estimates=k3.value.copy(),
    )


def solver_items(batch: PlayoutBatch, vocab) -> list:
    """(prefix, sequence) pairs scored by the solver loss, in loss order."""
    return [
        (group.query.tokens + (vocab.sep,), answer.tokens)
        for group in batch.groups
        for answer in group.answers
    ]


def challenger_items(batch: PlayoutBatch, vocab) -> list:
    """(prefix, sequence) pairs scored by the challenger loss, in loss order."""
    return [((vocab.cp,), group.query.tokens) for group in batch.groups]


def solver_loss(
    tape: Tape,
    reference: ReferenceSnapshot,
    batch: PlayoutBatch,
    advantages: AdvantageSet,
    beta: float,
    temperature: float = 1.0,
    frozen_logp: np.ndarray | None = None,
) -> LossTerm:
    """-(1/NG) sum ratio * A_sol + beta * mean k3 over all answers."""
    items = solver_items(batch, reference.vocab)
    return _ratio_advantage_loss(
        tape, reference, items, advantages.solver_adv.reshape(-1), beta, temperature,
        frozen_logp,
    )


def challenger_loss(
    tape: Tape,
    reference: ReferenceSnapshot,
    batch: PlayoutBatch,
    advantages: AdvantageSet,
    beta: float,
    temperature: float = 1.0,
    frozen_logp: np.ndarray | None = None,
) -> LossTerm:
    """-(1/N) sum ratio * A_ch + beta * mean k3 over the CP-conditioned queries."""
    items = challenger_items(batch, reference.vocab)
    return _ratio_advantage_loss(
        tape, reference, items, advantages.challenger_adv, beta, temperature,
        frozen_logp,
    )


@dataclass(frozen=True)
class LossBreakdown:
    solver_pg: float
    solver_kl: float
    challenger_pg: float
    challenger_kl: float
    total: float


def total_loss(
    tape: Tape,
    solver: LossTerm,
    challenger: LossTerm | None,
    challenger_coef: float,
) -> tuple[Node, LossBreakdown]:
    """Weighted sum of the two player losses; challenger may be absent (grpo)."""
    if challenger_coef < 0:
        raise ConfigError(f"challenger coefficient must be >= 0, got {challenger_coef}")
    if challenger is None:
        node = solver.node
        breakdown = LossBreakdown(solver.pg, solver.kl, 0.0, 0.0, float(node.value))
    else:
        node = tape.add(solver.node, tape.scale(challenger.node, challenger_coef))
        breakdown = LossBreakdown(
            solver.pg, solver.kl, challenger.pg, challenger.kl, float(node.value)
        )
    return node, breakdown
