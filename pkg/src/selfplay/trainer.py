"""The training loop: reference snapshot, seeded epochs, one update per batch.

Per epoch the challenger samples N queries from the CP prefix, the solver
samples G answers per query, rewards and quality scores are computed on the
playouts, and a single optimizer step is taken on the combined loss.  The
grpo baseline shares every component except query sourcing: queries come
from a fixed dataset and the challenger loss is skipped.

All randomness flows through per-(seed, label) streams with the epoch index
embedded in the label, so runs are bit-reproducible and resumable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    Mode,
    PlayoutBatch,
    PlayoutGroup,
    Role,
    RunConfig,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    save_config,
    seeded_stream,
    validate_batch,
)
from .numerics import (
    NumericalFailure,
    OptimizerState,
    Tape,
    apply_update,
    init_optimizer,
)
from .objective import (
    LossTerm,
    challenger_loss,
    compute_advantages,
    solver_loss,
    total_loss,
)
from .policy import (
    CheckpointError,
    Policy,
    PolicyArchitecture,
    ReferenceSnapshot,
    load_checkpoint,
    make_policy,
    save_checkpoint,
    snapshot_reference,
)
from .task_world import (
    TaskGrammar,
    held_out_set,
    load_dataset,
    parse_query,
    quality_score,
    task_reward,
)

METRICS_KEYS = (
    "epoch",
    "mode",
    "mean_solver_reward",
    "mean_quality",
    "mean_challenger_score",
    "loss_total",
    "loss_solver_pg",
    "loss_solver_kl",
    "loss_challenger_pg",
    "loss_challenger_kl",
    "kl_mean",
    "wellformed_rate",
    "wall_ms",
)


class EpochNumericalError(RuntimeError):
    """An epoch hit non-finite numbers; parameters were left at pre-epoch values."""

    def __init__(self, epoch: int, cause: str):
        super().__init__(f"epoch {epoch}: {cause}")
        self.epoch = epoch


@dataclass
class EpochReport:
    epoch: int
    mode: Mode
    mean_solver_reward: float
    mean_quality: float
    mean_challenger_score: float
    loss_total: float
    loss_solver_pg: float
    loss_solver_kl: float
    loss_challenger_pg: float
    loss_challenger_kl: float
    kl_solver_mean: float
    kl_challenger_mean: float
    kl_mean: float
    wellformed_rate: float
    wall_ms: float

    def as_metrics(self) -> dict:
        record = {key: getattr(self, key) for key in METRICS_KEYS if key != "mode"}
        record["mode"] = self.mode.value
        return {key: record[key] for key in METRICS_KEYS}


@dataclass
class TrainerState:
    policy: Policy
    reference: ReferenceSnapshot
    opt_state: OptimizerState
    config: RunConfig
    grammar: TaskGrammar
    epoch: int = 0
    metrics_sink: object = None          # callable(dict) or None
    reward_fn: object = task_reward      # injectable for tests
    quality_fn: object = quality_score
    solver_loss_weight: float = 1.0      # test hook; 0 masks the solver term
    last_gradient: np.ndarray | None = None


def reference_hash(reference: ReferenceSnapshot) -> str:
    return sha256(reference.params.values.tobytes()).hexdigest()


def make_trainer(
    config: RunConfig,
    init: Policy | None = None,
    reference: Policy | None = None,
    metrics_sink=None,
) -> TrainerState:
    """Build run state; the reference is snapshotted once, here."""
    config.validate()
    vocab = build_vocabulary(config.ordinary_tokens)
    arch = PolicyArchitecture(
        vocab_size=vocab.size,
        embed_dim=config.embed_dim,
        context_window=config.context_window,
        hidden_dim=config.hidden_dim,
    )
    if init is None:
        policy = make_policy(vocab, arch, config.seed)
    else:
        if init.arch != arch:
            raise CheckpointError(
                f"checkpoint architecture {init.arch} does not match config {arch}"
            )
        policy = Policy(arch=arch, vocab=vocab, params=init.params.copy())
    ref_source = policy if reference is None else reference
    if ref_source.arch != arch:
        raise CheckpointError("reference checkpoint architecture does not match config")
    return TrainerState(
        policy=policy,
        reference=snapshot_reference(ref_source if reference is not None else policy),
        opt_state=init_optimizer(config.optimizer, arch.layout()),
        config=config,
        grammar=TaskGrammar(opcodes=config.opcodes),
        metrics_sink=metrics_sink,
    )


def _answer_queries(state: TrainerState, queries, epoch: int) -> PlayoutBatch:
    cfg = state.config
    vocab = state.policy.vocab
    prefixes, streams = [], []
    for i, q in enumerate(queries):
        for j in range(cfg.group_size):
            prefixes.append(q.tokens + (vocab.sep,))
            streams.append(seeded_stream(cfg.seed, f"sol/{epoch}/{i}/{j}"))
    answers = state.policy.sample_many(
        prefixes, Role.ANSWER, cfg.temperature, cfg.max_len, streams
    )
    groups = []
    for i, q in enumerate(queries):
        group_answers = tuple(
            answers[i * cfg.group_size + j].sequence for j in range(cfg.group_size)
        )
        rewards = tuple(state.reward_fn(vocab, q, a) for a in group_answers)
        quality = tuple(state.quality_fn(vocab, q, a)[1] for a in group_answers)
        groups.append(
            PlayoutGroup(
                query=q, answers=group_answers,
                task_rewards=rewards, quality_scores=quality,
            )
        )
    return PlayoutBatch(groups=tuple(groups))


def sample_playout_batch(state: TrainerState, epoch: int | None = None) -> PlayoutBatch:
    """One self-play rollout: challenger queries, then solver answer groups."""
    cfg = state.config
    epoch = state.epoch + 1 if epoch is None else epoch
    vocab = state.policy.vocab
    streams = [seeded_stream(cfg.seed, f"ch/{epoch}/{i}") for i in range(cfg.n_queries)]
    sampled = state.policy.sample_many(
        [(vocab.cp,)] * cfg.n_queries, Role.QUERY, cfg.temperature, cfg.max_len, streams
    )
    return _answer_queries(state, [s.sequence for s in sampled], epoch)


def sample_grpo_batch(state: TrainerState, dataset, epoch: int | None = None) -> PlayoutBatch:
    """Dataset-sourced rollout: queries drawn uniformly, answers as in self-play."""
    cfg = state.config
    epoch = state.epoch + 1 if epoch is None else epoch
    if not dataset:
        raise ConfigError("grpo training needs a nonempty dataset")
    picks = seeded_stream(cfg.seed, f"data/{epoch}").integers(0, len(dataset), size=cfg.n_queries)
    return _answer_queries(state, [dataset[int(i)] for i in picks], epoch)


def _update_from_batch(state: TrainerState, batch: PlayoutBatch, epoch: int, t0: float) -> EpochReport:
    cfg = state.config
    violation = validate_batch(batch, cfg)
    if violation is not None:
        raise ConfigError(f"rollout produced an invalid batch: {violation}")
    mode = cfg.mode
    adv = compute_advantages(batch, mode)
    try:
        tape = Tape(state.policy.params)
        sol = solver_loss(tape, state.reference, batch, adv, cfg.kl_beta, cfg.temperature)
        if state.solver_loss_weight != 1.0:
            w = state.solver_loss_weight
            sol = LossTerm(tape.scale(sol.node, w), sol.pg * w, sol.kl * w, sol.kl_estimates)
        if mode is Mode.GRPO:
            ch = None
        else:
            ch = challenger_loss(tape, state.reference, batch, adv, cfg.kl_beta, cfg.temperature)
        node, breakdown = total_loss(tape, sol, ch, cfg.challenger_coef)
        grad = tape.backward(node)
        new_params, new_opt = apply_update(
            state.policy.params, grad, state.opt_state, cfg.step_size
        )
    except NumericalFailure as exc:
        raise EpochNumericalError(epoch, str(exc)) from exc
    state.policy.params = new_params
    state.opt_state = new_opt
    state.last_gradient = grad.values
    state.epoch = epoch

    vocab = state.policy.vocab
    quality = np.array([g.quality_scores for g in batch.groups])
    kl_solver = float(np.mean(sol.kl_estimates))
    if ch is None:
        kl_challenger = 0.0
        kl_mean = kl_solver
    else:
        kl_challenger = float(np.mean(ch.kl_estimates))
        pooled = np.concatenate([sol.kl_estimates, ch.kl_estimates])
        kl_mean = float(np.mean(pooled))
    report = EpochReport(
        epoch=epoch,
        mode=mode,
        mean_solver_reward=float(np.mean(adv.group_values)),
        mean_quality=float(np.mean(quality)),
        mean_challenger_score=float(np.mean(adv.challenger_scores)),
        loss_total=breakdown.total,
        loss_solver_pg=breakdown.solver_pg,
        loss_solver_kl=breakdown.solver_kl,
        loss_challenger_pg=breakdown.challenger_pg,
        loss_challenger_kl=breakdown.challenger_kl,
        kl_solver_mean=kl_solver,
        kl_challenger_mean=kl_challenger,
        kl_mean=kl_mean,
        wellformed_rate=float(
            np.mean([parse_query(vocab, g.query).well_formed for g in batch.groups])
        ),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    if state.metrics_sink is not None:
        state.metrics_sink(report.as_metrics())
    return report


def train_epoch(state: TrainerState) -> EpochReport:
    """One self-play epoch: rollout, rewards, advantages, loss, single update."""
    if state.config.mode not in (Mode.LSP, Mode.LSP_ZERO):
        raise ConfigError(f"train_epoch handles lsp/lsp-zero, not {state.config.mode.value}")
    t0 = time.perf_counter()
    epoch = state.epoch + 1
    batch = sample_playout_batch(state, epoch)
    return _update_from_batch(state, batch, epoch, t0)


def train_grpo_epoch(state: TrainerState, dataset) -> EpochReport:
    """One baseline epoch: dataset queries, solver-only update, KL retained."""
    if state.config.mode is not Mode.GRPO:
        raise ConfigError(f"train_grpo_epoch requires grpo mode, got {state.config.mode.value}")
    t0 = time.perf_counter()
    epoch = state.epoch + 1
    batch = sample_grpo_batch(state, dataset, epoch)
    return _update_from_batch(state, batch, epoch, t0)


def evaluate_heldout(
    policy: Policy,
    queries,
    temperature: float,
    max_len: int,
    seed: int,
    label: str = "heval",
    reward_fn=task_reward,
) -> float:
    """Mean task reward of one near-greedy answer per held-out query.

    Pure: draws come from their own stream labels and never advance training
    streams.
    """
    vocab = policy.vocab
    prefixes = [q.tokens + (vocab.sep,) for q in queries]
    streams = [seeded_stream(seed, f"{label}/{i}") for i in range(len(queries))]
    answers = policy.sample_many(prefixes, Role.ANSWER, temperature, max_len, streams)
    return float(np.mean([reward_fn(vocab, q, a.sequence) for q, a in zip(queries, answers)]))


def save_run_state(path, state: TrainerState) -> None:
    """Sidecar with optimizer moments and epoch, for bit-identical resume."""
    opt = state.opt_state
    np.savez(
        path,
        params=state.policy.params.values,
        reference=state.reference.params.values,
        epoch=state.epoch,
        opt_kind=opt.kind,
        opt_step=opt.step,
        opt_m=opt.m if opt.m is not None else np.zeros(0),
        opt_v=opt.v if opt.v is not None else np.zeros(0),
    )


def load_run_state(path, state: TrainerState) -> TrainerState:
    """Restore params, reference, optimizer state, and epoch into fresh run state."""
    data = np.load(path, allow_pickle=False)
    layout = state.policy.params.layout
    if data["params"].size != layout.total:
        raise CheckpointError(f"{path}: run state does not match the configured architecture")
    state.policy.params = type(state.policy.params)(data["params"].copy(), layout)
    frozen = type(state.policy.params)(data["reference"].copy(), layout)
    frozen.values.setflags(write=False)
    state.reference = ReferenceSnapshot(state.policy.arch, state.policy.vocab, frozen)
    kind = str(data["opt_kind"])
    state.opt_state = OptimizerState(
        kind=kind,
        step=int(data["opt_step"]),
        m=data["opt_m"].copy() if kind == "adam" else None,
        v=data["opt_v"].copy() if kind == "adam" else None,
    )
    state.epoch = int(data["epoch"])
    return state


@dataclass
class RunResult:
    final_checkpoint: Path
    metrics_path: Path
    eval_path: Path
    heldout: list[tuple[int, float]]
    state: TrainerState


def run(
    config: RunConfig,
    out_dir,
    init_checkpoint=None,
    reference_checkpoint=None,
    resume_state=None,
) -> RunResult:
    """Full training run: T epochs, periodic checkpoints, metrics and eval logs.

    `init_checkpoint` starts from prior parameters (the from-baseline regime);
    the reference snapshot is then taken from the loaded parameters unless
    `reference_checkpoint` points somewhere else.  `resume_state` continues an
    interrupted run bit-identically from its sidecar.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.cfg", config)

    init = load_checkpoint(init_checkpoint) if init_checkpoint else None
    reference = load_checkpoint(reference_checkpoint) if reference_checkpoint else None

    metrics_path = out / "metrics.jsonl"
    eval_path = out / "eval.jsonl"
    mode_jsonl = "w" if resume_state is None else "a"

    dataset = None
    if config.mode is Mode.GRPO:
        vocab_for_data = build_vocabulary(config.ordinary_tokens)
        dataset = load_dataset(config.dataset, vocab_for_data)
        if not dataset:
            raise ConfigError(f"dataset {config.dataset} is empty")

    heldout_series: list[tuple[int, float]] = []
    with open(metrics_path, mode_jsonl, encoding="utf-8") as metrics_file, open(
        eval_path, mode_jsonl, encoding="utf-8"
    ) as eval_file:

        def sink(record: dict) -> None:
            metrics_file.write(json.dumps(record) + "\n")

        state = make_trainer(config, init=init, reference=reference, metrics_sink=sink)
        if resume_state is not None:
            load_run_state(resume_state, state)
        heldout = held_out_set(
            state.policy.vocab, state.grammar, config.eval_size,
            seeded_stream(config.seed, "eval"),
            exclude=dataset or (),
        )

        def evaluate(epoch: int) -> None:
            score = evaluate_heldout(
                state.policy, heldout, config.eval_temperature, config.max_len,
                config.seed, label=f"heval/{epoch}", reward_fn=state.reward_fn,
            )
            heldout_series.append((epoch, score))
            eval_file.write(json.dumps({"epoch": epoch, "heldout_reward": score,
                                        "n": len(heldout)}) + "\n")

        evaluate(state.epoch)
        for _ in range(state.epoch, config.epochs):
            try:
                if config.mode is Mode.GRPO:
                    train_grpo_epoch(state, dataset)
                else:
                    train_epoch(state)
            except EpochNumericalError as exc:
                aborted = {key: None for key in METRICS_KEYS}
                aborted["epoch"] = exc.epoch
                aborted["mode"] = config.mode.value
                sink(aborted)
                state.epoch = exc.epoch  # parameters stay at pre-epoch values
            if config.eval_every > 0 and state.epoch % config.eval_every == 0:
                evaluate(state.epoch)
            if (
                config.checkpoint_every > 0
                and state.epoch % config.checkpoint_every == 0
                and state.epoch < config.epochs
            ):
                save_checkpoint(out / f"ckpt_{state.epoch:06d}.bin", state.policy)
                save_run_state(out / f"state_{state.epoch:06d}.npz", state)
        if not heldout_series or heldout_series[-1][0] != state.epoch:
            evaluate(state.epoch)
        final = out / "ckpt_final.bin"
        save_checkpoint(final, state.policy)
        save_run_state(out / "state_final.npz", state)
    return RunResult(
        final_checkpoint=final,
        metrics_path=metrics_path,
        eval_path=eval_path,
        heldout=heldout_series,
        state=state,
    )
