"""CLI entry points, pairwise win-rate evaluation, and metrics export.

Win rates compare two checkpoints by sampling one near-greedy answer per
model per evaluation query and judging with the task reward; ties count 0.5,
so a model duelling itself lands at exactly 0.5.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    Role,
    RunConfig,
    TokenSequence,
    build_vocabulary,
    load_config,
    seeded_stream,
)
from .numerics import Tape, finite_diff_check
from .objective import (
    challenger_items,
    challenger_loss,
    compute_advantages,
    solver_items,
    solver_loss,
)
from .policy import sequence_logprobs
from .policy import (
    CheckpointError,
    Policy,
    PolicyArchitecture,
    load_checkpoint,
    make_policy,
)
from .task_world import (
    TaskGrammar,
    generate_dataset,
    held_out_set,
    parse_query,
    save_dataset,
    task_reward,
)
from .trainer import METRICS_KEYS, make_trainer, run, sample_playout_batch

DEFAULT_EVAL_MAX_LEN = 24


@dataclass(frozen=True)
class WinRateReport:
    wins: int
    losses: int
    ties: int
    n: int
    win_rate: float
    per_opcode: dict[str, dict[str, float]]
    eval_seed: int
    eval_n: int

    def as_dict(self) -> dict:
        return {
            "wins": self.wins, "losses": self.losses, "ties": self.ties,
            "n": self.n, "win_rate": self.win_rate,
            "per_opcode": self.per_opcode,
            "eval_seed": self.eval_seed, "eval_n": self.eval_n,
        }


def duel(answer_a, answer_b, queries, vocab, seed: int, reward_fn=task_reward) -> WinRateReport:
    """Score two answer functions query by query; ties count as half a win.

    `answer_a(query, index)` returns a TokenSequence; the index lets callers
    key deterministic per-query streams.
    """
    if not queries:
        raise ConfigError("evaluation needs a nonempty query set")
    wins = losses = ties = 0
    counts: dict[str, dict[str, float]] = {}
    for i, q in enumerate(queries):
        ra = reward_fn(vocab, q, answer_a(q, i))
        rb = reward_fn(vocab, q, answer_b(q, i))
        opcode = parse_query(vocab, q).opcode or "?"
        bucket = counts.setdefault(opcode, {"wins": 0, "ties": 0, "losses": 0})
        if ra > rb:
            wins += 1
            bucket["wins"] += 1
        elif ra < rb:
            losses += 1
            bucket["losses"] += 1
        else:
            ties += 1
            bucket["ties"] += 1
    n = len(queries)
    for bucket in counts.values():
        total = bucket["wins"] + bucket["ties"] + bucket["losses"]
        bucket["win_rate"] = (bucket["wins"] + 0.5 * bucket["ties"]) / total
    return WinRateReport(
        wins=wins, losses=losses, ties=ties, n=n,
        win_rate=(wins + 0.5 * ties) / n,
        per_opcode=counts, eval_seed=seed, eval_n=n,
    )


def _policy_answerer(policy: Policy, temperature: float, max_len: int, seed: int):
    vocab = policy.vocab

    def answer(q: TokenSequence, i: int) -> TokenSequence:
        stream = seeded_stream(seed, f"wr/{i}")
        sampled = policy.sample_sequence(
            q.tokens + (vocab.sep,), Role.ANSWER, temperature, max_len, stream
        )
        return sampled.sequence

    return answer


def evaluate_win_rate(
    policy_a: Policy,
    policy_b: Policy,
    queries,
    temperature: float = 0.01,
    seed: int = 0,
    max_len: int = DEFAULT_EVAL_MAX_LEN,
) -> WinRateReport:
    """Near-greedy pairwise comparison on a shared evaluation set.

    Both models consume identically-keyed per-query streams, so a model
    evaluated against itself ties on every query.
    """
    if policy_a.arch != policy_b.arch:
        raise CheckpointError("win-rate evaluation needs checkpoints of the same architecture")
    return duel(
        _policy_answerer(policy_a, temperature, max_len, seed),
        _policy_answerer(policy_b, temperature, max_len, seed),
        queries, policy_a.vocab, seed,
    )


@dataclass(frozen=True)
class CurveExport:
    columns: tuple[str, ...]
    rows: list[tuple]
    warnings: list[str]


def export_curves(metrics_path, csv_path=None) -> CurveExport:
    """Metrics JSONL -> fixed-schema rows; bad lines become warnings, not errors."""
    rows, warnings = [], []
    text = Path(metrics_path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
            rows.append(tuple(record[key] for key in METRICS_KEYS))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            warnings.append(f"line {lineno}: {exc.__class__.__name__}: {exc}")
    export = CurveExport(columns=METRICS_KEYS, rows=rows, warnings=warnings)
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(export.columns)
            for row in export.rows:
                writer.writerow(["" if v is None else v for v in row])
    return export


GRADCHECK_CONFIG = RunConfig(
    n_queries=3,
    group_size=4,
    epochs=0,
    embed_dim=4,
    context_window=4,
    hidden_dim=8,
    max_len=10,
    eval_size=4,
)


def gradient_check(seed: int, betas=(0.0, 0.05), n_coords: int = 40, step: float = 1e-5) -> float:
    """Max relative error of both loss gradients against central differences.

    Runs on a few-hundred-parameter policy with a real sampled playout batch,
    frozen before checking so the loss is deterministic in the parameters.
    The ratio denominator is pinned to the base-point log-probs: the on-policy
    detach makes the loss value constant (that is the stop-gradient trick), so
    only the pinned form exposes the gradient to finite differences; at the
    base point the two forms have identical gradients.
    """
    config = replace(GRADCHECK_CONFIG, seed=seed)
    state = make_trainer(config)
    batch = sample_playout_batch(state, epoch=1)
    adv = compute_advantages(batch, config.mode)
    reference = state.reference
    base = state.policy.params
    vocab = state.policy.vocab
    coords = seeded_stream(seed, "gradcheck").choice(
        base.layout.total, size=min(n_coords, base.layout.total), replace=False
    )
    frozen = {
        solver_loss: sequence_logprobs(
            base, state.policy.arch, vocab, solver_items(batch, vocab), config.temperature
        ),
        challenger_loss: sequence_logprobs(
            base, state.policy.arch, vocab, challenger_items(batch, vocab), config.temperature
        ),
    }
    worst = 0.0
    for beta in betas:
        for loss in (solver_loss, challenger_loss):
            def loss_fn(params, loss=loss, beta=beta):
                tape = Tape(params)
                term = loss(tape, reference, batch, adv, beta, config.temperature,
                            frozen_logp=frozen[loss])
                return float(term.node.value), tape.backward(term.node)

            # zero_floor: unused embedding rows have exactly-zero gradients
            # whose central differences are pure roundoff noise
            worst = max(worst, finite_diff_check(loss_fn, base, step, coords, zero_floor=1e-9))
    return worst


# -- command line ------------------------------------------------------------


def _cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"config not found: {config_path}")
    config = load_config(config_path)
    result = run(
        config,
        args.out,
        init_checkpoint=args.init,
        reference_checkpoint=args.reference,
        resume_state=args.resume,
    )
    final_eval = result.heldout[-1][1] if result.heldout else float("nan")
    print(
        f"trained {result.state.epoch} epochs mode={config.mode.value} "
        f"heldout={final_eval:.4f} checkpoint={result.final_checkpoint}"
    )
    return 0


def _cmd_eval(args) -> int:
    policy_a = load_checkpoint(args.a)
    policy_b = load_checkpoint(args.b)
    grammar = TaskGrammar(opcodes=tuple(args.opcodes.split(",")))
    queries = held_out_set(
        policy_a.vocab, grammar, args.n, seeded_stream(args.seed, "eval")
    )
    report = evaluate_win_rate(
        policy_a, policy_b, queries, temperature=args.temperature, seed=args.seed
    )
    print(json.dumps(report.as_dict()))
    return 0


def _cmd_gradcheck(args) -> int:
    worst = gradient_check(args.seed, step=args.step)
    print(f"gradcheck seed={args.seed} max_rel_error={worst:.3e}")
    return 0 if worst < 1e-4 else 1


def _cmd_gen_data(args) -> int:
    vocab = build_vocabulary(args.ordinary_tokens)
    grammar = TaskGrammar(opcodes=tuple(args.opcodes.split(",")))
    queries = generate_dataset(vocab, grammar, args.n, seeded_stream(args.seed, "dataset"))
    save_dataset(args.out, queries, vocab, args.seed)
    print(f"wrote {len(queries)} queries to {args.out}")
    return 0


def _cmd_export(args) -> int:
    export = export_curves(args.metrics, args.out)
    for warning in export.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote {len(export.rows)} rows to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfplay", description="Self-play token-world training and evaluation."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="initial checkpoint (from-baseline regime)")
    p.add_argument("--reference", default=None, help="reference checkpoint override")
    p.add_argument("--resume", default=None, help="run-state sidecar to resume from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="win-rate of checkpoint A against checkpoint B")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--opcodes", default="SORT,REV,SUM,COPY")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="loss gradients vs central finite differences")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a query dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--opcodes", default="SORT,REV,SUM,COPY")
    p.add_argument("--ordinary-tokens", type=int, default=16, dest="ordinary_tokens")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("export", help="metrics JSONL to CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export)

    return parser


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
