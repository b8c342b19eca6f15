"""The single autoregressive model that plays both roles.

Challenger is the model conditioned on the reserved CP token; Solver is the
same parameters conditioned on a query.  The architecture is a fixed-window
MLP: the last k token embeddings are concatenated, passed through one tanh
hidden layer, and projected to logits over the full vocabulary.  CP is masked
from the output everywhere (it is conditioning context, not content); EOS is
never masked so sequences can terminate.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Role, TokenSequence, Vocabulary, seeded_stream
from .numerics import (
    Gradient,
    Node,
    ParameterVector,
    Tape,
    UsageError,
    make_layout,
)

INIT_SCALE = 0.08
CP_MASK = -1e9  # additive logit mask; exp underflows to exactly 0


@dataclass(frozen=True)
class PolicyArchitecture:
    vocab_size: int
    embed_dim: int = 32
    context_window: int = 8
    hidden_dim: int = 64

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.context_window, self.hidden_dim) < 1:
            raise UsageError("all architecture dims must be positive")

    @property
    def pad_id(self) -> int:
        # PAD is an extra embedding row, not a sampleable token
        return self.vocab_size

    def layout(self):
        k, e, h, v = self.context_window, self.embed_dim, self.hidden_dim, self.vocab_size
        return make_layout(
            [
                ("embed", (v + 1, e)),
                ("w1", (h, k * e)),
                ("b1", (h,)),
                ("w2", (v, h)),
                ("b2", (v,)),
            ]
        )

    @property
    def param_count(self) -> int:
        return self.layout().total


def init_params(arch: PolicyArchitecture, stream: np.random.Generator) -> ParameterVector:
    """Seeded uniform(-0.08, 0.08) for embeddings and weights; output bias 0."""
    layout = arch.layout()
    values = stream.uniform(-INIT_SCALE, INIT_SCALE, size=layout.total)
    params = ParameterVector(values, layout)
    params.view("b2")[:] = 0.0
    return params


def zero_params(arch: PolicyArchitecture) -> ParameterVector:
    """All-zero parameters: every next-token distribution is exactly uniform."""
    layout = arch.layout()
    return ParameterVector(np.zeros(layout.total), layout)


@dataclass(frozen=True)
class SampledSequence:
    """A sampled sequence plus the log-probabilities recorded while sampling."""

    sequence: TokenSequence
    per_token_logprobs: tuple[float, ...]
    total_logprob: float


def _context_rows(prefixes, k: int, pad: int) -> np.ndarray:
    ctx = np.full((len(prefixes), k), pad, dtype=np.int64)
    for r, prefix in enumerate(prefixes):
        tail = list(prefix)[-k:]
        if tail:
            ctx[r, k - len(tail):] = tail
    return ctx


def _step_log_probs(
    params: ParameterVector,
    arch: PolicyArchitecture,
    cp_id: int,
    ctx: np.ndarray,
    temperature: float,
) -> np.ndarray:
    """Log-probabilities over the vocabulary for each context row (B, V)."""
    embed = params.view("embed")
    x = embed[ctx].reshape(ctx.shape[0], arch.context_window * arch.embed_dim)
    h = np.tanh(x @ params.view("w1").T + params.view("b1"))
    logits = h @ params.view("w2").T + params.view("b2")
    scaled = logits / temperature
    scaled[:, cp_id] += CP_MASK
    m = scaled.max(axis=-1, keepdims=True)
    shifted = scaled - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Policy:
    """Parameter bundle with the sampling and scoring operations."""

    arch: PolicyArchitecture
    vocab: Vocabulary
    params: ParameterVector

    def __post_init__(self):
        if self.arch.vocab_size != self.vocab.size:
            raise UsageError(
                f"architecture vocab_size {self.arch.vocab_size} != vocabulary size {self.vocab.size}"
            )

    def next_token_distribution(self, context, temperature: float) -> np.ndarray:
        """Probabilities over the vocabulary given the last-k context tokens."""
        if temperature <= 0:
            raise UsageError(f"temperature must be > 0, got {temperature}")
        ctx = _context_rows([tuple(context)], self.arch.context_window, self.arch.pad_id)
        log_probs = _step_log_probs(self.params, self.arch, self.vocab.cp, ctx, temperature)
        return np.exp(log_probs[0])

    def sample_sequence(self, prefix, role: Role, temperature, max_len, stream) -> SampledSequence:
        return self.sample_many([prefix], role, temperature, max_len, [stream])[0]

    def sample_many(self, prefixes, role: Role, temperature, max_len, streams) -> list[SampledSequence]:
        """Autoregressive sampling until EOS or max_len for a batch of prefixes.

        `streams` is either one generator shared by all rows or a list with one
        independent generator per row; per-row streams make the draws identical
        no matter how rows are batched or scheduled.
        """
        n = len(prefixes)
        shared = isinstance(streams, np.random.Generator)
        if not shared and len(streams) != n:
            raise UsageError(f"need {n} streams, got {len(streams)}")
        k, pad = self.arch.context_window, self.arch.pad_id
        ctx = _context_rows(prefixes, k, pad)
        tokens: list[list[int]] = [[] for _ in range(n)]
        logprobs: list[list[float]] = [[] for _ in range(n)]
        terminated = [False] * n
        active = list(range(n))
        while active:
            rows = np.asarray(active)
            log_probs = _step_log_probs(self.params, self.arch, self.vocab.cp, ctx[rows], temperature)
            cumulative = np.cumsum(np.exp(log_probs), axis=1)
            if shared:
                draws = streams.random(len(active))
            else:
                draws = np.array([streams[r].random() for r in active])
            picks = np.minimum(
                (cumulative <= draws[:, None]).sum(axis=1),
                self.arch.vocab_size - 1,
            )
            still = []
            for b, r in enumerate(active):
                tok = int(picks[b])
                tokens[r].append(tok)
                logprobs[r].append(float(log_probs[b, tok]))
                if tok == self.vocab.eos:
                    terminated[r] = True
                elif len(tokens[r]) < max_len:
                    still.append(r)
                ctx[r, :-1] = ctx[r, 1:]
                ctx[r, -1] = tok
            active = still
        return [
            SampledSequence(
                sequence=TokenSequence(tuple(tokens[r]), role, terminated[r]),
                per_token_logprobs=tuple(logprobs[r]),
                total_logprob=float(np.sum(logprobs[r])),
            )
            for r in range(n)
        ]

    def sequence_logprob(self, prefix, tokens, temperature: float = 1.0) -> float:
        """Total log-probability of `tokens` after `prefix` (plain value)."""
        return float(
            sequence_logprobs(self.params, self.arch, self.vocab, [(prefix, tokens)], temperature)[0]
        )

    def logprob_nodes(self, tape: Tape, items, temperature: float = 1.0) -> Node:
        return sequence_logprob_nodes(tape, self.arch, self.vocab, items, temperature)

    def snapshot(self) -> "ReferenceSnapshot":
        return snapshot_reference(self)


def _position_table(arch: PolicyArchitecture, items):
    """Flatten (prefix, tokens) pairs into per-position context/target/segment rows."""
    ctxs, targets, segments = [], [], []
    k, pad = arch.context_window, arch.pad_id
    for s, (prefix, tokens) in enumerate(items):
        history = list(prefix)
        for tok in tokens:
            tail = history[-k:]
            ctxs.append([pad] * (k - len(tail)) + tail)
            targets.append(tok)
            segments.append(s)
            history.append(tok)
    return (
        np.asarray(ctxs, dtype=np.int64).reshape(len(targets), k),
        np.asarray(targets, dtype=np.int64),
        np.asarray(segments, dtype=np.int64),
    )


def sequence_logprobs(
    params: ParameterVector,
    arch: PolicyArchitecture,
    vocab: Vocabulary,
    items,
    temperature: float = 1.0,
) -> np.ndarray:
    """Plain (non-differentiable) total log-probabilities, one per item."""
    for _, tokens in items:
        if len(tokens) == 0:
            raise UsageError("cannot score an empty sequence")
        for tok in tokens:
            if not 0 <= tok < arch.vocab_size:
                raise UsageError(f"token id {tok} out of range")
    ctx, targets, segments = _position_table(arch, items)
    log_probs = _step_log_probs(params, arch, vocab.cp, ctx, temperature)
    picked = log_probs[np.arange(len(targets)), targets]
    return np.bincount(segments, weights=picked, minlength=len(items))


def sequence_logprob_nodes(
    tape: Tape,
    arch: PolicyArchitecture,
    vocab: Vocabulary,
    items,
    temperature: float = 1.0,
) -> Node:
    """Differentiable total log-probabilities as a tape node of shape (S,).

    Built from tape primitives so that backward yields the gradient of each
    sequence's log-probability with respect to the tape's parameters.
    """
    for _, tokens in items:
        if len(tokens) == 0:
            raise UsageError("cannot score an empty sequence")
        for tok in tokens:
            if not 0 <= tok < arch.vocab_size:
                raise UsageError(f"token id {tok} out of range")
    ctx, targets, segments = _position_table(arch, items)
    mask = np.zeros(arch.vocab_size)
    mask[vocab.cp] = CP_MASK
    x = tape.embed(tape.param("embed"), ctx)
    h = tape.tanh(tape.affine(x, tape.param("w1"), tape.param("b1")))
    logits = tape.affine(h, tape.param("w2"), tape.param("b2"))
    masked = tape.add(tape.scale(logits, 1.0 / temperature), tape.const(mask))
    picked = tape.gather(tape.log_softmax(masked), targets)
    return tape.segment_sum(picked, segments, len(items))


@dataclass(frozen=True)
class ReferenceSnapshot:
    """Frozen copy of the parameters taken once at run start."""

    arch: PolicyArchitecture
    vocab: Vocabulary
    params: ParameterVector

    def sequence_logprob(self, prefix, tokens, temperature: float = 1.0) -> float:
        return float(self.sequence_logprobs([(prefix, tokens)], temperature)[0])

    def sequence_logprobs(self, items, temperature: float = 1.0) -> np.ndarray:
        return sequence_logprobs(self.params, self.arch, self.vocab, items, temperature)


def snapshot_reference(policy: Policy) -> ReferenceSnapshot:
    frozen = policy.params.copy()
    frozen.values.setflags(write=False)
    return ReferenceSnapshot(arch=policy.arch, vocab=policy.vocab, params=frozen)


# -- checkpoint file format ------------------------------------------------
#
#   magic "SPLY" | u32 version | u32 vocab_size | u32 embed_dim
#   | u32 context_window | u32 hidden_dim | params as little-endian f64
#   | u64 parameter count | u32 crc32 of all preceding bytes

CHECKPOINT_MAGIC = b"SPLY"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, corrupt, or structurally incompatible."""


def save_checkpoint(path, policy: Policy) -> None:
    arch = policy.arch
    header = CHECKPOINT_MAGIC + struct.pack(
        "<5I", CHECKPOINT_VERSION, arch.vocab_size, arch.embed_dim,
        arch.context_window, arch.hidden_dim,
    )
    body = np.ascontiguousarray(policy.params.values, dtype="<f8").tobytes()
    trailer = struct.pack("<Q", policy.params.values.size)
    blob = header + body + trailer
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Policy:
    blob = Path(path).read_bytes()
    if len(blob) < 36 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, vocab_size, embed_dim, context_window, hidden_dim = struct.unpack(
        "<5I", blob[4:24]
    )
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arch = PolicyArchitecture(vocab_size, embed_dim, context_window, hidden_dim)
    (count,) = struct.unpack("<Q", blob[-12:-4])
    if count != arch.param_count or len(blob) != 36 + 8 * count:
        raise CheckpointError(f"{path}: parameter count does not match architecture")
    values = np.frombuffer(blob[24:-12], dtype="<f8").astype(np.float64)
    vocab = Vocabulary.create(vocab_size - 3)
    return Policy(arch=arch, vocab=vocab, params=ParameterVector(values, arch.layout()))


def make_policy(vocab: Vocabulary, arch: PolicyArchitecture, seed: int) -> Policy:
    """Freshly initialized policy from the run seed's "init" stream."""
    return Policy(arch=arch, vocab=vocab, params=init_params(arch, seeded_stream(seed, "init")))
