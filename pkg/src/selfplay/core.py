"""Token-world primitives: vocabulary, sequences, playout batches, run configuration.

Everything here is immutable after construction and safe to share across
concurrent rollout workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

# Glyphs for the fixed synthetic vocabulary.  Ordinary tokens come first,
# reserved tokens (CP, EOS, SEP) are appended after the ordinary range so the
# policy output head size equals the vocabulary size with no masking special
# cases.
DIGIT_GLYPHS = tuple(str(d) for d in range(10))
OPCODE_GLYPHS = ("SORT", "REV", "SUM", "COPY")
TERMINATOR_GLYPH = ";"
CP_GLYPH = "<cp>"
EOS_GLYPH = "<eos>"
SEP_GLYPH = "<sep>"

MIN_ORDINARY_TOKENS = 12  # digits + at least one opcode + terminator


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class VocabularyError(ValueError):
    """Encoding/decoding hit a glyph or id outside the vocabulary."""


def _ordinary_glyph(i: int) -> str:
    if i < 10:
        return DIGIT_GLYPHS[i]
    if i < 14:
        return OPCODE_GLYPHS[i - 10]
    if i == 14:
        return TERMINATOR_GLYPH
    return f"x{i}"


@dataclass(frozen=True)
class Vocabulary:
    """Fixed token id space: `ordinary` task tokens followed by CP, EOS, SEP."""

    ordinary: int
    glyphs: tuple[str, ...]

    @classmethod
    def create(cls, ordinary: int) -> "Vocabulary":
        if ordinary < 1:
            raise ConfigError(f"vocabulary needs at least 1 ordinary token, got {ordinary}")
        glyphs = tuple(_ordinary_glyph(i) for i in range(ordinary))
        return cls(ordinary=ordinary, glyphs=glyphs + (CP_GLYPH, EOS_GLYPH, SEP_GLYPH))

    @property
    def size(self) -> int:
        return self.ordinary + 3

    @property
    def cp(self) -> int:
        return self.ordinary

    @property
    def eos(self) -> int:
        return self.ordinary + 1

    @property
    def sep(self) -> int:
        return self.ordinary + 2

    @cached_property
    def _glyph_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.glyphs)}

    def encode(self, text: str) -> tuple[int, ...]:
        """Map a whitespace-separated glyph string to token ids."""
        ids = []
        for glyph in text.split():
            tok = self._glyph_index.get(glyph)
            if tok is None:
                raise VocabularyError(f"unknown glyph {glyph!r}")
            ids.append(tok)
        return tuple(ids)

    def decode(self, ids) -> str:
        parts = []
        for tok in ids:
            if not 0 <= tok < self.size:
                raise VocabularyError(f"token id {tok} outside vocabulary of size {self.size}")
            parts.append(self.glyphs[tok])
        return " ".join(parts)


def build_vocabulary(ordinary_size: int) -> Vocabulary:
    """Standard task vocabulary; requires room for digits, opcodes and ';'."""
    if ordinary_size < MIN_ORDINARY_TOKENS:
        raise ConfigError(
            f"ordinary_size must be >= {MIN_ORDINARY_TOKENS}, got {ordinary_size}"
        )
    return Vocabulary.create(ordinary_size)


class Role(str, Enum):
    QUERY = "query"
    ANSWER = "answer"


@dataclass(frozen=True)
class TokenSequence:
    """A role-tagged token string; `terminated` means it ends with EOS."""

    tokens: tuple[int, ...]
    role: Role
    terminated: bool

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PlayoutGroup:
    """One query with its G sampled answers and their per-answer scores."""

    query: TokenSequence
    answers: tuple[TokenSequence, ...]
    task_rewards: tuple[float, ...]
    quality_scores: tuple[float, ...]


@dataclass(frozen=True)
class PlayoutBatch:
    groups: tuple[PlayoutGroup, ...]


class Mode(str, Enum):
    LSP = "lsp"
    LSP_ZERO = "lsp-zero"
    GRPO = "grpo"


@dataclass(frozen=True)
class RunConfig:
    """Every knob one training run needs.

    Defaults are sized for minutes-long desk runs; `mode` selects between the
    two self-play variants and the data-based GRPO baseline.
    """

    mode: Mode = Mode.LSP
    seed: int = 0
    n_queries: int = 16
    group_size: int = 8
    kl_beta: float = 0.05
    challenger_coef: float = 1.0
    step_size: float = 3e-3
    epochs: int = 2000
    temperature: float = 1.0
    eval_temperature: float = 0.01
    max_len: int = 24
    ordinary_tokens: int = 16
    embed_dim: int = 32
    context_window: int = 8
    hidden_dim: int = 64
    optimizer: str = "adam"
    opcodes: tuple[str, ...] = OPCODE_GLYPHS
    dataset: str | None = None
    checkpoint_every: int = 500
    eval_every: int = 100
    eval_size: int = 256

    def validate(self) -> None:
        if self.n_queries < 2:
            raise ConfigError(f"n_queries must be >= 2, got {self.n_queries}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.kl_beta < 0:
            raise ConfigError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if self.challenger_coef < 0:
            raise ConfigError(f"challenger_coef must be >= 0, got {self.challenger_coef}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.temperature <= 0 or self.eval_temperature <= 0:
            raise ConfigError("temperatures must be > 0")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if self.ordinary_tokens < MIN_ORDINARY_TOKENS:
            raise ConfigError(f"ordinary_tokens must be >= {MIN_ORDINARY_TOKENS}")
        if min(self.embed_dim, self.context_window, self.hidden_dim) < 1:
            raise ConfigError("architecture dims must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        unknown = [op for op in self.opcodes if op not in OPCODE_GLYPHS]
        if unknown or not self.opcodes:
            raise ConfigError(f"opcodes must be a nonempty subset of {OPCODE_GLYPHS}")
        if self.mode is Mode.GRPO and not self.dataset:
            raise ConfigError("grpo mode requires a dataset path")


_CONFIG_PARSERS = {
    "mode": lambda s: Mode(s),
    "seed": int,
    "n_queries": int,
    "group_size": int,
    "kl_beta": float,
    "challenger_coef": float,
    "step_size": float,
    "epochs": int,
    "temperature": float,
    "eval_temperature": float,
    "max_len": int,
    "ordinary_tokens": int,
    "embed_dim": int,
    "context_window": int,
    "hidden_dim": int,
    "optimizer": str,
    "opcodes": lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
    "dataset": lambda s: None if s == "none" else s,
    "checkpoint_every": int,
    "eval_every": int,
    "eval_size": int,
}


def _format_value(value) -> str:
    if isinstance(value, Mode):
        return value.value
    if isinstance(value, tuple):
        return ",".join(value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def format_config(config: RunConfig) -> str:
    """Flat `key = value` text; floats use repr so round-trips are bit-exact."""
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; unknown keys are an error (anti-typo)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        parser = _CONFIG_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parser(value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8")


@dataclass(frozen=True)
class BatchViolation:
    """First violated batch invariant; `group` is None for batch-level rules."""

    group: int | None
    rule: str
    detail: str


def validate_batch(batch: PlayoutBatch, config: RunConfig) -> BatchViolation | None:
    """Check every PlayoutBatch invariant against N, G from `config`.

    Returns None when the batch is well-formed, else the first violation.
    """
    cp = config.ordinary_tokens  # reserved CP id under the standard layout
    if len(batch.groups) != config.n_queries or config.n_queries < 2:
        return BatchViolation(
            None, "group_count",
            f"expected {config.n_queries} groups (>=2), got {len(batch.groups)}",
        )
    for i, group in enumerate(batch.groups):
        if group.query.role is not Role.QUERY:
            return BatchViolation(i, "query_role", f"query tagged {group.query.role}")
        if cp in group.query.tokens:
            return BatchViolation(i, "query_contains_cp", "CP is context-only")
        if len(group.query.tokens) > config.max_len:
            return BatchViolation(i, "query_length", f"{len(group.query.tokens)} > {config.max_len}")
        if len(group.answers) != config.group_size or config.group_size < 2:
            return BatchViolation(
                i, "answer_count",
                f"expected {config.group_size} answers (>=2), got {len(group.answers)}",
            )
        for answer in group.answers:
            if answer.role is not Role.ANSWER:
                return BatchViolation(i, "answer_role", f"answer tagged {answer.role}")
            if len(answer.tokens) > config.max_len:
                return BatchViolation(i, "answer_length", f"{len(answer.tokens)} > {config.max_len}")
        for name, scores in (("reward", group.task_rewards), ("quality", group.quality_scores)):
            if len(scores) != config.group_size:
                return BatchViolation(i, f"{name}_count", f"{len(scores)} != {config.group_size}")
            for r in scores:
                if not (0.0 <= r <= 1.0):
                    return BatchViolation(i, f"{name}_range", f"{r} outside [0, 1]")
    return None


def seeded_stream(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible random stream for (seed, label).

    The stream is counter-based (Philox keyed by a hash of seed and label),
    so identical inputs yield identical draw sequences on every platform and
    regardless of how many other streams were created first.
    """
    digest = hashlib.sha256(f"{seed}\x1f{label}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
