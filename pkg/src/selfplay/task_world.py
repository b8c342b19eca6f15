"""The synthetic verifiable environment.

A well-formed query is `OPCODE d1 .. dk ;` followed by EOS, with 2-6 digit
operands.  Every query has a unique correct output:

    SORT -> operands ascending        REV  -> operands reversed
    SUM  -> digits of (sum mod 100)   COPY -> operands verbatim

The task reward is the positional-match fraction against that output, so it
is total, deterministic, and verification-based.  Malformed queries earn
reward 0 for every answer; together with the quality rubric this is the
pressure that keeps the challenger from collapsing into noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import (
    OPCODE_GLYPHS,
    TERMINATOR_GLYPH,
    ConfigError,
    Role,
    TokenSequence,
    Vocabulary,
)

GRAMMAR_VERSION = 1


@dataclass(frozen=True)
class TaskGrammar:
    opcodes: tuple[str, ...] = OPCODE_GLYPHS
    min_arity: int = 2
    max_arity: int = 6

    def __post_init__(self):
        unknown = [op for op in self.opcodes if op not in OPCODE_GLYPHS]
        if unknown or not self.opcodes:
            raise ConfigError(f"opcodes must be a nonempty subset of {OPCODE_GLYPHS}")
        if not 1 <= self.min_arity <= self.max_arity:
            raise ConfigError("arity range must satisfy 1 <= min <= max")


@dataclass(frozen=True)
class ParsedQuery:
    opcode: str | None
    operands: tuple[int, ...]
    well_formed: bool
    defects: tuple[str, ...]


DIGITS = tuple(str(d) for d in range(10))

# Parsing goes through the glyph table, so any vocabulary built by
# Vocabulary.create follows the standard layout automatically.


def _opcode_of(vocab: Vocabulary, tok: int) -> str | None:
    glyph = vocab.glyphs[tok] if 0 <= tok < vocab.size else None
    return glyph if glyph in OPCODE_GLYPHS else None


def _digit_of(vocab: Vocabulary, tok: int) -> int | None:
    glyph = vocab.glyphs[tok] if 0 <= tok < vocab.size else None
    return int(glyph) if glyph is not None and glyph in DIGITS else None


def _is_terminator(vocab: Vocabulary, tok: int) -> bool:
    return 0 <= tok < vocab.size and vocab.glyphs[tok] == TERMINATOR_GLYPH


@lru_cache(maxsize=4096)
def _split_parts(vocab: Vocabulary, q: TokenSequence):
    """Body (tokens sans trailing EOS), opcode token, operand region, trailing junk."""
    toks = q.tokens
    body = toks[:-1] if toks and toks[-1] == vocab.eos else toks
    has_eos = q.terminated and bool(toks) and toks[-1] == vocab.eos
    opcode = _opcode_of(vocab, body[0]) if body else None
    start = 1 if opcode is not None else 0
    region, after, saw_terminator = [], [], False
    for pos in range(start, len(body)):
        if not saw_terminator and _is_terminator(vocab, body[pos]):
            saw_terminator = True
            continue
        (after if saw_terminator else region).append(body[pos])
    return body, opcode, tuple(region), tuple(after), saw_terminator, has_eos


@lru_cache(maxsize=4096)
def parse_query(vocab: Vocabulary, q: TokenSequence) -> ParsedQuery:
    """Total parse: malformed queries come back with their defect list."""
    body, opcode, region, after, saw_terminator, has_eos = _split_parts(vocab, q)
    if not body:
        return ParsedQuery(None, (), False, ("empty",))
    defects = []
    if opcode is None:
        defects.append("missing_opcode")
    operands = []
    bad_operand = False
    for tok in region:
        d = _digit_of(vocab, tok)
        if d is None:
            bad_operand = True
        else:
            operands.append(d)
    if bad_operand:
        defects.append("bad_operand")
    if not 2 <= len(region) <= 6:
        defects.append("bad_arity")
    if not saw_terminator:
        defects.append("missing_terminator")
    if after:
        defects.append("trailing_tokens")
    if not has_eos:
        defects.append("unterminated")
    return ParsedQuery(opcode, tuple(operands), not defects, tuple(defects))


def expected_answer(parsed: ParsedQuery) -> tuple[int, ...]:
    """Digit values of the unique correct output for a well-formed query."""
    ops = parsed.operands
    if parsed.opcode == "SORT":
        return tuple(sorted(ops))
    if parsed.opcode == "REV":
        return tuple(reversed(ops))
    if parsed.opcode == "COPY":
        return tuple(ops)
    if parsed.opcode == "SUM":
        total = sum(ops) % 100
        return (total,) if total < 10 else (total // 10, total % 10)
    raise ConfigError(f"no expected answer for opcode {parsed.opcode!r}")


def _answer_content(vocab: Vocabulary, a: TokenSequence) -> list[int]:
    """Answer tokens with the trailing terminator/EOS decoration stripped."""
    content = list(a.tokens)
    while content and (content[-1] == vocab.eos or _is_terminator(vocab, content[-1])):
        content.pop()
    return content


def task_reward(vocab: Vocabulary, q: TokenSequence, a: TokenSequence) -> float:
    """Positional-match fraction in [0, 1]; malformed queries score 0 always."""
    parsed = parse_query(vocab, q)
    if not parsed.well_formed:
        return 0.0
    expected_ids = [vocab.encode(str(d))[0] for d in expected_answer(parsed)]
    given = _answer_content(vocab, a)
    if not given:
        return 0.0
    matches = sum(1 for g, e in zip(given, expected_ids) if g == e)
    return matches / max(len(expected_ids), len(given))


QUALITY_CRITERIA = (
    "query_has_opcode",
    "query_arity_in_range",
    "query_terminated",
    "answer_nonempty_terminated",
    "answer_alphabet",
    "answer_length_matches",
    "answer_not_parroting",
)


def quality_rubric(vocab: Vocabulary, q: TokenSequence, a: TokenSequence) -> dict[str, bool]:
    """The seven binary interaction-quality criteria, each a pure predicate."""
    body, opcode, region, after, saw_terminator, has_eos = _split_parts(vocab, q)
    parsed = parse_query(vocab, q)
    content = _answer_content(vocab, a)
    q1 = opcode is not None
    q2 = bool(body) and 2 <= len(region) <= 6 and all(
        _digit_of(vocab, t) is not None for t in region
    )
    q3 = bool(body) and saw_terminator and not after and has_eos
    a1 = bool(content) and a.terminated
    a2 = bool(content) and all(_digit_of(vocab, t) is not None for t in content)
    a3 = parsed.well_formed and len(content) == len(expected_answer(parsed))
    parrot = tuple(content) in (tuple(body), region) and bool(content)
    a4 = bool(content) and (opcode == "COPY" or not parrot)
    return dict(zip(QUALITY_CRITERIA, (q1, q2, q3, a1, a2, a3, a4)))


def quality_score(vocab: Vocabulary, q: TokenSequence, a: TokenSequence) -> tuple[int, float]:
    """Additive 0-7 rubric total and its [0, 1] scaling."""
    score = sum(quality_rubric(vocab, q, a).values())
    return score, score / 7.0


def _random_query(vocab: Vocabulary, grammar: TaskGrammar, stream: np.random.Generator) -> TokenSequence:
    opcode = grammar.opcodes[int(stream.integers(len(grammar.opcodes)))]
    arity = int(stream.integers(grammar.min_arity, grammar.max_arity + 1))
    digits = stream.integers(0, 10, size=arity)
    text = " ".join([opcode, *(str(int(d)) for d in digits), TERMINATOR_GLYPH])
    return TokenSequence(vocab.encode(text) + (vocab.eos,), Role.QUERY, True)


def generate_dataset(
    vocab: Vocabulary, grammar: TaskGrammar, n: int, stream: np.random.Generator
) -> list[TokenSequence]:
    """n well-formed queries with uniform opcodes, arities, and digits."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    return [_random_query(vocab, grammar, stream) for _ in range(n)]


def held_out_set(
    vocab: Vocabulary,
    grammar: TaskGrammar,
    n: int,
    stream: np.random.Generator,
    exclude=(),
) -> list[TokenSequence]:
    """Evaluation queries, disjoint from `exclude` (e.g. the training set).

    Low-arity queries saturate quickly (there are only 400 distinct arity-2
    queries), so disjointness from a large training set cannot come from seed
    choice alone; it is enforced by rejection, which stays deterministic for
    a given stream.
    """
    if n < 1:
        raise ConfigError(f"evaluation size must be >= 1, got {n}")
    excluded = {q.tokens for q in exclude}
    queries: list[TokenSequence] = []
    attempts = 0
    while len(queries) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise ConfigError(
                f"could not draw {n} queries disjoint from {len(excluded)} excluded ones"
            )
        q = _random_query(vocab, grammar, stream)
        if q.tokens not in excluded:
            queries.append(q)
    return queries


def save_dataset(path, queries, vocab: Vocabulary, seed: int) -> None:
    """One query per line in glyph form; the header records seed and grammar version."""
    lines = [f"# seed={seed} grammar_version={GRAMMAR_VERSION}"]
    for q in queries:
        body = q.tokens[:-1] if q.tokens and q.tokens[-1] == vocab.eos else q.tokens
        lines.append(vocab.decode(body))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, vocab: Vocabulary) -> list[TokenSequence]:
    queries = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        queries.append(TokenSequence(vocab.encode(line) + (vocab.eos,), Role.QUERY, True))
    return queries
