"""Shared fixtures and oracle helpers for the test suite."""

import itertools

import numpy as np
import pytest

from selfplay.core import Role, TokenSequence, Vocabulary, build_vocabulary
from selfplay.policy import Policy, PolicyArchitecture, init_params
from selfplay.core import seeded_stream


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(16)


@pytest.fixture(scope="session")
def micro_vocab():
    # 3 ordinary tokens + CP/EOS/SEP; small enough to enumerate exhaustively
    return Vocabulary.create(3)


def make_query(vocab, text, terminated=True, with_eos=True):
    tokens = vocab.encode(text)
    if with_eos:
        tokens = tokens + (vocab.eos,)
    return TokenSequence(tokens, Role.QUERY, terminated)


def make_answer(vocab, text, terminated=True, with_eos=True):
    tokens = vocab.encode(text)
    if with_eos:
        tokens = tokens + (vocab.eos,)
    return TokenSequence(tokens, Role.ANSWER, terminated)


def micro_policy(micro_vocab, seed=11, embed=3, window=3, hidden=4):
    arch = PolicyArchitecture(micro_vocab.size, embed, window, hidden)
    return Policy(arch, micro_vocab, init_params(arch, seeded_stream(seed, "init")))


def enumerate_outcomes(vocab, max_len):
    """Every sequence the sampler can emit: EOS-terminated up to max_len, or
    truncated at exactly max_len without EOS.  CP never appears (masked)."""
    sampleable = [t for t in range(vocab.size) if t != vocab.cp]
    non_eos = [t for t in sampleable if t != vocab.eos]
    outcomes = []
    for length in range(1, max_len + 1):
        for prefix in itertools.product(non_eos, repeat=length - 1):
            outcomes.append((prefix + (vocab.eos,), True))
    for full in itertools.product(non_eos, repeat=max_len):
        outcomes.append((full, False))
    return outcomes


def outcome_probability(policy, prefix, tokens, temperature=1.0):
    """Product of next-token probabilities along `tokens` after `prefix`."""
    p = 1.0
    history = list(prefix)
    for tok in tokens:
        dist = policy.next_token_distribution(history, temperature)
        p *= dist[tok]
        history.append(tok)
    return p
