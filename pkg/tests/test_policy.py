"""Distribution normalization, sampling contracts, scoring, snapshots, checkpoints."""

import math

import numpy as np
import pytest

from selfplay.core import Role, TokenSequence, build_vocabulary, seeded_stream
from selfplay.numerics import Tape, UsageError, finite_diff_check
from selfplay.policy import (
    CheckpointError,
    Policy,
    PolicyArchitecture,
    init_params,
    load_checkpoint,
    make_policy,
    save_checkpoint,
    sequence_logprob_nodes,
    snapshot_reference,
    zero_params,
)

from conftest import enumerate_outcomes, micro_policy, outcome_probability


@pytest.fixture(scope="module")
def policy(vocab):
    arch = PolicyArchitecture(vocab.size, embed_dim=6, context_window=6, hidden_dim=10)
    return make_policy(vocab, arch, seed=42)


@pytest.fixture(scope="module")
def uniform_policy(vocab):
    arch = PolicyArchitecture(vocab.size, embed_dim=4, context_window=4, hidden_dim=6)
    return Policy(arch, vocab, zero_params(arch))


class TestNextTokenDistribution:
    def test_uniform_when_logits_equal(self, uniform_policy, vocab):
        dist = uniform_policy.next_token_distribution([vocab.cp], temperature=1.0)
        assert dist[vocab.cp] == 0.0
        others = np.delete(dist, vocab.cp)
        np.testing.assert_allclose(others, 1.0 / 18.0, atol=1e-15)

    def test_near_greedy_limit(self, vocab):
        arch = PolicyArchitecture(vocab.size, 4, 4, 6)
        p = Policy(arch, vocab, zero_params(arch))
        p.params.view("b2")[5] = 5.0  # one dominant logit
        dist = p.next_token_distribution([0, 1], temperature=0.01)
        assert dist[5] > 0.999

    def test_normalization_over_random_draws(self, policy, vocab):
        stream = seeded_stream(1, "contexts")
        for _ in range(1000):
            length = int(stream.integers(0, 8))
            ctx = stream.integers(0, vocab.size, size=length).tolist()
            dist = policy.next_token_distribution(ctx, temperature=1.0)
            assert abs(dist.sum() - 1.0) < 1e-12
            assert dist[vocab.cp] == 0.0

    def test_temperature_must_be_positive(self, policy):
        with pytest.raises(UsageError):
            policy.next_token_distribution([0], temperature=0.0)


class TestSampling:
    def test_deterministic_given_stream(self, policy, vocab):
        a = policy.sample_sequence((vocab.cp,), Role.QUERY, 1.0, 24, seeded_stream(5, "s"))
        b = policy.sample_sequence((vocab.cp,), Role.QUERY, 1.0, 24, seeded_stream(5, "s"))
        assert a == b

    def test_roles_and_termination(self, policy, vocab):
        out = policy.sample_many(
            [(vocab.cp,)] * 8, Role.QUERY, 1.0, 6,
            [seeded_stream(3, f"q/{i}") for i in range(8)],
        )
        for s in out:
            assert s.sequence.role is Role.QUERY
            assert len(s.sequence.tokens) <= 6
            assert s.sequence.terminated == (s.sequence.tokens[-1] == vocab.eos)
            assert vocab.cp not in s.sequence.tokens
            assert all(lp <= 0.0 for lp in s.per_token_logprobs)
            assert abs(s.total_logprob - sum(s.per_token_logprobs)) < 1e-12

    def test_expected_length_matches_truncated_geometric(self, vocab):
        # with zero parameters every step is uniform over 18 sampleable
        # tokens, so sequence length follows a geometric law with stop
        # probability 1/18 truncated at max_len
        arch = PolicyArchitecture(vocab.size, 3, 3, 4)
        p = Policy(arch, vocab, zero_params(arch))
        max_len, stop = 24, 1.0 / 18.0
        lengths = np.arange(1, max_len + 1)
        pmf = (1 - stop) ** (lengths - 1) * stop
        pmf[-1] += (1 - stop) ** max_len  # truncated mass lands on max_len
        exact_mean = float((lengths * pmf).sum())
        exact_var = float(((lengths - exact_mean) ** 2 * pmf).sum())

        n = 100_000
        sampled = p.sample_many(
            [()] * n, Role.ANSWER, 1.0, max_len, seeded_stream(17, "mc-length")
        )
        observed = np.array([len(s.sequence.tokens) for s in sampled])
        sigma = math.sqrt(exact_var / n)
        assert abs(observed.mean() - exact_mean) < 3 * sigma

    def test_near_greedy_redraws_identical(self, vocab):
        # a policy with separated logits (the post-training situation): output
        # biases spaced 0.4 apart, context perturbations bounded by 0.2, so
        # every top-2 logit gap is >= 0.2 and tau=0.01 is effectively greedy
        arch = PolicyArchitecture(vocab.size, 6, 6, 10)
        trained = make_policy(vocab, arch, seed=42)
        trained.params.view("w2")[:] = seeded_stream(42, "w2").uniform(
            -0.01, 0.01, size=trained.params.view("w2").shape
        )
        trained.params.view("b2")[:] = 0.4 * np.arange(vocab.size)
        stream = seeded_stream(23, "prefixes")
        stable = 0
        for i in range(100):
            prefix = tuple(stream.integers(0, vocab.ordinary, size=3).tolist())
            first = trained.sample_sequence(
                prefix, Role.ANSWER, 0.01, 8, seeded_stream(23, f"draw/{i}/0")
            )
            same = all(
                trained.sample_sequence(
                    prefix, Role.ANSWER, 0.01, 8, seeded_stream(23, f"draw/{i}/{r}")
                ).sequence == first.sequence
                for r in range(1, 100)
            )
            stable += same
        assert stable >= 99

    def test_per_row_streams_are_schedule_independent(self, policy, vocab):
        # each row consumes only its own stream, so regrouping rows cannot
        # change the sampled tokens; logprob floats may differ at the ulp
        # level because BLAS reassociates sums across batch shapes
        prefix = (vocab.cp,)
        streams = [seeded_stream(9, f"row/{i}") for i in range(4)]
        batched = policy.sample_many([prefix] * 4, Role.QUERY, 1.0, 12, streams)
        solo = [
            policy.sample_sequence(prefix, Role.QUERY, 1.0, 12, seeded_stream(9, f"row/{i}"))
            for i in range(4)
        ]
        for a, b in zip(batched, solo):
            assert a.sequence == b.sequence
            assert a.total_logprob == pytest.approx(b.total_logprob, abs=1e-9)


class TestSequenceLogprob:
    def test_uniform_three_tokens(self, uniform_policy):
        # 18 sampleable tokens at uniform logits
        lp = uniform_policy.sequence_logprob((), (0, 1, 2))
        assert lp == pytest.approx(3 * math.log(1.0 / 18.0), abs=1e-12)

    def test_matches_recorded_logprobs(self, policy, vocab):
        sampled = policy.sample_sequence((vocab.cp,), Role.QUERY, 1.0, 24, seeded_stream(2, "lp"))
        recomputed = policy.sequence_logprob((vocab.cp,), sampled.sequence.tokens)
        assert recomputed == pytest.approx(sampled.total_logprob, abs=1e-9)

    def test_exhaustive_mass_is_one(self, micro_vocab):
        p = micro_policy(micro_vocab, seed=31)
        total = sum(
            math.exp(p.sequence_logprob((micro_vocab.cp,), tokens))
            for tokens, _ in enumerate_outcomes(micro_vocab, max_len=2)
        )
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_equals_product_of_next_token_probs(self, policy, vocab):
        # challenger conditioning is exactly the CP prefix
        q = (3, 10, 14, vocab.eos)
        lp = policy.sequence_logprob((vocab.cp,), q)
        assert math.exp(lp) == pytest.approx(
            outcome_probability(policy, (vocab.cp,), q), rel=1e-12
        )

    def test_empty_sequence_rejected(self, policy, vocab):
        with pytest.raises(UsageError):
            policy.sequence_logprob((vocab.cp,), ())

    def test_out_of_range_token_rejected(self, policy, vocab):
        with pytest.raises(UsageError):
            policy.sequence_logprob((vocab.cp,), (vocab.size,))

    def test_gradient_matches_finite_differences(self, micro_vocab):
        p = micro_policy(micro_vocab, seed=13)
        items = [((micro_vocab.cp,), (0, 2, micro_vocab.eos)), ((1,), (2, micro_vocab.eos))]

        def loss(params):
            tape = Tape(params)
            node = tape.sum(sequence_logprob_nodes(tape, p.arch, p.vocab, items))
            return float(node.value), tape.backward(node)

        sample = seeded_stream(0, "fd").choice(p.params.values.size, size=30, replace=False)
        assert finite_diff_check(loss, p.params, step=1e-5, sample=sample) < 1e-4


class TestReferenceSnapshot:
    def test_snapshot_unchanged_by_updates(self, micro_vocab):
        p = micro_policy(micro_vocab, seed=3)
        snap = snapshot_reference(p)
        before = snap.sequence_logprob((micro_vocab.cp,), (0, micro_vocab.eos))
        p.params = type(p.params)(p.params.values + 0.25, p.params.layout)
        after = snap.sequence_logprob((micro_vocab.cp,), (0, micro_vocab.eos))
        assert before == after
        with pytest.raises((ValueError, RuntimeError)):
            snap.params.values[0] = 99.0

    def test_snapshot_matches_policy_at_creation(self, micro_vocab):
        p = micro_policy(micro_vocab, seed=3)
        snap = snapshot_reference(p)
        seq = (1, 2, micro_vocab.eos)
        assert snap.sequence_logprob((1,), seq) == p.sequence_logprob((1,), seq)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, vocab):
        arch = PolicyArchitecture(vocab.size, 5, 4, 7)
        p = make_policy(vocab, arch, seed=77)
        path = tmp_path / "model.bin"
        save_checkpoint(path, p)
        loaded = load_checkpoint(path)
        assert loaded.arch == arch
        assert np.array_equal(loaded.params.values, p.params.values)
        # saving the loaded policy reproduces the file byte for byte
        again = tmp_path / "model2.bin"
        save_checkpoint(again, loaded)
        assert path.read_bytes() == again.read_bytes()

    def test_corruption_detected(self, tmp_path, vocab):
        arch = PolicyArchitecture(vocab.size, 5, 4, 7)
        path = tmp_path / "model.bin"
        save_checkpoint(path, make_policy(vocab, arch, seed=1))
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_init_params_seeded_and_bounded(vocab):
    arch = PolicyArchitecture(vocab.size)
    a = init_params(arch, seeded_stream(5, "init"))
    b = init_params(arch, seeded_stream(5, "init"))
    assert np.array_equal(a.values, b.values)
    assert np.abs(a.values).max() <= 0.08
    assert np.array_equal(a.view("b2"), np.zeros(vocab.size))
