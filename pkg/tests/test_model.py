"""Tests for the logits model, rollouts, endpoint bridge, and checkpoints."""

import numpy as np
import pytest

from damlab import (
    MASK,
    LogitsModel,
    ProductSpace,
    TableTargetDist,
    load_model,
    log_path_prob,
    log_path_ratio,
    model_q,
    push_forward_marginals,
    reciprocal_project,
    rollout_from,
    sample_training_level,
    save_model,
    uniform_base,
)
from damlab.errors import (
    ConfigError,
    IncompleteEndpointError,
    InvalidLevelError,
    InvalidTargetError,
    NoMaskedPositionError,
)
from damlab.model import (
    load_array_checkpoint,
    reciprocal_project_batch,
    rollout_indices,
    save_array_checkpoint,
)

from helpers import random_table_dist


class TestLogitsModel:
    def test_zero_logits_match_uniform_base(self):
        space = ProductSpace(vocab_size=91, length=2)
        model = LogitsModel.zeros(space)
        q = model_q(model, np.array([MASK, MASK]))
        assert q.shape == (2, 91)
        np.testing.assert_allclose(q, 1.0 / 182.0, atol=1e-15)
        q1 = model_q(model, np.array([5, MASK]))
        np.testing.assert_allclose(q1[1], 1.0 / 91.0, atol=1e-15)
        np.testing.assert_array_equal(q1[0], 0.0)

    def test_single_boosted_logit_dominates(self):
        space = ProductSpace(vocab_size=3, length=1)
        model = LogitsModel.zeros(space)
        mask_index = space.encode(np.array([MASK]))
        model.logits[mask_index, 0, 1] = 10.0  # token 2's logit slot
        q = model_q(model, np.array([MASK]))
        boosted = 1.0 / (1.0 + 2.0 * np.exp(-10.0))
        assert abs(q[0, 1] - boosted) < 1e-12
        assert abs(q[0, 1] - 1.0) < 1e-3

    def test_rows_sum_to_one_exhaustively(self):
        space = ProductSpace(vocab_size=3, length=2)
        rng = np.random.default_rng(np.random.Philox(11))
        model = LogitsModel(
            space, rng.normal(size=(space.num_states, 2, 3), scale=2.0)
        )
        table = model.as_table()
        digits = space.decode_batch(np.arange(space.num_states))
        for idx in range(space.num_states):
            masked = digits[idx] == MASK
            row = table[idx]
            assert abs(row.sum() - (1.0 if masked.any() else 0.0)) < 1e-9
            assert np.all(row[~masked] == 0.0)
            # each masked position carries an equal share
            if masked.any():
                np.testing.assert_allclose(
                    row[masked].sum(axis=1), 1.0 / masked.sum(), atol=1e-12
                )

    def test_model_q_rejects_terminal_state(self):
        space = ProductSpace(vocab_size=3, length=2)
        model = LogitsModel.zeros(space)
        with pytest.raises(NoMaskedPositionError):
            model_q(model, np.array([1, 2]))

    def test_from_target_round_trip(self):
        space = ProductSpace(vocab_size=3, length=2)
        rng = np.random.default_rng(np.random.Philox(12))
        # position-uniform, position-dependent token laws
        table = np.zeros((space.num_states, 2, 3))
        digits = space.decode_batch(np.arange(space.num_states))
        for idx in range(space.num_states):
            masked = digits[idx] == MASK
            m = masked.sum()
            for p in np.flatnonzero(masked):
                law = rng.gamma(1.0, size=3)
                table[idx, p] = law / law.sum() / m
        target = TableTargetDist(space, table)
        model = LogitsModel.from_target(target)
        np.testing.assert_allclose(model.as_table(), table, atol=1e-12)

    def test_from_target_rejects_position_bias(self):
        space = ProductSpace(vocab_size=2, length=2)
        table = np.zeros((space.num_states, 2, 2))
        idx = space.encode(np.array([MASK, MASK]))
        table[idx, 0] = [0.35, 0.35]  # position 0 carries 0.7
        table[idx, 1] = [0.15, 0.15]
        for state in ([1, MASK], [2, MASK], [MASK, 1], [MASK, 2]):
            i = space.encode(np.array(state))
            p = 0 if state[0] == MASK else 1
            table[i, p] = [0.5, 0.5]
        with pytest.raises(InvalidTargetError):
            LogitsModel.from_target(TableTargetDist(space, table))


class TestRollout:
    def test_terminal_origin_yields_empty_continuations(self):
        space = ProductSpace(vocab_size=3, length=2)
        model = LogitsModel.zeros(space)
        rng = np.random.default_rng(np.random.Philox(21))
        batch = rollout_from(model, np.array([2, 3]), k=4, rng=rng)
        assert batch.k == 4
        assert batch.positions.shape == (4, 0)
        np.testing.assert_array_equal(batch.log_q_model, 0.0)
        np.testing.assert_array_equal(batch.log_q_base, 0.0)
        np.testing.assert_array_equal(
            batch.finals, space.encode(np.array([2, 3]))
        )

    def test_uniform_model_has_zero_log_ratio_to_base(self):
        space = ProductSpace(vocab_size=5, length=3)
        model = LogitsModel.zeros(space)
        rng = np.random.default_rng(np.random.Philox(22))
        batch = rollout_from(model, np.array([MASK, 4, MASK]), k=32, rng=rng)
        np.testing.assert_allclose(
            batch.log_q_model - batch.log_q_base, 0.0, atol=1e-12
        )
        assert batch.positions.shape == (32, 2)
        assert np.all(batch.positions >= 0)

    def test_rollout_marginal_matches_push_forward(self):
        space = ProductSpace(vocab_size=3, length=2)
        rng = np.random.default_rng(np.random.Philox(23))
        target = random_table_dist(space, rng)
        base = uniform_base(space)
        trials = 100_000
        start = np.full(
            trials, space.encode(np.array([MASK, MASK])), dtype=np.int64
        )
        rec = rollout_indices(target, base, start, rng)
        exact = push_forward_marginals(target).table(2)
        final_states = space.level_states(2)
        counts = np.bincount(
            np.searchsorted(final_states, rec["finals"]),
            minlength=len(final_states),
        )
        for c, p in zip(counts, exact):
            sigma = np.sqrt(trials * p * (1 - p))
            assert abs(c - trials * p) <= 3 * sigma + 1e-9

    def test_stored_log_probs_match_path_functions(self):
        space = ProductSpace(vocab_size=3, length=3)
        rng = np.random.default_rng(np.random.Philox(24))
        model = random_table_dist(space, rng)
        base = random_table_dist(space, rng)
        origin = np.array([MASK, 2, MASK])
        batch = rollout_from(model, origin, k=50, rng=rng, base=base)
        for i in range(batch.k):
            traj = batch.trajectory(i)
            assert traj.final_index == batch.finals[i]
            assert traj.events[0].jump_index == 2  # origin is at level 1
            assert abs(
                log_path_prob(model, traj) - batch.log_q_model[i]
            ) < 1e-12
            assert abs(
                log_path_ratio(model, base, traj)
                - (batch.log_q_model[i] - batch.log_q_base[i])
            ) < 1e-12

    def test_rollout_requires_positive_k(self):
        space = ProductSpace(vocab_size=3, length=1)
        model = LogitsModel.zeros(space)
        rng = np.random.default_rng(np.random.Philox(25))
        with pytest.raises(InvalidTargetError):
            rollout_from(model, np.array([MASK]), k=0, rng=rng)

    def test_mixed_levels_finish_independently(self):
        space = ProductSpace(vocab_size=2, length=3)
        model = LogitsModel.zeros(space)
        base = uniform_base(space)
        rng = np.random.default_rng(np.random.Philox(26))
        starts = np.array(
            [
                space.encode(np.array([1, 2, 1])),  # terminal: 0 steps
                space.encode(np.array([MASK, 2, 1])),  # 1 step
                space.encode(np.array([MASK, MASK, MASK])),  # 3 steps
            ]
        )
        rec = rollout_indices(model, base, starts, rng)
        np.testing.assert_array_equal(rec["steps"], [0, 1, 3])
        assert rec["positions"].shape == (3, 3)
        assert np.all(rec["positions"][0] == -1)
        np.testing.assert_array_equal(rec["positions"][1, 1:], -1)
        assert rec["finals"][0] == starts[0]
        levels = space.levels_of_indices(rec["finals"])
        np.testing.assert_array_equal(levels, 3)
        # padded steps contribute nothing to the totals
        np.testing.assert_array_equal(rec["log_q_model"][0], 0.0)
        np.testing.assert_array_equal(rec["log_q_base"][1, 1:], 0.0)


class TestReciprocalProject:
    def test_level_extremes(self):
        space = ProductSpace(vocab_size=4, length=3)
        rng = np.random.default_rng(np.random.Philox(31))
        x1 = np.array([2, 4, 1])
        np.testing.assert_array_equal(
            reciprocal_project(space, x1, 3, rng), x1
        )
        np.testing.assert_array_equal(
            reciprocal_project(space, x1, 0, rng), [MASK, MASK, MASK]
        )

    def test_kept_position_is_uniform(self):
        space = ProductSpace(vocab_size=3, length=2)
        rng = np.random.default_rng(np.random.Philox(32))
        x1 = np.array([1, 3])
        trials = 10_000
        kept_first = 0
        for _ in range(trials):
            out = reciprocal_project(space, x1, 1, rng)
            assert sorted(np.flatnonzero(out == MASK)) in ([0], [1])
            if out[0] != MASK:
                assert out[0] == 1
                kept_first += 1
            else:
                assert out[1] == 3
        sigma = np.sqrt(trials * 0.25)
        assert abs(kept_first - trials / 2) <= 3 * sigma

    def test_rejects_incomplete_endpoint_and_bad_level(self):
        space = ProductSpace(vocab_size=3, length=2)
        rng = np.random.default_rng(np.random.Philox(33))
        with pytest.raises(IncompleteEndpointError):
            reciprocal_project(space, np.array([MASK, 1]), 1, rng)
        for n in (-1, 3):
            with pytest.raises(InvalidLevelError):
                reciprocal_project(space, np.array([1, 1]), n, rng)

    def test_batch_variant_keeps_uniform_subsets(self):
        space = ProductSpace(vocab_size=3, length=3)
        rng = np.random.default_rng(np.random.Philox(34))
        x1 = np.array([2, 1, 3])
        trials = 30_000
        indices = np.full(trials, space.encode(x1), dtype=np.int64)
        out = reciprocal_project_batch(
            space, indices, np.full(trials, 1), rng
        )
        tokens = space.decode_batch(out)
        np.testing.assert_array_equal((tokens != MASK).sum(axis=1), 1)
        # kept tokens always agree with the endpoint
        assert np.all((tokens == MASK) | (tokens == x1))
        kept_counts = (tokens != MASK).sum(axis=0)
        sigma = np.sqrt(trials * (1 / 3) * (2 / 3))
        np.testing.assert_array_less(
            np.abs(kept_counts - trials / 3), 3 * sigma
        )

    def test_batch_variant_respects_per_row_levels(self):
        space = ProductSpace(vocab_size=3, length=3)
        rng = np.random.default_rng(np.random.Philox(35))
        indices = np.full(6, space.encode(np.array([1, 2, 3])), dtype=np.int64)
        levels = np.array([0, 1, 2, 3, 2, 0])
        out = reciprocal_project_batch(space, indices, levels, rng)
        np.testing.assert_array_equal(space.levels_of_indices(out), levels)


class TestSampleTrainingLevel:
    def test_single_position_always_level_zero(self):
        rng = np.random.default_rng(np.random.Philox(41))
        assert all(sample_training_level(1, rng) == 0 for _ in range(100))

    def test_two_positions_are_balanced(self):
        rng = np.random.default_rng(np.random.Philox(42))
        trials = 10_000
        ones = sum(sample_training_level(2, rng) for _ in range(trials))
        sigma = np.sqrt(trials * 0.25)
        assert abs(ones - trials / 2) <= 3 * sigma

    def test_eight_positions_cover_range_uniformly(self):
        rng = np.random.default_rng(np.random.Philox(43))
        trials = 100_000
        draws = np.array(
            [sample_training_level(8, rng) for _ in range(trials)]
        )
        counts = np.bincount(draws, minlength=8)
        assert draws.min() == 0 and draws.max() == 7
        sigma = np.sqrt(trials * (1 / 8) * (7 / 8))
        np.testing.assert_array_less(
            np.abs(counts - trials / 8), 3 * sigma
        )

    def test_rejects_empty_sequence(self):
        rng = np.random.default_rng(np.random.Philox(44))
        with pytest.raises(InvalidLevelError):
            sample_training_level(0, rng)


class TestCheckpoints:
    def test_model_round_trip_is_bit_exact(self, tmp_path):
        space = ProductSpace(vocab_size=7, length=2)
        rng = np.random.default_rng(np.random.Philox(51))
        model = LogitsModel(
            space, rng.normal(size=(space.num_states, 2, 7), scale=3.0)
        )
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.space == space
        assert np.array_equal(loaded.logits, model.logits)
        assert loaded.logits.tobytes() == model.logits.tobytes()

    def test_repeated_saves_are_byte_identical(self, tmp_path):
        space = ProductSpace(vocab_size=3, length=2)
        model = LogitsModel.zeros(space)
        model.logits += 0.125
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(model, a)
        save_model(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_generic_array_round_trip(self, tmp_path):
        path = tmp_path / "table.ckpt"
        values = np.linspace(-4.0, 4.0, 12).reshape(3, 4)
        save_array_checkpoint(path, values, {"kind": "value_table"})
        meta, loaded = load_array_checkpoint(path)
        assert meta["kind"] == "value_table"
        assert np.array_equal(loaded, values)

    def test_corrupt_files_are_rejected(self, tmp_path):
        space = ProductSpace(vocab_size=3, length=1)
        good = tmp_path / "good.ckpt"
        save_model(LogitsModel.zeros(space), good)
        blob = good.read_bytes()

        bad_magic = tmp_path / "bad_magic.ckpt"
        bad_magic.write_bytes(b"NOT-A-CKPT\n" + blob)
        truncated = tmp_path / "truncated.ckpt"
        truncated.write_bytes(blob[:-16])
        bad_json = tmp_path / "bad_json.ckpt"
        bad_json.write_bytes(blob[: len(b"DAMLAB-CKPT v1\n")] + b"{oops\n" + blob[-8:])
        for path in (bad_magic, truncated, bad_json, tmp_path / "missing.ckpt"):
            with pytest.raises(ConfigError):
                load_array_checkpoint(path)

    def test_kind_mismatch_is_rejected(self, tmp_path):
        path = tmp_path / "table.ckpt"
        save_array_checkpoint(path, np.zeros(3), {"kind": "value_table"})
        with pytest.raises(ConfigError):
            load_model(path)
