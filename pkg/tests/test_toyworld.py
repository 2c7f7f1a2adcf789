"""Synthetic chain world: task generation, rendering, oracle model behavior
against closed-form probabilities."""

import math

import numpy as np
import pytest

from r3.core import R3Config, StructuralError, TokenSeq
from r3.models import CallAccountant, denoise_region
from r3.rng import derive_stream
from r3.toyworld import (
    MASK_ID,
    PAD_ID,
    ChainTask,
    NoisyOracleDenoiser,
    OracleProcessReward,
    ToyParams,
    apply_op,
    grade,
    make_models,
    make_task,
)


def small_cfg(**kw):
    defaults = dict(n_total=4, block_len=8, window=4, seed=1)
    defaults.update(kw)
    return R3Config(**defaults)


def truth_seq(task, cfg):
    seq = TokenSeq.from_prompt(task.prompt(), cfg.block_len, MASK_ID)
    for b in range(cfg.n_total):
        seq = seq.append_block(task.render_value(task.truth[b]))
    return seq


class TestChainTask:
    def test_same_seed_same_task(self):
        cfg = small_cfg()
        params = ToyParams(digit_width=4)
        assert make_task(9, cfg, params) == make_task(9, cfg, params)
        assert make_task(9, cfg, params) != make_task(10, cfg, params)

    def test_chain_consistency(self):
        task = make_task(5, small_cfg(), ToyParams(digit_width=4))
        value = task.start_value
        for op, expected in zip(task.ops, task.truth):
            value = apply_op(op, value)
            assert value == expected
            assert 0 <= value < task.value_limit

    def test_render_decode_roundtrip_for_all_intermediates(self):
        task = make_task(21, small_cfg(), ToyParams(digit_width=4))
        for v in (task.start_value,) + task.truth:
            assert task.decode_block(task.render_value(v)) == v

    def test_rendering_is_exactly_block_len(self):
        cfg = R3Config(seed=0)
        task = make_task(0, cfg)
        block = task.render_value(task.truth[0])
        assert len(block) == 32
        assert block[6:] == [PAD_ID] * 26

    def test_full_shape_is_16_blocks_of_32(self):
        cfg = R3Config(seed=3)
        task = make_task(3, cfg)
        seq = truth_seq(task, cfg)
        assert len(seq.tokens) - seq.prompt_len == 512

    def test_decode_rejects_malformed_blocks(self):
        task = make_task(2, small_cfg(), ToyParams(digit_width=4))
        assert task.decode_block([0, 1, 2]) is None  # wrong length
        assert task.decode_block([PAD_ID] * 8) is None  # pad in digits
        assert task.decode_block([1, 2, 3, 4, 0, PAD_ID, PAD_ID, PAD_ID]) is None  # digit in pad

    def test_digit_width_must_fit_block(self):
        with pytest.raises(StructuralError):
            make_task(1, small_cfg(block_len=3), ToyParams(digit_width=4))


class TestNoisyOracleDenoiser:
    def test_error_rate_matches_p_err(self):
        # 10000 fresh single-block draws at p_err = 0.3 land within 3 SE of 0.7
        cfg = small_cfg(n_total=1, window=1, seed=8)
        params = ToyParams(p_err=0.3, digit_width=4)
        task = make_task(8, cfg, params)
        dn = NoisyOracleDenoiser(task, params.p_err)
        base = TokenSeq.from_prompt(task.prompt(), cfg.block_len, MASK_ID)
        hits = 0
        n = 10000
        for i in range(n):
            masked = base.append_masked_block()
            start, stop = masked.block_bounds(0)
            out = dn.denoise(
                masked, frozenset(range(start, stop)), 0.8, 4, derive_stream(8, 0, 0, "x", i)
            )
            hits += task.decode_block(out.block_slice(0)) == task.truth[0]
        se = math.sqrt(0.3 * 0.7 / n)
        assert abs(hits / n - 0.7) <= 3 * se

    def test_zero_error_rate_reproduces_truth(self):
        cfg = small_cfg(seed=4)
        params = ToyParams(p_err=0.0, digit_width=4)
        task = make_task(4, cfg, params)
        dn = NoisyOracleDenoiser(task, 0.0)
        seq = TokenSeq.from_prompt(task.prompt(), cfg.block_len, MASK_ID)
        acct = CallAccountant()
        for b in range(cfg.n_total):
            seq = seq.append_masked_block()
            start, stop = seq.block_bounds(b)
            seq = denoise_region(
                dn, seq, frozenset(range(start, stop)), 0.8, 4, derive_stream(4, 0, b, "x"), acct
            )
        assert grade(seq, task).all_blocks_correct

    def test_untouched_digits_survive_partial_remask(self):
        # a wrong block with only some digits remasked keeps its surviving
        # wrong digits: the redraw writes masked positions only
        cfg = small_cfg(seed=6)
        params = ToyParams(p_err=0.0, digit_width=4)
        task = make_task(6, cfg, params)
        dn = NoisyOracleDenoiser(task, 0.0)
        wrong = (task.truth[0] + 1111) % task.value_limit
        seq = TokenSeq.from_prompt(task.prompt(), cfg.block_len, MASK_ID)
        seq = seq.append_block(task.render_value(wrong))
        start, _ = seq.block_bounds(0)
        masked = seq.with_masks([start])  # remask first digit only
        out = dn.denoise(masked, frozenset({start}), 0.8, 4, derive_stream(6, 0, 0, "x"))
        got = out.block_slice(0)
        want_digits = task.render_value(task.truth[0])[:1] + task.render_value(wrong)[1:4]
        assert got[:4] == want_digits

    def test_masked_padding_refilled_with_padding(self):
        cfg = small_cfg(seed=6)
        params = ToyParams(p_err=0.5, digit_width=4)
        task = make_task(6, cfg, params)
        dn = NoisyOracleDenoiser(task, 0.5)
        seq = truth_seq(task, cfg)
        start, stop = seq.block_bounds(1)
        pad_pos = stop - 1
        masked = seq.with_masks([pad_pos])
        out = dn.denoise(masked, frozenset({pad_pos}), 0.8, 4, derive_stream(6, 0, 1, "y"))
        assert out.tokens[pad_pos] == PAD_ID
        # no digits were masked, so the value itself is unchanged
        assert out.block_slice(1)[:4] == seq.block_slice(1)[:4]


class TestOracleProcessReward:
    def test_exact_mode_straddles_threshold(self):
        cfg = small_cfg(seed=12)
        params = ToyParams(digit_width=4)
        task = make_task(12, cfg, params)
        prm = OracleProcessReward(task, params)
        seq = truth_seq(task, cfg)
        rng = derive_stream(12, 0, 0, "prm")
        good = prm.score(seq.context_before(1), seq.block_slice(1), rng)
        bad_block = task.render_value((task.truth[1] + 7) % task.value_limit)
        bad = prm.score(seq.context_before(1), bad_block, rng)
        assert good == params.hi > 0.8
        assert bad == params.lo < 0.8

    def test_truth_mode_ignores_corrupted_context(self):
        cfg = small_cfg(seed=12)
        params = ToyParams(digit_width=4, context_mode="truth")
        task = make_task(12, cfg, params)
        prm = OracleProcessReward(task, params)
        seq = truth_seq(task, cfg)
        corrupt = list(seq.context_before(2))
        corrupt[-1] = (corrupt[-1] + 1) % 9  # damage block 1 inside the context
        score = prm.score(corrupt, seq.block_slice(2), derive_stream(12, 0, 2, "prm"))
        assert score == params.hi

    def test_contextual_mode_blames_successor_of_wrong_block(self):
        cfg = small_cfg(seed=12)
        params = ToyParams(digit_width=4, context_mode="contextual")
        task = make_task(12, cfg, params)
        prm = OracleProcessReward(task, params)
        seq = truth_seq(task, cfg)
        rng = derive_stream(12, 0, 2, "prm")
        # clean context: the true block 2 scores hi
        assert prm.score(seq.context_before(2), seq.block_slice(2), rng) == params.hi
        # wrong predecessor: the same true block 2 now scores lo
        wrong_prev = task.render_value((task.truth[1] + 5) % task.value_limit)
        corrupted = seq.replace_window(1, [wrong_prev])
        assert prm.score(corrupted.context_before(2), seq.block_slice(2), rng) == params.lo
        # but a block consistent with the wrong chain scores hi
        consistent = task.render_value(apply_op(task.ops[2], (task.truth[1] + 5) % task.value_limit))
        if task.decode_block(consistent) is not None:
            assert prm.score(corrupted.context_before(2), consistent, rng) == params.hi

    def test_undecodable_context_scores_lo_in_contextual_mode(self):
        cfg = small_cfg(seed=13)
        params = ToyParams(digit_width=4, context_mode="contextual")
        task = make_task(13, cfg, params)
        prm = OracleProcessReward(task, params)
        seq = truth_seq(task, cfg)
        garbled = list(seq.context_before(1))
        garbled[-1] = 5  # digit token in a pad slot: block 0 now undecodable
        assert prm.score(garbled, seq.block_slice(1), derive_stream(13, 0, 1, "prm")) == params.lo

    def test_noisy_mode_stays_in_range_and_is_stream_deterministic(self):
        cfg = small_cfg(seed=14)
        params = ToyParams(digit_width=4, prm_mode="noisy", noise_sigma=0.3)
        task = make_task(14, cfg, params)
        prm = OracleProcessReward(task, params)
        seq = truth_seq(task, cfg)
        scores = [
            prm.score(seq.context_before(1), seq.block_slice(1), derive_stream(14, 0, 1, "p", i))
            for i in range(200)
        ]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert len(set(round(s, 9) for s in scores)) > 1
        again = prm.score(seq.context_before(1), seq.block_slice(1), derive_stream(14, 0, 1, "p", 0))
        assert again == scores[0]

    def test_misaligned_context_rejected(self):
        cfg = small_cfg(seed=14)
        params = ToyParams(digit_width=4)
        task = make_task(14, cfg, params)
        prm = OracleProcessReward(task, params)
        with pytest.raises(StructuralError):
            prm.score([1, 2, 3], [0] * 8, derive_stream(14, 0, 0, "p"))


class TestGrade:
    def test_error_free_sequence_all_correct(self):
        cfg = small_cfg(seed=2)
        task = make_task(2, cfg, ToyParams(digit_width=4))
        report = grade(truth_seq(task, cfg), task)
        assert report.overall and report.all_blocks_correct and not report.undecodable

    def test_overall_follows_final_block_only(self):
        cfg = small_cfg(seed=2)
        task = make_task(2, cfg, ToyParams(digit_width=4))
        seq = truth_seq(task, cfg)
        wrong = task.render_value((task.truth[1] + 3) % task.value_limit)
        report = grade(seq.replace_window(1, [wrong]), task)
        assert report.overall  # final block untouched
        assert not report.all_blocks_correct
        assert report.per_block == [True, False, True, True]

    def test_undecodable_block_is_incorrect_not_fatal(self):
        cfg = small_cfg(seed=2)
        task = make_task(2, cfg, ToyParams(digit_width=4))
        seq = truth_seq(task, cfg)
        garbage = [PAD_ID] * 8
        report = grade(seq.replace_window(3, [garbage]), task)
        assert not report.overall
        assert report.undecodable == [3]


class TestRefinementCorrection:
    def test_fully_remasked_wrong_block_corrected_with_bon_rate(self):
        # with the value tokens fully remasked, one refinement round of
        # n_samples independent draws fixes a wrong block with probability
        # >= 1 - p_err^n_samples; Monte-Carlo within 3 SE of the closed form
        from r3.engine import ItemState, WindowRef, propose_candidates, score_candidates, select_best, apply_selection
        from r3.core import ScoreLedger, Transcript

        p_err, n_samples, n = 0.3, 5, 2000
        cfg = R3Config(
            n_total=1, block_len=8, window=1, n_samples=n_samples, beta_i=1.0, seed=0
        )
        params = ToyParams(p_err=p_err, digit_width=4)
        fixed = 0
        for i in range(n):
            cfg_i = R3Config(
                n_total=1, block_len=8, window=1, n_samples=n_samples, beta_i=1.0, seed=i
            )
            task = make_task(i, cfg_i, params)
            dn, prm = make_models(task, params)
            seq = TokenSeq.from_prompt(task.prompt(), cfg_i.block_len, MASK_ID)
            wrong = (task.truth[0] + 1 + (i % 7)) % task.value_limit
            seq = seq.append_block(task.render_value(wrong))
            state = ItemState(0, seq, ScoreLedger(1), Transcript())
            state.ledger.add_placeholder()
            win = WindowRef(0, 0)
            scores = [params.lo]
            state.ledger.fill(0, scores)
            cset = propose_candidates(state, win, scores, dn, cfg_i, CallAccountant())
            score_candidates(cset, state, prm, cfg_i, CallAccountant())
            apply_selection(state, cset, select_best(cset, scores, cfg_i))
            fixed += grade(state.seq, task).overall
        expect = 1 - p_err**n_samples
        se = math.sqrt(expect * (1 - expect) / n)
        assert fixed / n >= expect - 3 * se
