import math

import numpy as np
import pytest

from bplm import tensor as T
from bplm.model import AttentionMode, forward
from bplm.objectives import (IGNORE_INDEX, LmBatch, MaskingPlan, Objective,
                             clm_loss, mlm_loss, pretrain_loss, select_mask)
from bplm.tensor import Tape, Tensor, backward

BIG = 1e9


class TestSelectMask:
    def test_full_mask(self, rng):
        plan = select_mask([5, 6, 7, 8], 1.0, rng, mask_token_id=1)
        assert plan.masked_positions == [0, 1, 2, 3]
        assert plan.original_targets == [5, 6, 7, 8]

    def test_binomial_bound(self):
        # binomial oracle: 10,000 positions at ratio 0.4
        rng = np.random.default_rng(0)
        tokens = list(range(3, 13)) * 1000
        plan = select_mask(tokens, 0.4, rng, mask_token_id=1)
        n = len(plan.masked_positions)
        sd = math.sqrt(10_000 * 0.4 * 0.6)
        assert abs(n - 4000) <= 3 * sd

    def test_pads_never_masked(self, rng):
        tokens = [5, 6, 0, 0]
        pad = [True, True, False, False]
        for _ in range(50):
            plan = select_mask(tokens, 0.9, rng, 1, pad)
            assert all(p < 2 for p in plan.masked_positions)

    def test_deterministic_in_seed(self):
        tokens = list(range(3, 60))
        a = select_mask(tokens, 0.3, np.random.default_rng(7), 1)
        b = select_mask(tokens, 0.3, np.random.default_rng(7), 1)
        assert a.masked_positions == b.masked_positions

    def test_never_empty(self):
        # tiny ratio on one position still produces a non-empty plan
        plan = select_mask([5], 0.05, np.random.default_rng(0), 1)
        assert plan.masked_positions == [0]

    def test_bad_ratio(self, rng):
        with pytest.raises(ValueError):
            select_mask([5], 0.0, rng, 1)

    def test_apply_writes_placeholder(self, rng):
        tokens = [5, 6, 7]
        plan = select_mask(tokens, 1.0, rng, mask_token_id=1)
        assert plan.apply(tokens) == [1, 1, 1]
        assert tokens == [5, 6, 7]  # original untouched


class TestMlmLoss:
    def test_uniform(self):
        logits = Tensor(np.zeros((3, 4)))
        plan = MaskingPlan(0.4, 1, [1], [2])
        assert abs(mlm_loss(logits, plan).item() - math.log(4)) < 1e-12

    def test_perfect_prediction(self):
        logits = np.zeros((2, 4))
        logits[0, 3] = BIG
        plan = MaskingPlan(0.4, 1, [0], [3])
        assert mlm_loss(Tensor(logits), plan).item() < 1e-9

    def test_masked_mean(self):
        # positions engineered to contribute ln2 and ln4
        logits = np.full((2, 4), -BIG)
        logits[0, :2] = 0.0          # two-way uniform -> ln 2
        logits[1, :] = 0.0           # four-way uniform -> ln 4
        plan = MaskingPlan(0.4, 1, [0, 1], [0, 0])
        expected = (math.log(2) + math.log(4)) / 2
        assert abs(mlm_loss(Tensor(logits), plan).item() - expected) < 1e-12

    def test_empty_plan(self):
        with pytest.raises(ValueError):
            mlm_loss(Tensor(np.zeros((2, 4))), MaskingPlan(0.4, 1, [], []))

    def test_gradient_zero_at_unmasked(self, rng):
        logits = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
        plan = MaskingPlan(0.4, 1, [1, 3], [2, 6])
        with Tape() as tape:
            loss = mlm_loss(logits, plan)
        backward(loss, tape)
        for pos in (0, 2, 4):
            np.testing.assert_array_equal(logits.grad[pos], np.zeros(7))
        for pos in (1, 3):
            assert np.abs(logits.grad[pos]).max() > 0


class TestClmLoss:
    def test_uniform(self):
        assert abs(clm_loss(Tensor(np.zeros((3, 4))), [1, 2, 3]).item()
                   - math.log(4)) < 1e-12

    def test_single_token_rejected(self):
        with pytest.raises(ValueError):
            clm_loss(Tensor(np.zeros((1, 4))), [1])

    def test_pad_targets_ignored(self):
        # prediction into a pad position contributes nothing
        logits = np.zeros((4, 4))
        logits[2] = 99.0  # would-be prediction of the pad target
        value = clm_loss(Tensor(logits), [1, 2, 3, 0],
                         [True, True, True, False]).item()
        assert abs(value - math.log(4)) < 1e-12

    def test_shift_identity(self, rng):
        # internal consistency: equals cross entropy on shifted targets
        tokens = [3, 1, 2, 3]
        logits = Tensor(rng.normal(size=(4, 4)))
        targets = [1, 2, 3, IGNORE_INDEX]
        direct = T.cross_entropy_from_logits(logits, targets,
                                             IGNORE_INDEX).item()
        assert clm_loss(logits, tokens).item() == direct


class TestPretrainLoss:
    def test_clm_batch_of_identical_rows(self, tiny_cfg, tiny_params):
        row = [3, 4, 5, 6]
        batch = LmBatch([row, row], [[True] * 4] * 2)
        batched = pretrain_loss(Objective.CLM, tiny_params, tiny_cfg, batch)
        _, logits = forward(tiny_params, tiny_cfg, row, AttentionMode.CAUSAL)
        single = clm_loss(logits, row)
        assert abs(batched.item() - single.item()) < 1e-12

    def test_mlm_full_ratio_zero_head(self, tiny_cfg, tiny_params, rng):
        params = dict(tiny_params)
        params["head"] = Tensor(
            np.zeros((tiny_cfg.embed_dim, tiny_cfg.vocab_size)))
        rows = [[3, 4, 5, 6]]
        plan = select_mask(rows[0], 1.0, rng, mask_token_id=1)
        batch = LmBatch(rows, [[True] * 4], [plan])
        value = pretrain_loss(Objective.MLM, params, tiny_cfg, batch).item()
        assert abs(value - math.log(tiny_cfg.vocab_size)) < 1e-12

    def test_objectives_differ(self, tiny_cfg, tiny_params, rng):
        rows = [[3, 4, 5, 6, 7, 8]]
        pads = [[True] * 6]
        plan = select_mask(rows[0], 0.4, rng, mask_token_id=1)
        clm = pretrain_loss(Objective.CLM, tiny_params, tiny_cfg,
                            LmBatch(rows, pads)).item()
        mlm = pretrain_loss(Objective.MLM, tiny_params, tiny_cfg,
                            LmBatch(rows, pads, [plan])).item()
        assert math.isfinite(clm) and math.isfinite(mlm)
        assert clm != mlm

    def test_mlm_without_plans_rejected(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError, match="plan"):
            pretrain_loss(Objective.MLM, tiny_params, tiny_cfg,
                          LmBatch([[3, 4]], [[True, True]]))

    def test_empty_batch_rejected(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError):
            pretrain_loss(Objective.CLM, tiny_params, tiny_cfg,
                          LmBatch([], []))
