import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bplm.optim import (AdamWState, WsdSchedule, adamw_step, clip_global_norm,
                        finetune_lr, wsd_lr)
from bplm.tensor import Tensor

PAPER_SCHEDULE = WsdSchedule(peak_lr=5e-4, warmup_steps=2000,
                             total_steps=42_000, decay_steps=2000)


class TestWsdLr:
    def test_end_of_warmup(self):
        assert wsd_lr(PAPER_SCHEDULE, 1999) == 5e-4

    def test_stable_plateau(self):
        assert wsd_lr(PAPER_SCHEDULE, 21_000) == 5e-4
        assert wsd_lr(PAPER_SCHEDULE, 39_999) == 5e-4

    def test_mid_decay(self):
        # linear interpolation oracle over the final 2000 steps
        assert abs(wsd_lr(PAPER_SCHEDULE, 41_000) - 2.5e-4) < 1e-19

    def test_warmup_continuous_at_boundary(self):
        s = WsdSchedule(1e-3, 10, 100, 10)
        assert wsd_lr(s, 9) == pytest.approx(1e-3)
        assert wsd_lr(s, 10) == 1e-3

    def test_step_zero_nonzero(self):
        assert wsd_lr(PAPER_SCHEDULE, 0) > 0

    def test_non_negative_everywhere(self):
        s = WsdSchedule(1e-3, 5, 50, 7)
        values = [wsd_lr(s, step) for step in range(50)]
        assert all(v >= 0 for v in values)
        assert max(values) == 1e-3

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            wsd_lr(PAPER_SCHEDULE, 42_000)
        with pytest.raises(ValueError):
            wsd_lr(PAPER_SCHEDULE, -1)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            WsdSchedule(5e-4, 60, 100, 50)


class TestFinetuneLr:
    def test_end_of_warmup(self):
        assert finetune_lr(1e-4, 1000, 99) == 1e-4

    def test_mid_decay(self):
        expected = 1e-4 * (1000 - 549) / 900
        assert finetune_lr(1e-4, 1000, 549) == pytest.approx(expected)
        assert expected == pytest.approx(0.5011e-4, rel=1e-3)

    def test_decay_endpoint(self):
        assert finetune_lr(1e-4, 1000, 999) == pytest.approx(1e-4 / 900)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            finetune_lr(1e-4, 1000, 1000)


class TestClipGlobalNorm:
    def test_exact_halving(self):
        grads = {"a": np.array([2.0, 0.0]), "b": np.zeros(3)}
        factor = clip_global_norm(grads, 1.0)
        assert factor == 0.5
        assert math.sqrt(sum((g ** 2).sum() for g in grads.values())) \
            == pytest.approx(1.0)

    def test_under_threshold(self):
        grads = {"a": np.array([0.5])}
        assert clip_global_norm(grads, 1.0) == 1.0
        np.testing.assert_array_equal(grads["a"], [0.5])

    def test_zero_gradients(self):
        assert clip_global_norm({"a": np.zeros(4)}, 1.0) == 1.0

    @given(st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_norm_bound_property(self, seed):
        rng = np.random.default_rng(seed)
        grads = {f"p{i}": rng.normal(size=rng.integers(1, 10)) * 10
                 for i in range(3)}
        before = {k: np.abs(v).copy() for k, v in grads.items()}
        clip_global_norm(grads, 1.0)
        total = math.sqrt(sum((g ** 2).sum() for g in grads.values()))
        assert total <= 1.0 + 1e-12
        for k in grads:  # clipping never increases a magnitude
            assert (np.abs(grads[k]) <= before[k] + 1e-15).all()


def fresh(wd=0.0, eps=1e-12):
    return AdamWState(beta1=0.9, beta2=0.95, eps=eps, weight_decay=wd)


class TestAdamW:
    def test_closed_form_single_step(self):
        # m-hat = v-hat = 1 for unit gradient from a fresh state
        params = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        adamw_step(params, {"w": np.ones(2)}, fresh(), lr=0.1)
        np.testing.assert_allclose(params["w"].data, [0.9, -2.1], atol=1e-9)

    def test_zero_gradient_identity(self):
        params = {"w": Tensor(np.array([3.0]), requires_grad=True)}
        state = fresh()
        adamw_step(params, {"w": np.zeros(1)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, [3.0])
        np.testing.assert_array_equal(state.m["w"], [0.0])
        np.testing.assert_array_equal(state.v["w"], [0.0])
        assert state.step_count == 1

    def test_decoupled_decay(self):
        params = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        adamw_step(params, {"w": np.zeros(1)}, fresh(wd=0.1), lr=0.1)
        np.testing.assert_allclose(params["w"].data, [2.0 * 0.99], atol=1e-15)

    def test_norm_gains_skip_decay(self):
        params = {"final_norm": Tensor(np.array([2.0]), requires_grad=True)}
        adamw_step(params, {"final_norm": np.zeros(1)}, fresh(wd=0.1), lr=0.1)
        np.testing.assert_array_equal(params["final_norm"].data, [2.0])

    def test_bit_identical_twins(self, rng):
        def run():
            params = {"w": Tensor(np.linspace(-1, 1, 8), requires_grad=True)}
            state = fresh(wd=0.1, eps=1e-5)
            g = np.random.default_rng(5)
            for step in range(20):
                adamw_step(params, {"w": g.normal(size=8)}, state, lr=1e-3)
            return params["w"].data
        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch(self):
        params = {"w": Tensor(np.zeros(3), requires_grad=True)}
        with pytest.raises(ValueError):
            adamw_step(params, {"w": np.zeros(2)}, fresh(), lr=0.1)

    def test_step_count_increments(self):
        params = {"w": Tensor(np.zeros(1), requires_grad=True)}
        state = fresh()
        for expected in (1, 2, 3):
            adamw_step(params, {"w": np.zeros(1)}, state, lr=0.1)
            assert state.step_count == expected
