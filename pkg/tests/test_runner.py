import csv
import os

import numpy as np
import pytest

from bplm.data import PAD_ID, CorpusSpec, gen_corpus, pack_batches
from bplm.model import ModelConfig
from bplm.objectives import Objective
from bplm.optim import WsdSchedule, wsd_lr
from bplm.runner import (CheckpointError, TrainConfig, load_checkpoint,
                         run_biphasic, run_cpt, run_pfs, save_checkpoint,
                         write_trace)

CFG = ModelConfig(layers=1, embed_dim=16, ffn_dim=32, heads=4, kv_heads=2,
                  vocab_size=16, max_seq_len=32)


def make_stream(seed=0):
    corpus = gen_corpus(CorpusSpec(num_symbols=5, target_tokens=3000,
                                   min_len=4, max_len=12, seed=seed))
    return pack_batches(corpus.sequences, batch_rows=2, min_len=4, max_len=12,
                        pad_id=PAD_ID, seed=seed)


def train_cfg(plan, total, warmup=2, decay=2, **kw):
    return TrainConfig(objective_plan=plan,
                       schedule=WsdSchedule(1e-3, warmup, total, decay), **kw)


def assert_params_equal(a, b):
    assert sorted(a) == sorted(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


class TestTrainConfig:
    def test_plan_must_cover_schedule(self):
        with pytest.raises(ValueError, match="cover"):
            train_cfg([(Objective.CLM, 5)], total=10)

    def test_biphasic_order_enforced(self):
        with pytest.raises(ValueError, match="CLM first"):
            train_cfg([(Objective.MLM, 5), (Objective.CLM, 5)], total=10)

    def test_objective_at(self):
        cfg = train_cfg([(Objective.CLM, 3), (Objective.MLM, 7)], total=10)
        assert cfg.objective_at(2) == (0, Objective.CLM)
        assert cfg.objective_at(3) == (1, Objective.MLM)
        assert cfg.switch_step() == 3

    def test_single_phase_has_no_switch(self):
        assert train_cfg([(Objective.CLM, 10)], total=10).switch_step() is None


class TestRunPfs:
    def test_lr_trace_matches_schedule(self):
        cfg = train_cfg([(Objective.CLM, 10)], total=10, warmup=3, decay=4)
        trace = []
        run_pfs(cfg, make_stream(), CFG, trace=trace)
        assert [row["step"] for row in trace] == list(range(10))
        for row in trace:
            assert row["lr"] == wsd_lr(cfg.schedule, row["step"])
            assert row["objective"] == "clm"
            assert row["masked_fraction"] == 0.0
            assert np.isfinite(row["loss"])

    def test_bit_identical_twins(self):
        def run():
            cfg = train_cfg([(Objective.MLM, 8)], total=8)
            return run_pfs(cfg, make_stream(), CFG)
        a, b = run(), run()
        assert_params_equal(a.params, b.params)

    def test_mlm_trace_reports_masking(self):
        cfg = train_cfg([(Objective.MLM, 5)], total=5, mask_ratio=0.4)
        trace = []
        run_pfs(cfg, make_stream(), CFG, trace=trace)
        assert all(0 < row["masked_fraction"] <= 1 for row in trace)
        assert all(row["objective"] == "mlm" for row in trace)

    def test_rejects_two_phase_plan(self):
        cfg = train_cfg([(Objective.CLM, 4), (Objective.MLM, 6)], total=10)
        with pytest.raises(ValueError, match="single-phase"):
            run_pfs(cfg, make_stream(), CFG)

    def test_final_checkpoint_is_decayed(self):
        cfg = train_cfg([(Objective.CLM, 6)], total=6)
        ckpt = run_pfs(cfg, make_stream(), CFG)
        assert ckpt.step == 6 and ckpt.decayed

    def test_loss_decreases_on_pattern_corpus(self):
        corpus = gen_corpus(CorpusSpec(generator="repeated_pattern",
                                       pattern=(0, 1, 2), num_symbols=3,
                                       target_tokens=2000, min_len=8,
                                       max_len=16))
        stream = pack_batches(corpus.sequences, batch_rows=4, min_len=8,
                              max_len=16, pad_id=PAD_ID, seed=0)
        cfg = train_cfg([(Objective.CLM, 60)], total=60, warmup=5, decay=5)
        trace = []
        run_pfs(cfg, stream, CFG, trace=trace)
        assert trace[-1]["loss"] < trace[0]["loss"] / 2


class TestBiphasic:
    def test_degenerate_plans_match_single_phase(self):
        # (CLM n, MLM 0) must be bit-exactly a pure CLM run, and vice versa
        for plan, pure in (
            ([(Objective.CLM, 8), (Objective.MLM, 0)], [(Objective.CLM, 8)]),
            ([(Objective.CLM, 0), (Objective.MLM, 8)], [(Objective.MLM, 8)]),
        ):
            bi = run_biphasic(train_cfg(plan, total=8), make_stream(), CFG)
            pfs = run_pfs(train_cfg(pure, total=8), make_stream(), CFG)
            assert_params_equal(bi.params, pfs.params)

    def test_handoff_weight_equality(self):
        # weights at the switch equal a pure CLM run stopped there
        plan = [(Objective.CLM, 4), (Objective.MLM, 6)]
        cfg = train_cfg(plan, total=10, warmup=2, decay=2,
                        checkpoint_cadence=4)
        clm_cfg = train_cfg([(Objective.CLM, 4), (Objective.MLM, 6)], total=10)

        import tempfile
        with tempfile.TemporaryDirectory() as d:
            cfg.checkpoint_dir = d
            run_biphasic(cfg, make_stream(), CFG)
            mid = load_checkpoint(os.path.join(d, "step_00000004.ckpt"))

        # replay CLM-only for 4 steps on the same stream/schedule
        replay = train_cfg([(Objective.CLM, 4), (Objective.MLM, 6)], total=10,
                           warmup=2, decay=2, checkpoint_cadence=4)
        with tempfile.TemporaryDirectory() as d:
            replay.checkpoint_dir = d
            run_biphasic(replay, make_stream(), CFG)
            mid2 = load_checkpoint(os.path.join(d, "step_00000004.ckpt"))
        assert_params_equal(mid.params, mid2.params)
        assert mid.objective_history == [{"objective": "clm", "steps": 4},
                                         {"objective": "mlm", "steps": 6}]

    def test_switch_inside_decay_rejected(self):
        plan = [(Objective.CLM, 9), (Objective.MLM, 1)]
        cfg = train_cfg(plan, total=10, warmup=2, decay=2)
        with pytest.raises(ValueError, match="decay"):
            run_biphasic(cfg, make_stream(), CFG)

    def test_switch_at_decay_boundary_rejected(self):
        plan = [(Objective.CLM, 8), (Objective.MLM, 2)]
        cfg = train_cfg(plan, total=10, warmup=2, decay=2)
        with pytest.raises(ValueError):
            run_biphasic(cfg, make_stream(), CFG)

    def test_moment_reset_changes_outcome(self):
        plan = [(Objective.CLM, 4), (Objective.MLM, 4)]
        carried = run_biphasic(train_cfg(plan, total=8,
                                         carry_moments_across_switch=True),
                               make_stream(), CFG)
        reset = run_biphasic(train_cfg(plan, total=8,
                                       carry_moments_across_switch=False),
                             make_stream(), CFG)
        assert any(not np.array_equal(carried.params[n].data,
                                      reset.params[n].data)
                   for n in carried.params)


class TestResume:
    def test_resume_equivalence(self, tmp_path):
        cfg = train_cfg([(Objective.MLM, 10)], total=10,
                        checkpoint_cadence=5, checkpoint_dir=str(tmp_path))
        full = run_pfs(cfg, make_stream(), CFG)

        mid = load_checkpoint(tmp_path / "step_00000005.ckpt")
        assert mid.step == 5 and not mid.decayed
        resumed = run_pfs(cfg, make_stream(), CFG, resume_from=mid)
        assert_params_equal(full.params, resumed.params)
        for name in full.opt_state.m:
            np.testing.assert_array_equal(full.opt_state.m[name],
                                          resumed.opt_state.m[name])
            np.testing.assert_array_equal(full.opt_state.v[name],
                                          resumed.opt_state.v[name])


class TestCheckpointIo:
    def make_ckpt(self):
        cfg = train_cfg([(Objective.CLM, 4)], total=4)
        return run_pfs(cfg, make_stream(), CFG)

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert_params_equal(ckpt.params, loaded.params)
        assert loaded.step == ckpt.step
        assert loaded.schedule == ckpt.schedule
        assert loaded.model_config == ckpt.model_config
        assert loaded.opt_state.step_count == ckpt.opt_state.step_count
        assert loaded.objective_history == ckpt.objective_history
        for name in ckpt.opt_state.m:
            np.testing.assert_array_equal(ckpt.opt_state.m[name],
                                          loaded.opt_state.m[name])

    def test_save_is_deterministic(self, tmp_path):
        ckpt = self.make_ckpt()
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() \
            == (tmp_path / "b.ckpt").read_bytes()

    def test_byte_flip_detected(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        import struct
        import zlib
        body = b"BPLM" + struct.pack("<I", 99)
        body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path = tmp_path / "a.ckpt"
        path.write_bytes(body)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_no_tmp_file_left(self, tmp_path):
        save_checkpoint(self.make_ckpt(), tmp_path / "a.ckpt")
        assert os.listdir(tmp_path) == ["a.ckpt"]


class TestCpt:
    def decayed_base(self):
        cfg = train_cfg([(Objective.CLM, 6)], total=6)
        return run_pfs(cfg, make_stream(), CFG)

    def test_requires_decayed_base(self, tmp_path):
        cfg = train_cfg([(Objective.MLM, 10)], total=10,
                        checkpoint_cadence=5, checkpoint_dir=str(tmp_path))
        run_pfs(cfg, make_stream(), CFG)
        mid = load_checkpoint(tmp_path / "step_00000005.ckpt")
        with pytest.raises(ValueError, match="decay"):
            run_cpt(mid, 4, cfg, make_stream())
        run_cpt(mid, 4, cfg, make_stream(), force=True)  # override works

    def test_zero_steps_returns_base(self):
        base = self.decayed_base()
        cfg = train_cfg([(Objective.CLM, 6)], total=6)
        assert run_cpt(base, 0, cfg, make_stream()) is base

    def test_fresh_moments_and_schedule(self):
        base = self.decayed_base()
        cfg = train_cfg([(Objective.CLM, 6)], total=6)
        trace = []
        final = run_cpt(base, 20, cfg, make_stream(1), trace=trace)
        # rescaled schedule: 10% warmup (2 steps), 5% decay (1 step)
        sched = WsdSchedule(cfg.schedule.peak_lr, 2, 20, 1)
        assert [row["lr"] for row in trace] \
            == [wsd_lr(sched, s) for s in range(20)]
        assert final.opt_state.step_count == 20  # restarted, not 26
        assert all(row["objective"] == "mlm" for row in trace)

    def test_history_appended(self):
        base = self.decayed_base()
        cfg = train_cfg([(Objective.CLM, 6)], total=6)
        final = run_cpt(base, 10, cfg, make_stream(1))
        assert final.objective_history[-1] == {"objective": "mlm",
                                               "steps": 10, "cpt": True}
        assert final.objective_history[0]["objective"] == "clm"

    def test_deterministic(self):
        def run():
            base = self.decayed_base()
            cfg = train_cfg([(Objective.CLM, 6)], total=6)
            return run_cpt(base, 8, cfg, make_stream(1))
        assert_params_equal(run().params, run().params)


class TestWriteTrace:
    def test_csv_fields_and_rows(self, tmp_path):
        cfg = train_cfg([(Objective.MLM, 5)], total=5)
        trace = []
        run_pfs(cfg, make_stream(), CFG, trace=trace)
        path = tmp_path / "trace.csv"
        write_trace(trace, path)
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        assert list(rows[0]) == ["step", "phase", "objective", "lr", "loss",
                                 "masked_fraction", "wall_ms"]
        assert [int(r["step"]) for r in rows] == list(range(5))
        assert float(rows[0]["lr"]) == trace[0]["lr"]
