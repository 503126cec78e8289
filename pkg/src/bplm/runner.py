"""Pretraining regimes and bit-exact checkpoint persistence.

Three entry points mirror the studied setups: run_pfs (single objective from
random init), run_biphasic (CLM first, switching to MLM before the decay
window, schedule uninterrupted), and run_cpt (MLM resumed on a fully decayed
checkpoint with fresh optimizer state and a short rescaled schedule).
"""

from __future__ import annotations

import csv
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import BatchStream
from .model import ModelConfig, Parameters, forward, init_params
from .objectives import LmBatch, Objective, pretrain_loss, select_mask
from .optim import AdamWState, WsdSchedule, adamw_step, clip_global_norm, wsd_lr
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"BPLM"
CHECKPOINT_VERSION = 1

TRACE_FIELDS = ("step", "phase", "objective", "lr", "loss",
                "masked_fraction", "wall_ms")


@dataclass
class TrainConfig:
    objective_plan: List[Tuple[Objective, int]]
    schedule: WsdSchedule
    mask_ratio: float = 0.4
    batch_rows: int = 4
    seed: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-5
    checkpoint_cadence: int = 0       # steps between saves; 0 disables
    checkpoint_dir: Optional[str] = None
    carry_moments_across_switch: bool = True

    def __post_init__(self):
        if any(steps < 0 for _, steps in self.objective_plan):
            raise ValueError("phase step counts must be non-negative")
        planned = sum(steps for _, steps in self.objective_plan)
        if planned != self.schedule.total_steps:
            raise ValueError("objective plan must cover schedule.total_steps")
        phases = [(obj, n) for obj, n in self.objective_plan if n > 0]
        if len(phases) == 2:
            if phases[0][0] is not Objective.CLM or phases[1][0] is not Objective.MLM:
                raise ValueError("biphasic plans run CLM first, then MLM")
        elif len(phases) > 2:
            raise ValueError("at most two non-empty phases are supported")

    def objective_at(self, step: int) -> Tuple[int, Objective]:
        """(phase index, objective) in effect at a global step."""
        at = 0
        for i, (obj, steps) in enumerate(self.objective_plan):
            at += steps
            if step < at:
                return i, obj
        raise ValueError(f"step {step} beyond the objective plan")

    def switch_step(self) -> Optional[int]:
        """Global step at which a two-phase plan switches, else None."""
        phases = [(obj, n) for obj, n in self.objective_plan if n > 0]
        if len(phases) != 2:
            return None
        return phases[0][1]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Parameters
    opt_state: AdamWState
    schedule: WsdSchedule
    step: int
    objective_history: List[dict] = field(default_factory=list)
    seed: int = 0
    mask_ratio: float = 0.4
    rng_state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def decayed(self) -> bool:
        """True once the run has completed its learning-rate decay."""
        return self.step >= self.schedule.total_steps


def _make_opt_state(cfg: TrainConfig) -> AdamWState:
    return AdamWState(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _mask_batch(batch: LmBatch, ratio: float, mask_id: int, seed: int,
                step: int) -> LmBatch:
    """Attach one deterministic MaskingPlan per row, keyed on (seed, step)."""
    plans = []
    for row_idx, (tokens, pad) in enumerate(zip(batch.rows, batch.pad_masks)):
        rng = np.random.default_rng([seed, step, row_idx])
        plans.append(select_mask(tokens, ratio, rng, mask_id, pad))
    return LmBatch(batch.rows, batch.pad_masks, plans)


def _masked_fraction(batch: LmBatch) -> float:
    if batch.plans is None:
        return 0.0
    masked = sum(len(p.masked_positions) for p in batch.plans)
    real = sum(sum(m) for m in batch.pad_masks)
    return masked / real if real else 0.0


def _train_loop(params: Parameters, opt_state: AdamWState, cfg: TrainConfig,
                model_cfg: ModelConfig, stream: BatchStream, start_step: int,
                mask_id: int, trace: List[dict],
                history: List[dict]) -> Checkpoint:
    total = cfg.schedule.total_steps
    switch = cfg.switch_step()
    for step in range(start_step, total):
        t0 = time.perf_counter()
        phase, objective = cfg.objective_at(step)
        if switch is not None and step == switch and not cfg.carry_moments_across_switch:
            opt_state.m.clear()
            opt_state.v.clear()
        batch = stream.batch(step)
        if objective is Objective.MLM and batch.plans is None:
            batch = _mask_batch(batch, cfg.mask_ratio, mask_id, cfg.seed, step)
        lr = wsd_lr(cfg.schedule, step)

        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = pretrain_loss(objective, params, model_cfg, batch)
        backward(loss, tape)
        grads = {name: p.grad for name, p in params.items()
                 if p.grad is not None}
        clip_global_norm(grads, cfg.clip_norm)
        adamw_step(params, grads, opt_state, lr)

        trace.append({
            "step": step, "phase": phase, "objective": objective.value,
            "lr": lr, "loss": loss.item(),
            "masked_fraction": _masked_fraction(batch),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        done = step + 1
        ckpt = Checkpoint(model_cfg, params, opt_state, cfg.schedule, done,
                          history, cfg.seed, cfg.mask_ratio)
        if cfg.checkpoint_cadence and cfg.checkpoint_dir \
                and done % cfg.checkpoint_cadence == 0 and done < total:
            path = os.path.join(cfg.checkpoint_dir, f"step_{done:08d}.ckpt")
            save_checkpoint(ckpt, path)
    return Checkpoint(model_cfg, params, opt_state, cfg.schedule, total,
                      history, cfg.seed, cfg.mask_ratio)


def _plan_history(cfg: TrainConfig) -> List[dict]:
    return [{"objective": obj.value, "steps": steps}
            for obj, steps in cfg.objective_plan if steps > 0]


def run_pfs(cfg: TrainConfig, stream: BatchStream, model_cfg: ModelConfig,
            mask_id: int = 1,
            resume_from: Optional[Checkpoint] = None,
            trace: Optional[List[dict]] = None) -> Checkpoint:
    """Pretrain from scratch (or resume a cadence checkpoint of such a run)."""
    phases = [(o, n) for o, n in cfg.objective_plan if n > 0]
    if len(phases) != 1:
        raise ValueError("run_pfs expects a single-phase objective plan")
    return _run(cfg, stream, model_cfg, mask_id, resume_from, trace)


def run_biphasic(cfg: TrainConfig, stream: BatchStream, model_cfg: ModelConfig,
                 mask_id: int = 1,
                 resume_from: Optional[Checkpoint] = None,
                 trace: Optional[List[dict]] = None) -> Checkpoint:
    """CLM phase at stable lr, then MLM; decay only at the end of phase 2."""
    switch = cfg.switch_step()
    if switch is not None and switch >= cfg.schedule.decay_start:
        raise ValueError("phase boundary must precede the decay window")
    return _run(cfg, stream, model_cfg, mask_id, resume_from, trace)


def _run(cfg: TrainConfig, stream: BatchStream, model_cfg: ModelConfig,
         mask_id: int, resume_from: Optional[Checkpoint],
         trace: Optional[List[dict]]) -> Checkpoint:
    if resume_from is not None:
        params = resume_from.params
        opt_state = resume_from.opt_state
        start = resume_from.step
    else:
        params = init_params(model_cfg, cfg.seed)
        opt_state = _make_opt_state(cfg)
        start = 0
    if trace is None:
        trace = []
    return _train_loop(params, opt_state, cfg, model_cfg, stream, start,
                       mask_id, trace, _plan_history(cfg))


def run_cpt(base: Checkpoint, cpt_steps: int, cfg: TrainConfig,
            stream: BatchStream, mask_id: int = 1, force: bool = False,
            trace: Optional[List[dict]] = None) -> Checkpoint:
    """Continue a decayed checkpoint with MLM under a fresh short schedule.

    Warmup is 10% and decay 5% of the CPT length; optimizer moments restart.
    """
    if not base.decayed and not force:
        raise ValueError("CPT base checkpoint has not undergone lr decay")
    if cpt_steps == 0:
        return base
    schedule = WsdSchedule(
        peak_lr=cfg.schedule.peak_lr,
        warmup_steps=math.ceil(0.10 * cpt_steps),
        total_steps=cpt_steps,
        decay_steps=math.ceil(0.05 * cpt_steps),
    )
    cpt_cfg = replace(cfg, objective_plan=[(Objective.MLM, cpt_steps)],
                      schedule=schedule)
    if trace is None:
        trace = []
    history = list(base.objective_history) + [
        {"objective": Objective.MLM.value, "steps": cpt_steps, "cpt": True}]
    final = _train_loop(base.params, _make_opt_state(cpt_cfg), cpt_cfg,
                        base.model_config, stream, 0, mask_id, trace, history)
    return final


def write_trace(trace: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(trace)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _config_block(ckpt: Checkpoint) -> bytes:
    import json
    cfg = {
        "model_config": ckpt.model_config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "step": ckpt.step,
        "objective_history": ckpt.objective_history,
        "seed": ckpt.seed,
        "mask_ratio": ckpt.mask_ratio,
        "rng_state": ckpt.rng_state,
        "opt": {
            "beta1": ckpt.opt_state.beta1, "beta2": ckpt.opt_state.beta2,
            "eps": ckpt.opt_state.eps,
            "weight_decay": ckpt.opt_state.weight_decay,
            "decay_norm_gains": ckpt.opt_state.decay_norm_gains,
            "step_count": ckpt.opt_state.step_count,
        },
    }
    return json.dumps(cfg, sort_keys=True).encode("utf-8")


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    name_b = name.encode("utf-8")
    rec = struct.pack("<I", len(name_b)) + name_b
    rec += struct.pack("<I", arr.ndim)
    rec += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    rec += payload
    rec += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return rec


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write of the documented binary layout (temp then rename)."""
    tensors: List[Tuple[str, np.ndarray]] = [
        (f"param.{name}", t.data) for name, t in sorted(ckpt.params.items())]
    for name in sorted(ckpt.opt_state.m):
        tensors.append((f"opt.m.{name}", ckpt.opt_state.m[name]))
        tensors.append((f"opt.v.{name}", ckpt.opt_state.v[name]))

    cfg_block = _config_block(ckpt)
    body = CHECKPOINT_MAGIC
    body += struct.pack("<I", ckpt.version)
    body += struct.pack("<I", len(cfg_block)) + cfg_block
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _tensor_record(name, arr)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class CheckpointError(Exception):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def read(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.at: self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]


def load_checkpoint(path) -> Checkpoint:
    import json
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (file_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != file_crc:
        raise CheckpointError("file-level CRC mismatch")
    r = _Reader(raw[4:-4])
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = json.loads(r.read(r.u32()).decode("utf-8"))
    n_tensors = r.u32()
    tensors = {}
    for _ in range(n_tensors):
        name = r.read(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        payload = r.read(8 * count)
        crc = r.u32()
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"payload CRC mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    model_cfg = ModelConfig.from_dict(cfg["model_config"])
    params: Parameters = {}
    opt = AdamWState(**{k: v for k, v in cfg["opt"].items()})
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = arr
        else:
            raise CheckpointError(f"unknown tensor record {name!r}")
    return Checkpoint(model_cfg, params, opt, WsdSchedule.from_dict(cfg["schedule"]),
                      cfg["step"], cfg["objective_history"], cfg["seed"],
                      cfg["mask_ratio"], cfg.get("rng_state", {}), version)
