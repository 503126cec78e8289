"""Command-line entry point: pretrain, cpt, finetune, report.

Configs are flat INI files with [model], [train], [data] sections; a named
preset under [experiment] expands to fully explicit values, and the expanded
config is written next to the outputs for provenance.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from typing import Optional

import numpy as np

from .data import (CorpusSpec, MASK_ID, PAD_ID, gen_corpus, load_task_dataset,
                   pack_batches)
from .finetune import (GridSearchSpec, STUDY_LEARNING_RATES, ci95_half_width,
                       run_grid_search, write_report, zero_shot_eval)
from .model import ModelConfig
from .objectives import Objective, STUDY_MASK_RATIOS
from .optim import WsdSchedule
from .runner import (Checkpoint, TrainConfig, load_checkpoint, run_biphasic,
                     run_cpt, run_pfs, save_checkpoint, write_trace)

PRESETS = {
    "pfs-clm": {"train": {"objective": "clm"}},
    "pfs-mlm-20": {"train": {"objective": "mlm", "mask_ratio": "0.20"}},
    "pfs-mlm-30": {"train": {"objective": "mlm", "mask_ratio": "0.30"}},
    "pfs-mlm-40": {"train": {"objective": "mlm", "mask_ratio": "0.40"}},
    "pfs-mlm-50": {"train": {"objective": "mlm", "mask_ratio": "0.50"}},
    "biphasic-25-75": {"train": {"objective": "biphasic", "clm_fraction": "0.25"}},
    "biphasic-50-50": {"train": {"objective": "biphasic", "clm_fraction": "0.50"}},
    "biphasic-75-25": {"train": {"objective": "biphasic", "clm_fraction": "0.75"}},
    "cpt-from-clm-2k": {"cpt": {"steps": "2000"}},
    "cpt-from-clm-12k": {"cpt": {"steps": "12000"}},
    "cpt-from-clm-22k": {"cpt": {"steps": "22000"}},
}

DEFAULTS = {
    "model": {
        "layers": "2", "embed_dim": "64", "ffn_dim": "128", "heads": "4",
        "kv_heads": "2", "vocab_size": "256", "max_seq_len": "128",
        "rope_theta": "10000.0", "rmsnorm_eps": "1e-5",
    },
    "train": {
        "objective": "clm", "total_steps": "100", "warmup_steps": "10",
        "decay_steps": "5", "peak_lr": "5e-4", "mask_ratio": "0.40",
        "clm_fraction": "0.5", "batch_rows": "4", "seed": "0",
        "checkpoint_cadence": "0", "clip_norm": "1.0", "weight_decay": "0.1",
    },
    "data": {
        "generator": "markov_k", "order": "1", "num_symbols": "6",
        "target_tokens": "20000", "min_len": "8", "max_len": "64",
        "seed": "0",
    },
    "cpt": {"steps": "2000", "mask_ratio": "0.40"},
}


class CliError(Exception):
    pass


def expand_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    parser.read(path)

    expanded = configparser.ConfigParser()
    for section, values in DEFAULTS.items():
        expanded[section] = dict(values)
    preset = parser.get("experiment", "preset", fallback=None)
    if preset:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; "
                           f"known: {', '.join(sorted(PRESETS))}")
        for section, values in PRESETS[preset].items():
            expanded[section].update(values)
    for section in parser.sections():
        if section == "experiment":
            continue
        if section not in expanded:
            expanded[section] = {}
        expanded[section].update(dict(parser[section]))
    if "experiment" in parser:
        expanded["experiment"] = dict(parser["experiment"])
    return expanded


def _model_config(cfg) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        layers=m.getint("layers"), embed_dim=m.getint("embed_dim"),
        ffn_dim=m.getint("ffn_dim"), heads=m.getint("heads"),
        kv_heads=m.getint("kv_heads"), vocab_size=m.getint("vocab_size"),
        max_seq_len=m.getint("max_seq_len"),
        rope_theta=m.getfloat("rope_theta"),
        rmsnorm_eps=m.getfloat("rmsnorm_eps"),
    )


def _train_config(cfg, allow_nonstudy: bool) -> TrainConfig:
    t = cfg["train"]
    total = t.getint("total_steps")
    objective = t.get("objective")
    mask_ratio = t.getfloat("mask_ratio")
    if objective in ("mlm", "biphasic") and not allow_nonstudy:
        if not any(abs(mask_ratio - r) < 1e-12 for r in STUDY_MASK_RATIOS):
            raise CliError(
                f"masking ratio {mask_ratio} outside the study set "
                f"{STUDY_MASK_RATIOS}; pass --allow-nonstudy to override")
    if objective == "clm":
        plan = [(Objective.CLM, total)]
    elif objective == "mlm":
        plan = [(Objective.MLM, total)]
    elif objective == "biphasic":
        clm_steps = int(total * t.getfloat("clm_fraction"))
        plan = [(Objective.CLM, clm_steps), (Objective.MLM, total - clm_steps)]
    else:
        raise CliError(f"unknown objective {objective!r}")
    schedule = WsdSchedule(peak_lr=t.getfloat("peak_lr"),
                           warmup_steps=t.getint("warmup_steps"),
                           total_steps=total,
                           decay_steps=t.getint("decay_steps"))
    return TrainConfig(
        objective_plan=plan, schedule=schedule, mask_ratio=mask_ratio,
        batch_rows=t.getint("batch_rows"), seed=t.getint("seed"),
        clip_norm=t.getfloat("clip_norm"),
        weight_decay=t.getfloat("weight_decay"),
        checkpoint_cadence=t.getint("checkpoint_cadence"),
    )


def _corpus_stream(cfg, train_cfg: TrainConfig, model_cfg: ModelConfig):
    d = cfg["data"]
    spec = CorpusSpec(
        generator=d.get("generator"), order=d.getint("order"),
        num_symbols=d.getint("num_symbols"), seed=d.getint("seed"),
        target_tokens=d.getint("target_tokens"), min_len=d.getint("min_len"),
        max_len=min(d.getint("max_len"), model_cfg.max_seq_len),
    )
    corpus = gen_corpus(spec)
    stream = pack_batches(corpus.sequences, train_cfg.batch_rows,
                          spec.min_len, spec.max_len, PAD_ID,
                          train_cfg.seed)
    return corpus, stream


def _out_dir(args, default_name: str) -> str:
    out = args.out or os.path.join(
        os.environ.get("BPLM_OUT_DIR", "runs"), default_name)
    os.makedirs(out, exist_ok=True)
    return out


def _write_expanded(cfg, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        cfg.write(f)


def cmd_pretrain(args) -> int:
    cfg = expand_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = str(args.seed)
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg, args.allow_nonstudy)
    out = _out_dir(args, cfg.get("experiment", "preset", fallback="pretrain"))
    train_cfg.checkpoint_dir = out
    corpus, stream = _corpus_stream(cfg, train_cfg, model_cfg)

    trace: list = []
    if train_cfg.switch_step() is not None:
        final = run_biphasic(train_cfg, stream, model_cfg, MASK_ID, trace=trace)
        print(f"biphasic switch at step {train_cfg.switch_step()}")
    else:
        final = run_pfs(train_cfg, stream, model_cfg, MASK_ID, trace=trace)
    save_checkpoint(final, os.path.join(out, "final.ckpt"))
    write_trace(trace, os.path.join(out, "metrics.csv"))
    _write_expanded(cfg, out)
    print(f"pretrained {final.step} steps; corpus entropy rate "
          f"{corpus.entropy_rate:.4f} nats/token; final loss "
          f"{trace[-1]['loss']:.4f}; artifacts in {out}")
    return 0


def cmd_cpt(args) -> int:
    cfg = expand_config(args.config)
    base = load_checkpoint(args.base)
    if not base.decayed and not args.force:
        raise CliError("base checkpoint has not undergone lr decay; "
                       "use run_biphasic for in-flight switches or --force")
    c = cfg["cpt"]
    cpt_steps = c.getint("steps")
    mask_ratio = c.getfloat("mask_ratio")
    if not args.allow_nonstudy and not any(
            abs(mask_ratio - r) < 1e-12 for r in STUDY_MASK_RATIOS):
        raise CliError(f"masking ratio {mask_ratio} outside the study set; "
                       "pass --allow-nonstudy to override")
    out = _out_dir(args, "cpt")
    seed = args.seed if args.seed is not None else cfg["train"].getint("seed")
    schedule = WsdSchedule(peak_lr=cfg["train"].getfloat("peak_lr"),
                           warmup_steps=max(1, cpt_steps // 10),
                           total_steps=max(cpt_steps, 2),
                           decay_steps=max(1, cpt_steps // 20))
    train_cfg = TrainConfig(objective_plan=[(Objective.MLM, max(cpt_steps, 2))],
                            schedule=schedule, mask_ratio=mask_ratio,
                            batch_rows=cfg["train"].getint("batch_rows"),
                            seed=seed)
    _, stream = _corpus_stream(cfg, train_cfg, base.model_config)
    trace: list = []
    final = run_cpt(base, cpt_steps, train_cfg, stream, MASK_ID,
                    force=args.force, trace=trace)
    save_checkpoint(final, os.path.join(out, "final.ckpt"))
    write_trace(trace, os.path.join(out, "metrics.csv"))
    _write_expanded(cfg, out)
    print(f"cpt complete: {cpt_steps} MLM steps (bidirectional from step 0); "
          f"history {final.objective_history}; artifacts in {out}")
    return 0


def cmd_finetune(args) -> int:
    base = load_checkpoint(args.checkpoint)
    dataset = load_task_dataset(args.task_data)
    seeds = tuple(range(args.seeds))
    if args.seeds != 5:
        print(f"warning: study protocol uses 5 seeds, running {args.seeds}",
              file=sys.stderr)
    spec = GridSearchSpec(seeds=seeds)
    out = _out_dir(args, f"finetune-{dataset.task.lower()}")
    report = run_grid_search(base, dataset, spec, jobs=args.jobs)
    name = os.path.basename(os.path.normpath(args.task_data))
    write_report(report, name, os.path.join(out, "runs.csv"))
    with open(os.path.join(out, "aggregate.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "dataset", "selected_lr", "test_mean", "ci95"])
        ci = "" if report.ci95 is None else f"{report.ci95:.6f}"
        writer.writerow([report.task, name, report.selected_lr,
                         f"{report.test_mean:.6f}", ci])
    if report.ci95 is None:
        print("warning: fewer than 2 seeds, ci95 left empty", file=sys.stderr)
    print(f"{len(report.rows)} runs; selected lr {report.selected_lr}; "
          f"test {report.test_mean:.4f}"
          + (f" +/- {report.ci95:.4f}" if report.ci95 is not None else "")
          + f"; artifacts in {out}")
    return 0


def cmd_report(args) -> int:
    """Aggregate per-run CSVs (runs.csv files) into one summary table."""
    rows = []
    for root, _dirs, files in os.walk(args.runs_dir):
        for name in files:
            if name == "runs.csv":
                with open(os.path.join(root, name), newline="") as f:
                    rows.extend(csv.DictReader(f))
    if not rows:
        raise CliError(f"no runs.csv files under {args.runs_dir}")
    groups: dict = {}
    for r in rows:
        key = (r["task"], r["dataset"], r["lr"], r["split"], r["metric"])
        groups.setdefault(key, []).append(float(r["value"]))
    out = args.out or os.path.join(args.runs_dir, "summary.csv")
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "dataset", "lr", "split", "metric",
                         "mean", "ci95", "n"])
        for key in sorted(groups):
            vals = groups[key]
            ci = ci95_half_width(vals)
            writer.writerow(list(key) + [
                f"{np.mean(vals):.6f}",
                "" if ci is None else f"{ci:.6f}", len(vals)])
    print(f"summary written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bplm",
        description="Deterministic desk-scale CLM/MLM pretraining study")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory "
                       "(default: $BPLM_OUT_DIR/<name>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--allow-nonstudy", action="store_true",
                       help="permit values outside the study grid")

    p = sub.add_parser("pretrain", help="run PFS or biphasic pretraining")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("cpt", help="continued pretraining from a checkpoint")
    p.add_argument("base", help="path to the base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true",
                   help="accept a non-decayed base checkpoint")
    common(p)
    p.set_defaults(fn=cmd_cpt)

    p = sub.add_parser("finetune", help="grid-search fine-tune and evaluate")
    p.add_argument("checkpoint")
    p.add_argument("task_data", help="task dataset directory")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("report", help="aggregate run CSVs into a summary")
    p.add_argument("runs_dir")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
