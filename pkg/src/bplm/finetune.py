"""Fine-tuning protocol and evaluation harness for the four task families.

All fine-tuning runs use bidirectional attention regardless of how the
checkpoint was pretrained, a linear-warmup/linear-decay schedule, and a grid
of learning rates repeated across seeds. Metrics: accuracy (SC), span-level
F1 (TC), token-overlap F1 (QA), and NDCG@10 (IR).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import TaskDataset, TaskExample
from .model import AttentionMode, ModelConfig, Parameters, forward
from .optim import AdamWState, adamw_step, clip_global_norm, finetune_lr
from .runner import Checkpoint
from .tensor import Tape, Tensor, backward

STUDY_LEARNING_RATES = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4)

REPORT_FIELDS = ("task", "dataset", "lr", "seed", "split", "metric", "value")


@dataclass(frozen=True)
class GridSearchSpec:
    learning_rates: Tuple[float, ...] = STUDY_LEARNING_RATES
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    max_steps: int = 1000
    batch_size: int = 32
    infonce_temperature: float = 0.05


@dataclass
class RunReport:
    task: str
    rows: List[dict]            # lr, seed, split ("validation"/"test"), value
    selected_lr: float
    test_mean: float
    ci95: Optional[float]       # None when fewer than 2 seeds


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds):
        raise ValueError("length mismatch")
    if not preds:
        raise ValueError("empty input")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def bio_spans(tags: Sequence[str]) -> set:
    """Decode (type, start, end) spans; a stray I- opens a new span."""
    spans = set()
    start = None
    etype = None
    for i, tag in enumerate(tags):
        if tag.startswith("B-") or (tag.startswith("I-")
                                    and (start is None or tag[2:] != etype)):
            if start is not None:
                spans.add((etype, start, i - 1))
            start, etype = i, tag[2:]
        elif tag == "O":
            if start is not None:
                spans.add((etype, start, i - 1))
            start, etype = None, None
    if start is not None:
        spans.add((etype, start, len(tags) - 1))
    return spans


def entity_f1(pred_tags, gold_tags) -> float:
    """Micro-averaged exact-span F1. Accepts one tag sequence or a list of
    sequences (corpus-level micro average)."""
    if pred_tags and isinstance(pred_tags[0], str):
        pred_tags, gold_tags = [pred_tags], [gold_tags]
    tp = fp = fn = 0
    for pred, gold in zip(pred_tags, gold_tags):
        if len(pred) != len(gold):
            raise ValueError("tag sequence length mismatch")
        p_spans, g_spans = bio_spans(pred), bio_spans(gold)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def qa_f1(pred_tokens: Sequence[int], gold_tokens: Sequence[int]) -> float:
    """Token-multiset overlap F1; both empty (both no-answer) scores 1."""
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    from collections import Counter
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def ndcg_at_10(ranked_ids: Sequence, relevance: Dict, k: int = 10
               ) -> Optional[float]:
    """DCG@k with gain = relevance and discount 1/log2(rank+1), normalized
    by the ideal DCG. Returns None when nothing is relevant (query skipped)."""
    rels = [relevance.get(doc, 0) for doc in ranked_ids]
    ideal = sorted(relevance.values(), reverse=True)
    if not ideal or ideal[0] <= 0:
        return None
    dcg = sum(r / math.log2(rank + 2) for rank, r in enumerate(rels[:k]))
    idcg = sum(r / math.log2(rank + 2) for rank, r in enumerate(ideal[:k]))
    return dcg / idcg


# ---------------------------------------------------------------------------
# encoding and task losses
# ---------------------------------------------------------------------------

def encode(params: Parameters, cfg: ModelConfig, tokens: Sequence[int],
           pad_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Hidden states in Bidirectional mode (the fine-tuning contract)."""
    hidden, _ = forward(params, cfg, tokens, AttentionMode.BIDIRECTIONAL,
                        pad_mask)
    return hidden


def init_head(task: str, cfg: ModelConfig, dataset: TaskDataset,
              seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng([seed, 7])
    d = cfg.embed_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    if task == "SC":
        return {"w": w(d, dataset.num_classes)}
    if task == "TC":
        return {"w": w(d, len(dataset.tagset))}
    if task == "QA":
        return {"w": w(d, 2)}
    if task == "IR":
        return {}
    raise ValueError(f"unknown task {task!r}")


def task_loss(task: str, head: Dict[str, Tensor], params: Parameters,
              cfg: ModelConfig, batch: Sequence[TaskExample],
              dataset: TaskDataset,
              temperature: float = 0.05) -> Tensor:
    if not batch:
        raise ValueError("empty batch")
    if any(ex.task != task for ex in batch):
        raise ValueError("batch task mismatch")

    if task == "SC":
        pooled = [T.mean_pool(encode(params, cfg, ex.tokens),
                              [True] * len(ex.tokens)) for ex in batch]
        logits = T.matmul(T.stack_rows(pooled), head["w"])
        return T.cross_entropy_from_logits(logits, [ex.label for ex in batch])

    if task == "TC":
        tag_to_id = {t: i for i, t in enumerate(dataset.tagset)}
        losses = []
        for ex in batch:
            logits = T.matmul(encode(params, cfg, ex.tokens), head["w"])
            targets = [tag_to_id[t] for t in ex.tags]
            losses.append(T.cross_entropy_from_logits(logits, targets))
        return _mean(losses)

    if task == "QA":
        losses = []
        for ex in batch:
            scores = T.matmul(encode(params, cfg, ex.tokens), head["w"])
            start_logits = T.transpose(T.slice_cols(scores, 0, 1))
            end_logits = T.transpose(T.slice_cols(scores, 1, 2))
            s, e = ex.span if ex.span is not None else (0, 0)
            loss = T.add(T.cross_entropy_from_logits(start_logits, [s]),
                         T.cross_entropy_from_logits(end_logits, [e]))
            losses.append(T.scale(loss, 0.5))
        return _mean(losses)

    if task == "IR":
        queries, docs = [], []
        for ex in batch:
            queries.append(T.mean_pool(encode(params, cfg, ex.query),
                                       [True] * len(ex.query)))
        for ex in batch:  # positives first: query i targets candidate i
            docs.append(T.mean_pool(encode(params, cfg, ex.positive),
                                    [True] * len(ex.positive)))
        for ex in batch:
            for neg in ex.negatives or []:
                docs.append(T.mean_pool(encode(params, cfg, neg),
                                        [True] * len(neg)))
        q = T.l2_normalize_rows(T.stack_rows(queries))
        d = T.l2_normalize_rows(T.stack_rows(docs))
        sims = T.scale(T.matmul(q, T.transpose(d)), 1.0 / temperature)
        return T.cross_entropy_from_logits(sims, list(range(len(batch))))

    raise ValueError(f"unknown task {task!r}")


def _mean(losses: List[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.scale(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# prediction and per-split evaluation
# ---------------------------------------------------------------------------

def _predict_span(start_scores: np.ndarray, end_scores: np.ndarray
                  ) -> Optional[Tuple[int, int]]:
    """Independent argmax with start<=end repair; position 0 is no-answer."""
    s = int(start_scores.argmax())
    e = int(end_scores.argmax())
    if s == 0 or e == 0:
        return None
    if s > e:
        e = s
    return s, e


def evaluate(task: str, head: Dict[str, Tensor], params: Parameters,
             cfg: ModelConfig, examples: Sequence[TaskExample],
             dataset: TaskDataset) -> float:
    if not examples:
        raise ValueError("empty split")

    if task == "SC":
        preds, golds = [], []
        for ex in examples:
            pooled = T.mean_pool(encode(params, cfg, ex.tokens),
                                 [True] * len(ex.tokens))
            logits = T.matmul(T.stack_rows([pooled]), head["w"])
            preds.append(int(logits.data.argmax()))
            golds.append(ex.label)
        return accuracy(preds, golds)

    if task == "TC":
        pred_seqs, gold_seqs = [], []
        for ex in examples:
            logits = T.matmul(encode(params, cfg, ex.tokens), head["w"])
            ids = logits.data.argmax(axis=1)
            pred_seqs.append([dataset.tagset[i] for i in ids])
            gold_seqs.append(ex.tags)
        return entity_f1(pred_seqs, gold_seqs)

    if task == "QA":
        scores = []
        for ex in examples:
            s = T.matmul(encode(params, cfg, ex.tokens), head["w"]).data
            span = _predict_span(s[:, 0], s[:, 1])
            pred_tokens = ex.tokens[span[0]: span[1] + 1] if span else []
            gold_tokens = (ex.tokens[ex.span[0]: ex.span[1] + 1]
                           if ex.span is not None else [])
            scores.append(qa_f1(pred_tokens, gold_tokens))
        return float(np.mean(scores))

    if task == "IR":
        value, _skipped = ir_eval(params, cfg, examples)
        return value

    raise ValueError(f"unknown task {task!r}")


def ir_eval(params: Parameters, cfg: ModelConfig,
            examples: Sequence[TaskExample]) -> Tuple[float, int]:
    """Mean NDCG@10 over queries; candidate pool is the example's labeled
    documents only. Returns (mean, number of skipped queries)."""
    scores = []
    skipped = 0
    for ex in examples:
        q = T.mean_pool(encode(params, cfg, ex.query),
                        [True] * len(ex.query)).data
        docs = [ex.positive] + list(ex.negatives or [])
        rels = {0: 1}
        sims = []
        for i, doc in enumerate(docs):
            d = T.mean_pool(encode(params, cfg, doc), [True] * len(doc)).data
            sims.append(float(q @ d / (np.linalg.norm(q) * np.linalg.norm(d)
                                       + 1e-12)))
        ranked = sorted(range(len(docs)), key=lambda i: -sims[i])
        score = ndcg_at_10(ranked, rels)
        if score is None:
            skipped += 1
        else:
            scores.append(score)
    if not scores:
        raise ValueError("no query had a relevant document")
    return float(np.mean(scores)), skipped


# ---------------------------------------------------------------------------
# fine-tuning loop and grid search
# ---------------------------------------------------------------------------

def _copy_params(params: Parameters) -> Parameters:
    return {name: Tensor(p.data.copy(), requires_grad=True)
            for name, p in params.items()}


def finetune_one(base: Checkpoint, dataset: TaskDataset, lr: float, seed: int,
                 spec: GridSearchSpec) -> Tuple[Parameters, Dict[str, Tensor]]:
    """Fine-tune a copy of the checkpoint for up to min(max_steps, 1 epoch)."""
    cfg = base.model_config
    params = _copy_params(base.params)
    head = init_head(dataset.task, cfg, dataset, seed)
    trainable = dict(params)
    trainable.update({f"__head.{k}": v for k, v in head.items()})

    rng = np.random.default_rng([seed, 13])
    order = rng.permutation(len(dataset.train))
    steps_per_epoch = math.ceil(len(dataset.train) / spec.batch_size)
    total_steps = min(spec.max_steps, steps_per_epoch)
    opt = AdamWState(weight_decay=0.1)

    for step in range(total_steps):
        lo = (step % steps_per_epoch) * spec.batch_size
        batch = [dataset.train[i] for i in order[lo: lo + spec.batch_size]]
        for p in trainable.values():
            p.zero_grad()
        with Tape() as tape:
            loss = task_loss(dataset.task, head, params, cfg, batch, dataset,
                             spec.infonce_temperature)
        backward(loss, tape)
        grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
        clip_global_norm(grads, 1.0)
        adamw_step(trainable, grads, opt, finetune_lr(lr, total_steps, step))
    return params, head


def _finetune_and_eval(base: Checkpoint, dataset: TaskDataset, lr: float,
                       seed: int, spec: GridSearchSpec) -> dict:
    params, head = finetune_one(base, dataset, lr, seed, spec)
    return {
        "lr": lr, "seed": seed,
        "validation": evaluate(dataset.task, head, params, base.model_config,
                               dataset.validation, dataset),
        "test": evaluate(dataset.task, head, params, base.model_config,
                         dataset.test, dataset),
    }


def select_best_lr(rows: Sequence[dict]) -> float:
    """Argmax of the mean validation metric; ties go to the smaller lr."""
    by_lr: Dict[float, List[float]] = {}
    for row in rows:
        by_lr.setdefault(row["lr"], []).append(row["validation"])
    means = {lr: float(np.mean(v)) for lr, v in by_lr.items()}
    best = max(means.values())
    return min(lr for lr, m in means.items() if m == best)


def ci95_half_width(values: Sequence[float]) -> Optional[float]:
    if len(values) < 2:
        return None
    return 1.96 * float(np.std(values, ddof=1)) / math.sqrt(len(values))


def run_grid_search(base: Checkpoint, dataset: TaskDataset,
                    spec: GridSearchSpec = GridSearchSpec(),
                    jobs: int = 1) -> RunReport:
    """The full protocol: every (lr, seed) cell fine-tuned and evaluated,
    lr selected on validation, test mean and ci95 reported across seeds."""
    for name, split in dataset.splits().items():
        if not split:
            raise ValueError(f"empty {name} split")
    cells = [(lr, seed) for lr in spec.learning_rates for seed in spec.seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker,
                                 [(base, dataset, lr, seed, spec)
                                  for lr, seed in cells]))
    else:
        rows = [_finetune_and_eval(base, dataset, lr, seed, spec)
                for lr, seed in cells]
    selected = select_best_lr(rows)
    test_scores = [r["test"] for r in rows if r["lr"] == selected]
    return RunReport(
        task=dataset.task, rows=rows, selected_lr=selected,
        test_mean=float(np.mean(test_scores)),
        ci95=ci95_half_width(test_scores),
    )


def _cell_worker(args) -> dict:
    base, dataset, lr, seed, spec = args
    return _finetune_and_eval(base, dataset, lr, seed, spec)


def zero_shot_eval(params: Parameters, cfg: ModelConfig,
                   dataset: TaskDataset,
                   split: str = "test") -> Tuple[float, int]:
    """NDCG@10 on an IR dataset with no further training (transfer eval)."""
    if dataset.task != "IR":
        raise ValueError("zero_shot_eval expects an IR dataset")
    return ir_eval(params, cfg, dataset.splits()[split])


def write_report(report: RunReport, dataset_name: str, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in report.rows:
            for split in ("validation", "test"):
                writer.writerow({
                    "task": report.task, "dataset": dataset_name,
                    "lr": row["lr"], "seed": row["seed"], "split": split,
                    "metric": _metric_name(report.task), "value": row[split],
                })


def _metric_name(task: str) -> str:
    return {"SC": "accuracy", "TC": "entity_f1", "QA": "qa_f1",
            "IR": "ndcg@10"}[task]
