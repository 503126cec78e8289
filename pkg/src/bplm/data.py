"""Deterministic byte-level vocabulary, synthetic corpora with known entropy
rates, variable-length batch packing, and synthetic fine-tuning datasets.

Corpora come from generators whose exact conditional entropy is computable,
so trained-model losses can be checked against an information-theoretic
floor instead of opaque reference numbers.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .objectives import LmBatch, MaskingPlan, Objective, select_mask

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
NUM_RESERVED = 3

CORPUS_MAGIC = b"BPCR"


@dataclass(frozen=True)
class Vocab:
    """Fixed-size symbol table over single characters plus reserved ids."""
    size: int = 256
    alphabet: str = "abcdefghijklmnopqrstuvwxyz "

    def __post_init__(self):
        if self.size < NUM_RESERVED + len(self.alphabet):
            raise ValueError("vocab too small for alphabet plus reserved ids")

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    def encode(self, text: str) -> List[int]:
        return [NUM_RESERVED + self.alphabet.index(c)
                if c in self.alphabet else UNK_ID for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if NUM_RESERVED <= i < NUM_RESERVED + len(self.alphabet):
                out.append(self.alphabet[i - NUM_RESERVED])
            elif i == PAD_ID:
                continue
            else:
                out.append("?")
        return "".join(out)


@dataclass(frozen=True)
class CorpusSpec:
    generator: str = "markov_k"  # or "repeated_pattern"
    order: int = 1
    num_symbols: int = 6
    seed: int = 0
    target_tokens: int = 50_000
    min_len: int = 8
    max_len: int = 128
    pattern: Tuple[int, ...] = ()          # repeated_pattern only
    peakedness: float = 8.0                # higher -> lower entropy chain
    transition: Optional[Tuple[Tuple[float, ...], ...]] = None  # explicit P

    def __post_init__(self):
        if self.min_len < 2:
            raise ValueError("min_len must be >= 2")
        if self.max_len < self.min_len:
            raise ValueError("max_len < min_len")
        if self.generator not in ("markov_k", "repeated_pattern"):
            raise ValueError(f"unknown generator {self.generator!r}")


@dataclass
class Corpus:
    sequences: List[List[int]]
    entropy_rate: float  # nats per token, exact for the generating chain
    num_symbols: int
    transition: Optional[np.ndarray] = None  # [states x symbols], markov only

    def token_ids(self) -> set:
        return {t for seq in self.sequences for t in seq}


def _stationary(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix via eigenvector."""
    vals, vecs = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, i])
    pi = np.abs(pi)
    return pi / pi.sum()


def _entropy_rate(P: np.ndarray) -> float:
    pi = _stationary(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(P > 0, np.log(P), 0.0)
    return float(-(pi[:, None] * P * logs).sum())


def _markov_table(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic transition table over order-k states via a Dirichlet
    with one boosted entry per row (peaked, hence learnable)."""
    n_states = spec.num_symbols ** spec.order
    P = rng.dirichlet(np.ones(spec.num_symbols), size=n_states)
    boost = rng.integers(0, spec.num_symbols, size=n_states)
    P[np.arange(n_states), boost] += spec.peakedness
    P /= P.sum(axis=1, keepdims=True)
    return P


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Generate token sequences plus the exact entropy rate of the source.

    Symbols occupy ids NUM_RESERVED .. NUM_RESERVED+num_symbols-1 so that
    pad/mask ids never collide with corpus tokens.
    """
    rng = np.random.default_rng(spec.seed)
    lengths_rng = np.random.default_rng(spec.seed + 1)

    table = None
    if spec.generator == "repeated_pattern":
        pattern = list(spec.pattern) or [0, 1]
        entropy = 0.0

        def sample_seq(length: int) -> List[int]:
            phase = int(lengths_rng.integers(0, len(pattern)))
            return [NUM_RESERVED + pattern[(phase + i) % len(pattern)]
                    for i in range(length)]
    else:
        if spec.transition is not None:
            P = np.asarray(spec.transition, dtype=np.float64)
            if P.shape != (spec.num_symbols ** spec.order, spec.num_symbols) \
                    or not np.allclose(P.sum(axis=1), 1.0):
                raise ValueError("transition table must be row-stochastic "
                                 "with one row per order-k state")
        else:
            P = _markov_table(spec, rng)
        table = P
        n = spec.num_symbols
        n_states = n ** spec.order
        # state-to-state chain for the stationary distribution
        Q = np.zeros((n_states, n_states))
        for s in range(n_states):
            for sym in range(n):
                Q[s, (s * n + sym) % n_states] += P[s, sym]
        pi = _stationary(Q)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(P > 0, np.log(P), 0.0)
        entropy = float(-(pi[:, None] * P * logs).sum())

        def unpack(state: int) -> List[int]:
            syms = []
            for _ in range(spec.order):
                syms.append(state % n)
                state //= n
            return syms[::-1]

        def sample_seq(length: int) -> List[int]:
            # start from a stationary state so the sequence has no transient
            state = int(rng.choice(n_states, p=pi))
            seq = unpack(state)
            while len(seq) < length:
                sym = int(rng.choice(n, p=P[state]))
                seq.append(sym)
                state = (state * n + sym) % n_states
            return [NUM_RESERVED + s for s in seq[:length]]

    sequences = []
    total = 0
    while total < spec.target_tokens:
        length = int(lengths_rng.integers(spec.min_len, spec.max_len + 1))
        seq = sample_seq(length)
        sequences.append(seq)
        total += length
    return Corpus(sequences, entropy, spec.num_symbols, table)


def save_corpus(corpus: Corpus, path) -> None:
    """Cache file: magic, entropy rate, then length-prefixed u32 sequences."""
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<dII", corpus.entropy_rate, corpus.num_symbols,
                            len(corpus.sequences)))
        for seq in corpus.sequences:
            f.write(struct.pack("<I", len(seq)))
            f.write(np.asarray(seq, dtype="<u4").tobytes())


def load_corpus(path) -> Corpus:
    with open(path, "rb") as f:
        if f.read(4) != CORPUS_MAGIC:
            raise ValueError("not a corpus cache file")
        entropy, num_symbols, n = struct.unpack("<dII", f.read(16))
        sequences = []
        for _ in range(n):
            (length,) = struct.unpack("<I", f.read(4))
            seq = np.frombuffer(f.read(4 * length), dtype="<u4")
            sequences.append([int(t) for t in seq])
    return Corpus(sequences, entropy, num_symbols)


class BatchStream:
    """Deterministic, randomly-accessible stream of LmBatch values.

    batch(step) depends only on (seed, step), which makes mid-run resumes
    exact: a resumed runner regenerates precisely the batches it would have
    seen.
    """

    def __init__(self, sequences: Sequence[Sequence[int]], batch_rows: int,
                 min_len: int, max_len: int, pad_id: int, seed: int,
                 objective: Objective = Objective.CLM,
                 mask_ratio: float = 0.0, mask_token_id: int = MASK_ID):
        self.pool = [list(s)[:max_len] for s in sequences if len(s) >= min_len]
        self.discarded = len(sequences) - len(self.pool)
        if not self.pool:
            raise ValueError("no sequences of at least min_len tokens")
        self.batch_rows = batch_rows
        self.max_len = max_len
        self.pad_id = pad_id
        self.seed = seed
        self.objective = objective
        self.mask_ratio = mask_ratio
        self.mask_token_id = mask_token_id

    def batch(self, step: int) -> LmBatch:
        rng = np.random.default_rng([self.seed, step])
        idx = rng.integers(0, len(self.pool), size=self.batch_rows)
        width = max(len(self.pool[i]) for i in idx)
        rows, pads = [], []
        for i in idx:
            seq = self.pool[i]
            pad = len(seq) * [True] + (width - len(seq)) * [False]
            rows.append(seq + [self.pad_id] * (width - len(seq)))
            pads.append(pad)
        plans = None
        if self.objective is Objective.MLM:
            plans = [select_mask(r, self.mask_ratio, rng, self.mask_token_id, p)
                     for r, p in zip(rows, pads)]
        return LmBatch(rows, pads, plans)

    def __iter__(self) -> Iterator[LmBatch]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def pack_batches(sequences: Sequence[Sequence[int]], batch_rows: int,
                 min_len: int, max_len: int, pad_id: int,
                 seed: int, **kwargs) -> BatchStream:
    return BatchStream(sequences, batch_rows, min_len, max_len, pad_id, seed,
                       **kwargs)


# ---------------------------------------------------------------------------
# synthetic fine-tuning tasks
# ---------------------------------------------------------------------------

@dataclass
class TaskExample:
    task: str  # "SC" | "TC" | "QA" | "IR"
    tokens: Optional[List[int]] = None
    label: Optional[int] = None                    # SC
    tags: Optional[List[str]] = None               # TC, BIO strings
    span: Optional[Tuple[int, int]] = None         # QA, None = no-answer
    query: Optional[List[int]] = None              # IR
    positive: Optional[List[int]] = None
    negatives: Optional[List[List[int]]] = None


@dataclass
class TaskDataset:
    task: str
    train: List[TaskExample]
    validation: List[TaskExample]
    test: List[TaskExample]
    num_classes: int = 0      # SC
    tagset: Tuple[str, ...] = ()  # TC

    def splits(self) -> Dict[str, List[TaskExample]]:
        return {"train": self.train, "validation": self.validation,
                "test": self.test}


TC_TYPES = ("PER", "LOC")
TC_TAGSET = ("O",) + tuple(f"{b}-{t}" for t in TC_TYPES for b in ("B", "I"))

# token-id layout for synthetic tasks (all < 64 so tiny vocabs work)
_FILLER = list(range(8, 24))
_SC_KEYWORDS = (24, 25, 26)          # one per class
_TC_ENTITY = {"PER": (28, 31), "LOC": (32, 35)}  # inclusive id ranges
_QA_MARKER = 36
_IR_RARE = list(range(40, 56))
_BOS = 7


def _rand_filler(rng, n) -> List[int]:
    return [int(x) for x in rng.choice(_FILLER, size=n)]


def _gen_sc(rng, seq_len: int) -> TaskExample:
    label = int(rng.integers(0, len(_SC_KEYWORDS)))
    tokens = _rand_filler(rng, seq_len)
    tokens[int(rng.integers(0, seq_len))] = _SC_KEYWORDS[label]
    return TaskExample("SC", tokens=tokens, label=label)


def _gen_tc(rng, seq_len: int) -> TaskExample:
    tokens = _rand_filler(rng, seq_len)
    tags = ["O"] * seq_len
    n_entities = int(rng.integers(1, 3))
    for _ in range(n_entities):
        etype = TC_TYPES[int(rng.integers(0, len(TC_TYPES)))]
        lo, hi = _TC_ENTITY[etype]
        length = int(rng.integers(1, 4))
        start = int(rng.integers(0, seq_len - length + 1))
        if any(tags[i] != "O" for i in range(start, start + length)):
            continue
        for j in range(length):
            tokens[start + j] = int(rng.integers(lo, hi + 1))
            tags[start + j] = ("B-" if j == 0 else "I-") + etype
    return TaskExample("TC", tokens=tokens, tags=tags)


def _gen_qa(rng, seq_len: int) -> TaskExample:
    # answer = run of tokens right after the marker; position 0 is a BOS
    # sentinel reserved for no-answer examples
    tokens = [_BOS] + _rand_filler(rng, seq_len - 1)
    if rng.random() < 0.25:
        return TaskExample("QA", tokens=tokens, span=None)
    ans_len = int(rng.integers(1, 4))
    start = int(rng.integers(1, seq_len - ans_len - 1))
    tokens[start - 1] = _QA_MARKER
    return TaskExample("QA", tokens=tokens, span=(start, start + ans_len - 1))


def _gen_ir(rng, seq_len: int, n_negatives: int = 3) -> TaskExample:
    rare = int(rng.choice(_IR_RARE))
    query = _rand_filler(rng, 4) + [rare]
    positive = _rand_filler(rng, seq_len)
    positive[int(rng.integers(0, seq_len))] = rare
    negatives = []
    for _ in range(n_negatives):
        negatives.append(_rand_filler(rng, seq_len))
    return TaskExample("IR", query=query, positive=positive,
                       negatives=negatives)


def _example_key(ex: TaskExample) -> tuple:
    return (tuple(ex.tokens or ()), tuple(ex.query or ()),
            tuple(ex.positive or ()))


def gen_task_data(task: str, size: int, seed: int,
                  seq_len: int = 16) -> TaskDataset:
    """Learnable-by-construction synthetic dataset with disjoint splits."""
    if size < 30:
        raise ValueError("size must be >= 30 to stratify splits")
    gen = {"SC": _gen_sc, "TC": _gen_tc, "QA": _gen_qa, "IR": _gen_ir}
    if task not in gen:
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    examples: List[TaskExample] = []
    seen = set()
    while len(examples) < size:
        ex = gen[task](rng, seq_len)
        key = _example_key(ex)
        if key in seen:
            continue
        seen.add(key)
        examples.append(ex)
    n_test = max(size // 5, 5)
    n_val = max(size // 5, 5)
    ds = TaskDataset(
        task=task,
        train=examples[: size - n_val - n_test],
        validation=examples[size - n_val - n_test: size - n_test],
        test=examples[size - n_test:],
    )
    if task == "SC":
        ds.num_classes = len(_SC_KEYWORDS)
    if task == "TC":
        ds.tagset = TC_TAGSET
    return ds


# ---------------------------------------------------------------------------
# JSONL task files
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = {
    "SC": ("tokens", "label"),
    "TC": ("tokens", "tags"),
    "QA": ("tokens", "span"),
    "IR": ("query", "positive", "negatives"),
}


def save_jsonl(examples: Sequence[TaskExample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {"task": ex.task}
            for name in _REQUIRED_FIELDS[ex.task]:
                value = getattr(ex, name)
                rec[name] = list(value) if name == "span" and value else value
            f.write(json.dumps(rec) + "\n")


def load_jsonl(path, task: str) -> List[TaskExample]:
    """Load and validate one TaskExample per line; errors carry line numbers."""
    if task not in _REQUIRED_FIELDS:
        raise ValueError(f"unknown task {task!r}")
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {lineno}: invalid JSON: {e}") from e
            if rec.get("task") != task:
                raise ValueError(f"line {lineno}: task mismatch "
                                 f"(got {rec.get('task')!r}, want {task!r})")
            for name in _REQUIRED_FIELDS[task]:
                if name not in rec:
                    raise ValueError(f"line {lineno}: missing field {name!r}")
            ex = TaskExample(task=task)
            for name in _REQUIRED_FIELDS[task]:
                value = rec[name]
                if name == "span" and value is not None:
                    value = tuple(value)
                setattr(ex, name, value)
            _validate_example(ex, lineno)
            out.append(ex)
    return out


def save_task_dataset(ds: TaskDataset, directory) -> None:
    """Dataset directory: dataset.json metadata + one JSONL per split."""
    import os
    os.makedirs(directory, exist_ok=True)
    meta = {"task": ds.task, "num_classes": ds.num_classes,
            "tagset": list(ds.tagset)}
    with open(os.path.join(directory, "dataset.json"), "w") as f:
        json.dump(meta, f)
    for split, examples in ds.splits().items():
        save_jsonl(examples, os.path.join(directory, f"{split}.jsonl"))


def load_task_dataset(directory) -> TaskDataset:
    import os
    with open(os.path.join(directory, "dataset.json")) as f:
        meta = json.load(f)
    splits = {split: load_jsonl(os.path.join(directory, f"{split}.jsonl"),
                                meta["task"])
              for split in ("train", "validation", "test")}
    return TaskDataset(task=meta["task"], train=splits["train"],
                       validation=splits["validation"], test=splits["test"],
                       num_classes=meta.get("num_classes", 0),
                       tagset=tuple(meta.get("tagset", ())))


def _validate_example(ex: TaskExample, lineno: int) -> None:
    if ex.task == "TC" and len(ex.tags) != len(ex.tokens):
        raise ValueError(f"line {lineno}: tags length != tokens length")
    if ex.task == "QA" and ex.span is not None:
        s, e = ex.span
        if not (0 <= s <= e < len(ex.tokens)):
            raise ValueError(f"line {lineno}: span {ex.span} out of bounds")
    if ex.task == "IR" and ex.positive is None:
        raise ValueError(f"line {lineno}: IR example lacks a positive document")
