"""Desk-scale pretrain/finetune harness producing persisted run records."""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adafactor import Adafactor
from .config import ModelConfig
from .corpus import TASKS, synthetic_corpus, task_sample
from .corruption import SampleTooShort, span_corrupt
from .costs import count_flops, count_params
from .models import Model, build, save_checkpoint
from .vocab import BOS_ID, EOS_ID, PAD_ID, encode_text, decode_ids

SCHEMA_VERSION = 1
AUX_LOSS_WEIGHT = 0.01
DIVERGENCE_LOSS = 1e4


@dataclass
class RunRecord:
    """One (architecture, size) training run: cost plus quality metrics."""

    run_id: str
    family: str
    size_label: str
    params: int
    flops_forward: int
    seed: int
    pretrain_steps: int = 0
    finetune_steps: int = 0
    steps_per_sec: float = 0.0
    upstream_neg_log_ppl: float | None = None
    downstream: dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    schema: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @property
    def downstream_mean(self) -> float | None:
        accs = [v for k, v in self.downstream.items() if k in TASKS]
        return float(np.mean(accs)) if accs else None


def append_records(path: str, records: list[RunRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(RunRecord.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# batching


def pad_batch(seqs: list[np.ndarray], length: int | None = None) -> np.ndarray:
    n = length if length is not None else max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s[:n]
    return out


def shift_right(targets: np.ndarray) -> np.ndarray:
    """Decoder input: BOS followed by the target, last token dropped."""
    out = np.full_like(targets, PAD_ID)
    out[:, 0] = BOS_ID
    out[:, 1:] = targets[:, :-1]
    return out


class PretrainBatcher:
    """Span-corruption batches drawn from token windows of the corpus."""

    def __init__(self, docs: list[str], rng: np.random.Generator,
                 batch_size: int, seq_len: int, rate: float, mean_span: float,
                 fixed_enc_len: int | None = None):
        self.token_docs = [encode_text(d) for d in docs if len(d) >= 2]
        if not self.token_docs:
            raise ValueError("corpus has no usable documents")
        self.rng = rng
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rate = rate
        self.mean_span = mean_span
        self.fixed_enc_len = fixed_enc_len

    def next(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        encs, tgts = [], []
        while len(encs) < self.batch_size:
            doc = self.token_docs[self.rng.integers(0, len(self.token_docs))]
            if len(doc) > self.seq_len:
                start = self.rng.integers(0, len(doc) - self.seq_len + 1)
                window = doc[start:start + self.seq_len]
            else:
                window = doc
            try:
                enc, tgt = span_corrupt(window, self.rate, self.mean_span, self.rng)
            except SampleTooShort:
                continue
            encs.append(enc)
            tgts.append(tgt)
        enc_ids = pad_batch(encs, self.fixed_enc_len)
        targets = pad_batch(tgts)
        return enc_ids, shift_right(targets), targets


class TaskBatcher:
    """Uniform mixture of the synthetic downstream tasks."""

    def __init__(self, rng: np.random.Generator, batch_size: int,
                 fixed_enc_len: int | None = None):
        self.rng = rng
        self.batch_size = batch_size
        self.fixed_enc_len = fixed_enc_len

    def next(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        encs, tgts = [], []
        for _ in range(self.batch_size):
            task = TASKS[self.rng.integers(0, len(TASKS))]
            src, dst = task_sample(task, self.rng)
            encs.append(np.concatenate([encode_text(src), [EOS_ID]]))
            tgts.append(np.concatenate([encode_text(dst), [EOS_ID]]))
        return (pad_batch(encs, self.fixed_enc_len), shift_right(pad_batch(tgts)),
                pad_batch(tgts))


# ---------------------------------------------------------------------------
# training


def _training_loss(model: Model, enc, dec_in, targets) -> T.Tensor:
    scores, aux = model.forward(enc, dec_in, collect_aux=True)
    loss = model.loss(scores, targets, ignore_id=PAD_ID)
    for a in aux:
        loss = T.add(loss, T.scale(a, AUX_LOSS_WEIGHT))
    return loss


def _train(model: Model, batcher, opt: Adafactor, steps: int,
           log_every: int = 0) -> tuple[float, str]:
    """Run the update loop; returns (steps_per_sec, status)."""
    status = "ok"
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        enc, dec_in, targets = batcher.next()
        with T.Tape() as tape:
            loss = _training_loss(model, enc, dec_in, targets)
        val = loss.item()
        if not np.isfinite(val) or val > DIVERGENCE_LOSS:
            status = "failed"
            break
        opt.step(tape.backward(loss))
        if log_every and step % log_every == 0:
            rate = step / (time.perf_counter() - t0)
            print(f"  step {step:5d}  loss {val:7.4f}  ({rate:.1f} steps/s)", flush=True)
    dt = max(time.perf_counter() - t0, 1e-9)
    return steps / dt, status


def evaluate_neg_log_ppl(model: Model, eval_batches) -> float:
    """U = -(held-out cross-entropy per target token, natural log)."""
    total, count = 0.0, 0
    for enc, dec_in, targets in eval_batches:
        scores = model.forward(enc, dec_in)
        n_tok = int((targets != PAD_ID).sum())
        total += model.loss(scores, targets, ignore_id=PAD_ID).item() * n_tok
        count += n_tok
    return -total / count


def _fixed_enc_len(config: ModelConfig, seq_len: int) -> int | None:
    return config.n_enc_fixed if config.family == "mixer" else None


def pretrain(config: ModelConfig, corpus: list[str] | None, steps: int, seed: int,
             batch_size: int = 4, seq_len: int = 64, lr_scale: float = 1.0,
             warmup: int = 100, rate: float = 0.15, mean_span: float = 3.0,
             n_eval_batches: int = 8, size_label: str = "", run_id: str | None = None,
             checkpoint_path: str | None = None, log_every: int = 0,
             ) -> tuple[Model, RunRecord]:
    """Span-corruption pretraining; returns the model and a partial RunRecord."""
    if corpus is None:
        corpus = synthetic_corpus(seed=0)
    n_valid = max(2, len(corpus) // 16)
    valid_docs, train_docs = corpus[:n_valid], corpus[n_valid:]
    model = build(config, seed=seed)
    opt = Adafactor(model.params, lr_scale=lr_scale, warmup=warmup)
    fixed = _fixed_enc_len(config, seq_len)
    batcher = PretrainBatcher(train_docs, np.random.default_rng(seed + 1),
                              batch_size, seq_len, rate, mean_span, fixed)
    eval_batcher = PretrainBatcher(valid_docs, np.random.default_rng(12345),
                                   batch_size, seq_len, rate, mean_span, fixed)
    eval_batches = [eval_batcher.next() for _ in range(n_eval_batches)]

    steps_per_sec, status = _train(model, batcher, opt, steps, log_every)
    record = RunRecord(
        run_id=run_id or f"{config.family}-{size_label or 'run'}-s{seed}-{uuid.uuid4().hex[:6]}",
        family=config.family, size_label=size_label,
        params=count_params(config).params_total,
        flops_forward=count_flops(config, seq_len, seq_len).flops_forward,
        seed=seed, pretrain_steps=steps, steps_per_sec=round(steps_per_sec, 3),
        status=status)
    if status == "ok":
        record.upstream_neg_log_ppl = evaluate_neg_log_ppl(model, eval_batches)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, record


def greedy_decode(model: Model, enc_ids: np.ndarray, max_len: int = 24) -> np.ndarray:
    """Argmax decoding until EOS (no cache; prefix recomputed each step)."""
    out: list[int] = []
    for _ in range(max_len):
        dec_in = np.array([BOS_ID] + out, dtype=np.int64)
        scores = model.forward(enc_ids, dec_in)
        nxt = int(np.argmax(scores.data[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return np.array(out, dtype=np.int64)


def evaluate_tasks(model: Model, seed: int = 999, n_per_task: int = 32,
                   fixed_enc_len: int | None = None) -> dict[str, float]:
    """Exact-match accuracy per task under greedy decoding."""
    accs: dict[str, float] = {}
    for task in TASKS:
        rng = np.random.default_rng(seed + hash(task) % 1000)
        hits = 0
        for _ in range(n_per_task):
            src, dst = task_sample(task, rng)
            enc = np.concatenate([encode_text(src), [EOS_ID]])
            if fixed_enc_len is not None:
                enc = pad_batch([enc], fixed_enc_len)[0]
            decoded = greedy_decode(model, enc, max_len=len(dst) + 4)
            hits += decode_ids(decoded) == dst
        accs[task] = hits / n_per_task
    return accs


def finetune(model: Model, record: RunRecord, steps: int, seed: int,
             batch_size: int = 4, lr_scale: float = 1.0, warmup: int = 100,
             n_eval: int = 32, checkpoint_path: str | None = None,
             log_every: int = 0) -> RunRecord:
    """Task-mixture finetuning; completes the RunRecord with downstream accuracy."""
    opt = Adafactor(model.params, lr_scale=lr_scale, warmup=warmup)
    fixed = _fixed_enc_len(model.config, 0)
    batcher = TaskBatcher(np.random.default_rng(seed + 2), batch_size, fixed)
    _, status = _train(model, batcher, opt, steps, log_every)
    record.finetune_steps = steps
    if status != "ok":
        record.status = status
        return record
    record.downstream = evaluate_tasks(model, n_per_task=n_eval, fixed_enc_len=fixed)
    record.downstream["mean"] = record.downstream_mean
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return record
