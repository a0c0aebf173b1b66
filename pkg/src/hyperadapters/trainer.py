"""Multi-task seq2seq training loop.

Each step samples one task proportionally to its training-set size,
draws a batch from that task, and applies one AdamW update with a
linear warmup/decay schedule. Dev metrics are computed every
``eval_every`` steps over all tasks in a fixed order; the checkpoint
with the best unweighted mean dev metric is retained. Everything is
driven by explicit seeded generators, so equal seeds replay
bit-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import checkpoint_bytes
from .model import Seq2SeqModel
from .tasks import BOS_ID, EOS_ID, PAD_ID, metric
from .tensor import Tape, backward


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run is aborted rather than continued."""


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    eval_every: int = 250
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("TrainConfig.warmup_steps must be >= 1")
        if self.warmup_steps > self.total_steps:
            raise ValueError("TrainConfig.warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")


def lr_at(step, cfg: TrainConfig):
    """Linear 0->peak over warmup, then linear peak->0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class ParamPartition:
    """Disjoint, exhaustive split of the model's named tensors."""

    trainable: dict
    frozen: dict


def build_partition(model: Seq2SeqModel, full_finetune=False) -> ParamPartition:
    base = {f"base.{k}": v for k, v in model.base.items()}
    adapt = model.adaptation_params()
    if full_finetune:
        trainable, frozen = {**base, **adapt}, {}
    else:
        trainable, frozen = adapt, base
    for t in trainable.values():
        t.requires_grad = True
    for t in frozen.values():
        t.requires_grad = False
    return ParamPartition(trainable=trainable, frozen=frozen)


class AdamW:
    """Adam with decoupled weight decay; moments persist across steps."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable tensor {name!r}")
            g = p.grad
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + cfg.adam_eps)
            p.data -= (lr * update).astype(p.data.dtype)
            if cfg.weight_decay:
                p.data -= (lr * cfg.weight_decay) * p.data

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


def proportional_sample(suite, rng):
    """Task index drawn with probability proportional to train-split size."""
    sizes = np.asarray(suite.train_sizes(), dtype=np.float64)
    if sizes.size == 0 or sizes.sum() <= 0:
        raise ValueError("proportional_sample: suite has no training examples")
    return int(rng.choice(sizes.size, p=sizes / sizes.sum()))


def make_batch(examples):
    """Pad a list of Examples into (enc_tokens, prefix, labels, task_ids)."""
    n_in = max(len(ex.input_ids) for ex in examples)
    n_tg = max(len(ex.target_ids) for ex in examples)
    bsz = len(examples)
    enc = np.full((bsz, n_in), PAD_ID, dtype=np.int64)
    prefix = np.full((bsz, n_tg), PAD_ID, dtype=np.int64)
    labels = np.full((bsz, n_tg), PAD_ID, dtype=np.int64)
    task_ids = np.empty(bsz, dtype=np.int64)
    for i, ex in enumerate(examples):
        enc[i, : len(ex.input_ids)] = ex.input_ids
        prefix[i, 0] = BOS_ID
        prefix[i, 1 : len(ex.target_ids)] = ex.target_ids[:-1]
        labels[i, : len(ex.target_ids)] = ex.target_ids
        task_ids[i] = ex.task_id
    return enc, prefix, labels, task_ids


def evaluate(model: Seq2SeqModel, suite, split="dev", batch_size=64,
             use_mean_task_embedding=False, task_names=None):
    """Greedy-decoding metric per task, in fixed task order."""
    out = {}
    for ti, spec in enumerate(suite.tasks):
        if task_names is not None and spec.name not in task_names:
            continue
        examples = suite.examples(ti, split)
        max_new = min(max(len(ex.target_ids) for ex in examples) + 1, model.cfg.max_len - 1)
        preds = []
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            enc, _, _, task_ids = make_batch(chunk)
            preds.extend(
                model.greedy_decode(
                    enc, task_ids, max_new=max_new,
                    use_mean_task_embedding=use_mean_task_embedding,
                )
            )
        golds = [[t for t in ex.target_ids if t != EOS_ID] for ex in examples]
        out[spec.name] = metric(spec, preds, golds)
    return out


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)   # {step, task, metric_name, value}
    losses: list = field(default_factory=list)    # (step, task_name, loss)
    best_step: int = 0
    best_metric: float = float("-inf")
    best_state: bytes | None = None
    final_metric: float = float("-inf")


def train(model: Seq2SeqModel, suite, cfg: TrainConfig, out_dir=None,
          full_finetune=False) -> TrainResult:
    """Run the full schedule; returns logs plus the best dev checkpoint."""
    partition = build_partition(model, full_finetune)
    opt = AdamW(partition.trainable, cfg)
    sample_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    result = TrainResult()

    def run_eval(step):
        per_task = evaluate(model, suite, "dev", batch_size=max(cfg.batch_size, 64))
        for spec in suite.tasks:
            result.metrics.append(
                {
                    "step": step,
                    "task": spec.name,
                    "metric_name": "accuracy" if spec.kind == "classification" else "exact_match",
                    "value": per_task[spec.name],
                }
            )
        mean = float(np.mean([per_task[s.name] for s in suite.tasks]))
        result.metrics.append(
            {"step": step, "task": "mean", "metric_name": "mean_metric", "value": mean}
        )
        if mean > result.best_metric:
            result.best_metric = mean
            result.best_step = step
            result.best_state = checkpoint_bytes(model.state_dict())
        result.final_metric = mean

    for step in range(1, cfg.total_steps + 1):
        ti = proportional_sample(suite, sample_rng)
        pool = suite.examples(ti, "train")
        idx = sample_rng.integers(0, len(pool), size=cfg.batch_size)
        enc, prefix, labels, task_ids = make_batch([pool[i] for i in idx])
        with Tape() as tape:
            loss = model.forward_loss(enc, prefix, labels, task_ids)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss {loss_val} at step {step}")
        if opt.params:
            backward(loss, tape)
            opt.step(lr_at(step, cfg))
            opt.zero_grads()
        result.losses.append((step, suite.tasks[ti].name, loss_val))
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            run_eval(step)

    if out_dir is not None:
        write_logs(out_dir, result)
    return result


def write_logs(out_dir, result: TrainResult):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fp:
        for rec in result.metrics:
            fp.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "loss.csv"), "w", encoding="utf-8") as fp:
        fp.write("step,task,loss\n")
        for step, task, loss in result.losses:
            fp.write(f"{step},{task},{loss!r}\n")
