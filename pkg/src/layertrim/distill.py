"""Healing: composite supervised + distillation loss and its training loop.

The total loss is

    alpha * CE + (1 - alpha)/4 * (logit + latent + attention + embedding)

where CE and the logit term are masked to the supervised target region, and
the three alignment terms cover all real (non-padding) positions. Latent and
attention targets come from the teacher layer named by the prune plan:
dynamically the last layer before the next retained one, or the retained
layer itself in same_index mode. Teacher signals are gradient-detached
throughout; the teacher is frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .compress import PrunePlan, validate_plan
from .metrics import corpus_error_rate
from .model import BatchTrace, ModelParams, bind_trainable, forward_batch
from .optim import OptimizerState, adam_step
from .taskgen import Corpus, TaskConfig
from .tensor import TensorNode
from .train import batch_iterator, pack_batch

TARGET_MODES = ("dynamic", "same_index")


@dataclass
class DistillConfig:
    alpha: float = 0.25  # supervised share; the four distill terms split the rest equally
    skew_lambda: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 200
    use_logit: bool = True
    use_latent: bool = True
    use_attention: bool = True
    use_embedding: bool = True
    target_mode: str = "dynamic"
    include_y1: bool = False
    log_every: int = 1
    eval_every: int = 0
    eval_samples: int = 32

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.skew_lambda <= 1.0:
            raise ValueError(f"skew_lambda must be in (0, 1], got {self.skew_lambda}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class LossBreakdown:
    total: float
    ce: float
    logit: float
    latent: float
    attention: float
    embedding: float

    def fields(self) -> dict[str, float]:
        return {
            "total": self.total, "ce": self.ce, "logit": self.logit,
            "latent": self.latent, "attention": self.attention, "embedding": self.embedding,
        }


def _check_traces(student_trace: BatchTrace, teacher_trace: BatchTrace, plan: PrunePlan) -> None:
    if not np.array_equal(student_trace.tokens, teacher_trace.tokens):
        raise ValueError("student and teacher traces come from different input tokens")
    if not np.array_equal(student_trace.lengths, teacher_trace.lengths):
        raise ValueError("student and teacher traces disagree on sequence lengths")
    validate_plan(plan)
    if student_trace.executed != list(range(len(plan.retained))):
        raise ValueError("student trace must execute exactly the plan's student layers")
    if teacher_trace.executed != list(range(plan.teacher_depth)):
        raise ValueError("teacher trace must execute all teacher layers (no ablation)")


def _valid_mask(trace: BatchTrace) -> np.ndarray:
    b, t = trace.tokens.shape
    return (np.arange(t)[None, :] < trace.lengths[:, None]).astype(np.float64)


def _masked_mse(pred: TensorNode, target: np.ndarray, weight: np.ndarray, denom: float) -> TensorNode:
    diff = tt.mul(tt.add(pred, -target), weight)
    return tt.mul(tt.reduce_sum(tt.mul(diff, diff)), 1.0 / denom)


def _target_indices(plan: PrunePlan, mode: str) -> list[int]:
    if mode not in TARGET_MODES:
        raise ValueError(f"target mode must be one of {TARGET_MODES}, got {mode!r}")
    return plan.distill_target if mode == "dynamic" else plan.retained


def latent_loss(student_trace: BatchTrace, teacher_trace: BatchTrace,
                plan: PrunePlan, mode: str = "dynamic") -> TensorNode:
    """Mean squared gap between student layer outputs and their teacher targets."""
    _check_traces(student_trace, teacher_trace, plan)
    valid = _valid_mask(student_trace)
    d = student_trace.embedded.shape[-1]
    weight = valid[:, :, None]
    denom = valid.sum() * d
    targets = _target_indices(plan, mode)
    acc = None
    for j, t_idx in enumerate(targets):
        term = _masked_mse(student_trace.layer_outputs[j],
                           teacher_trace.layer_outputs[t_idx].values, weight, denom)
        acc = term if acc is None else tt.add(acc, term)
    return tt.mul(acc, 1.0 / len(targets))


def attention_loss(student_trace: BatchTrace, teacher_trace: BatchTrace,
                   plan: PrunePlan, mode: str = "dynamic") -> TensorNode:
    """As latent_loss, over head-averaged post-softmax attention maps.

    Only causal cells of real rows contribute: position i of a live sequence
    attends to j <= i, and those cells are averaged over.
    """
    _check_traces(student_trace, teacher_trace, plan)
    valid = _valid_mask(student_trace)
    t_len = student_trace.tokens.shape[1]
    causal = np.tril(np.ones((t_len, t_len)))
    weight = valid[:, :, None] * causal[None, :, :]
    lengths = student_trace.lengths.astype(np.float64)
    denom = (lengths * (lengths + 1) / 2).sum()
    targets = _target_indices(plan, mode)
    acc = None
    for j, t_idx in enumerate(targets):
        s_avg = tt.reduce_mean(student_trace.attentions[j], axis=1)
        t_avg = teacher_trace.attentions[t_idx].values.mean(axis=1)
        term = _masked_mse(s_avg, t_avg, weight, denom)
        acc = term if acc is None else tt.add(acc, term)
    return tt.mul(acc, 1.0 / len(targets))


def embedding_loss(student_trace: BatchTrace, teacher_trace: BatchTrace) -> TensorNode:
    """MSE between student and teacher embedded-input streams."""
    if not np.array_equal(student_trace.tokens, teacher_trace.tokens):
        raise ValueError("embedding_loss: traces come from different input tokens")
    if student_trace.embedded.shape != teacher_trace.embedded.shape:
        raise ValueError(
            f"embedding_loss shape mismatch: {student_trace.embedded.shape} "
            f"vs {teacher_trace.embedded.shape}"
        )
    valid = _valid_mask(student_trace)
    d = student_trace.embedded.shape[-1]
    return _masked_mse(student_trace.embedded, teacher_trace.embedded.values,
                       valid[:, :, None], valid.sum() * d)


def composite_loss(
    student: ModelParams,
    teacher: ModelParams,
    batch: list,
    task: TaskConfig,
    plan: PrunePlan,
    cfg: DistillConfig,
    nodes: dict[str, TensorNode] | None = None,
) -> tuple[TensorNode, LossBreakdown]:
    """All five terms on one packed batch; pass bound nodes to train.

    The teacher forward runs graph-free; only the student carries gradients.
    """
    if len(plan.retained) != student.config.n_layers:
        raise ValueError(
            f"plan keeps {len(plan.retained)} layers but student has {student.config.n_layers}"
        )
    if plan.teacher_depth != teacher.config.n_layers:
        raise ValueError(
            f"plan depth {plan.teacher_depth} != teacher depth {teacher.config.n_layers}"
        )
    tokens, lengths, targets, tmask = pack_batch(batch, task, cfg.include_y1)
    teacher_trace = forward_batch(teacher, tokens, lengths)
    student_trace = forward_batch(student, tokens, lengths, nodes=nodes)

    ce = tt.cross_entropy(student_trace.logits, targets, tmask)

    zero = TensorNode(0.0)
    logit = latent = attention = embedding = zero
    if cfg.use_logit:
        v = student.config.vocab_size
        flat = tt.reshape(student_trace.logits, (-1, v))
        sel = np.flatnonzero(tmask.reshape(-1))
        student_probs = tt.softmax(tt.take_rows(flat, sel), axis=-1)
        t_logits = teacher_trace.logits.values.reshape(-1, v)[sel]
        e = np.exp(t_logits - t_logits.max(axis=-1, keepdims=True))
        teacher_probs = e / e.sum(axis=-1, keepdims=True)
        logit = tt.skew_kl(teacher_probs, student_probs, cfg.skew_lambda)
    if cfg.use_latent:
        latent = latent_loss(student_trace, teacher_trace, plan, cfg.target_mode)
    if cfg.use_attention:
        attention = attention_loss(student_trace, teacher_trace, plan, cfg.target_mode)
    if cfg.use_embedding:
        embedding = embedding_loss(student_trace, teacher_trace)

    distill_sum = tt.add(tt.add(tt.add(logit, latent), attention), embedding)
    total = tt.add(tt.mul(ce, cfg.alpha), tt.mul(distill_sum, (1.0 - cfg.alpha) / 4.0))
    breakdown = LossBreakdown(
        total=float(total.values),
        ce=float(ce.values),
        logit=float(logit.values),
        latent=float(latent.values),
        attention=float(attention.values),
        embedding=float(embedding.values),
    )
    return total, breakdown


def heal(
    student: ModelParams,
    teacher: ModelParams,
    plan: PrunePlan,
    corpus: Corpus,
    cfg: DistillConfig,
    seed: int,
    eval_corpus: Corpus | None = None,
) -> list[dict]:
    """Distillation training of the pruned student against the frozen teacher.

    Mutates the student in place for cfg.steps batches and returns the log:
    a LossBreakdown record per logging interval plus eval TER when sampled.
    A zero-step budget leaves the student untouched.
    """
    if cfg.steps == 0:
        return []
    nodes = bind_trainable(student)
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    eval_subset = None
    if eval_corpus is not None and cfg.eval_every:
        eval_subset = Corpus(eval_corpus.task, eval_corpus.split,
                             eval_corpus.samples[: cfg.eval_samples])
    log: list[dict] = []
    tokens_seen = 0
    for step, batch in enumerate(batch_iterator(corpus, cfg.batch_size, cfg.steps, seed), start=1):
        total, bd = composite_loss(student, teacher, batch, corpus.task, plan, cfg, nodes=nodes)
        for name, value in bd.fields().items():
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at step {step}: term '{name}' = {value}")
        total.backward()
        adam_step(nodes, opt)
        tokens_seen += int(sum(len(s.packed) for s in batch))
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {"step": step, "tokens_seen": tokens_seen}
            rec.update(bd.fields())
            if eval_subset is not None and step % cfg.eval_every == 0:
                rec["eval_ter"] = corpus_error_rate(student, eval_subset)
            log.append(rec)
    return log


def save_training_log(records: list[dict], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_training_log(path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed training log record: {e}") from None
    return records
