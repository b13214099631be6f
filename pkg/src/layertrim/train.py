"""Batch packing, deterministic shuffling, and supervised teacher training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .metrics import corpus_error_rate
from .model import ModelParams, bind_trainable, forward_batch
from .optim import OptimizerState, adam_step
from .taskgen import Corpus, TaskConfig


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    include_y1: bool = False
    log_every: int = 50
    eval_every: int = 0  # 0 disables periodic TER evaluation
    eval_samples: int = 64

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def pack_batch(samples, task: TaskConfig, include_y1: bool = False):
    """Pad packed sequences to a (B, T) batch with next-token targets.

    Returns (tokens, lengths, targets, target_mask). The mask selects
    positions whose next token lies in the supervised region: the y2 tokens
    plus the closing EOS (so decoding learns to stop), plus the y1 tokens
    when include_y1 is set. Padding uses the EOS id; trailing pads cannot
    influence real positions under causal attention and are excluded from
    every loss via lengths.
    """
    b = len(samples)
    t = max(len(s.packed) for s in samples)
    tokens = np.full((b, t), task.eos, dtype=np.int64)
    targets = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    for i, s in enumerate(samples):
        n = len(s.packed)
        tokens[i, :n] = s.packed
        targets[i, : n - 1] = s.packed[1:]
        lengths[i] = n
        supervised = set(np.flatnonzero(s.loss_mask).tolist())
        supervised.add(n - 1)  # the EOS that closes y2
        if include_y1:
            supervised.update(s.y1_positions())
        for pos in supervised:
            if pos >= 1:
                mask[i, pos - 1] = True
    return tokens, lengths, targets, mask


def batch_iterator(corpus: Corpus, batch_size: int, steps: int, seed: int):
    """Yield exactly `steps` batches, reshuffling once per epoch."""
    rng = np.random.default_rng(seed)
    emitted = 0
    while emitted < steps:
        perm = rng.permutation(len(corpus))
        for start in range(0, len(perm), batch_size):
            if emitted >= steps:
                return
            idx = perm[start : start + batch_size]
            yield [corpus.samples[i] for i in idx]
            emitted += 1


def train_supervised(
    params: ModelParams,
    corpus: Corpus,
    cfg: TrainConfig,
    seed: int,
    eval_corpus: Corpus | None = None,
) -> list[dict]:
    """Plain next-token cross-entropy training; mutates params in place.

    Returns log records (step, loss, tokens_seen, and eval TER when sampled).
    """
    if cfg.steps == 0:
        return []
    nodes = bind_trainable(params)
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    eval_subset = None
    if eval_corpus is not None and cfg.eval_every:
        eval_subset = Corpus(eval_corpus.task, eval_corpus.split,
                             eval_corpus.samples[: cfg.eval_samples])
    log: list[dict] = []
    tokens_seen = 0
    for step, batch in enumerate(batch_iterator(corpus, cfg.batch_size, cfg.steps, seed), start=1):
        tokens, lengths, targets, mask = pack_batch(batch, corpus.task, cfg.include_y1)
        trace = forward_batch(params, tokens, lengths, nodes=nodes)
        loss = tt.cross_entropy(trace.logits, targets, mask)
        value = float(loss.values)
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite training loss at step {step}")
        loss.backward()
        adam_step(nodes, opt)
        tokens_seen += int(lengths.sum())
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {"step": step, "loss": value, "tokens_seen": tokens_seen}
            if eval_subset is not None and step % cfg.eval_every == 0:
                rec["eval_ter"] = corpus_error_rate(params, eval_subset)
            log.append(rec)
    return log
