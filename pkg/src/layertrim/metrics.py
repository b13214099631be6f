"""Token error rate (the WER analog on this task), throughput, and reports.

The synthetic task has no words, so all error rates here are token-level
edit distance over reference length ("TER"). Rates are pooled across a
corpus: sum of distances divided by sum of reference lengths.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict

import numpy as np

from .model import ModelParams, generate_greedy, param_count, param_bytes
from .taskgen import Corpus


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance: minimum substitutions + insertions + deletions."""
    a = list(hyp)
    b = list(ref)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    cur = [0] * (len(b) + 1)
    for i, ai in enumerate(a, start=1):
        cur[0] = i
        for j, bj in enumerate(b, start=1):
            cost = 0 if ai == bj else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return prev[len(b)]


def error_rate(pairs) -> float:
    """Pooled (micro-averaged) rate: sum of distances / sum of ref lengths."""
    total_dist = 0
    total_ref = 0
    for hyp, ref in pairs:
        total_dist += edit_distance(hyp, ref)
        total_ref += len(ref)
    if total_ref == 0:
        raise ValueError("error_rate: total reference length is zero")
    return total_dist / total_ref


def generation_pairs(params: ModelParams, corpus: Corpus, skip=()) -> list[tuple[list[int], list[int]]]:
    """Greedy-decode every sample's prompt and pair it with the y2 reference.

    Generation stops at EOS or at twice the reference length, whichever
    comes first, so a degenerate model cannot inflate runtime without bound.
    """
    eos = corpus.task.eos
    cap = params.config.max_seq_len
    pairs = []
    for s in corpus.samples:
        max_new = min(2 * len(s.y2), cap - len(s.prompt))
        hyp = generate_greedy(params, s.prompt, stop_token=eos, max_new=max_new, skip=skip)
        pairs.append((hyp, s.y2))
    return pairs


def corpus_error_rate(params: ModelParams, corpus: Corpus, skip=()) -> float:
    return error_rate(generation_pairs(params, corpus, skip=skip))


def measure_throughput(params: ModelParams, prompts, max_new: int, stop_token: int = -1) -> float:
    """Generated tokens per second over all prompts, after an untimed warmup pass.

    The default stop_token never matches, so every prompt contributes exactly
    max_new tokens and timings are comparable across models.
    """
    if not prompts:
        raise ValueError("measure_throughput requires at least one prompt")
    for p in prompts:
        generate_greedy(params, p, stop_token=stop_token, max_new=max_new)
    t0 = time.perf_counter()
    generated = 0
    for p in prompts:
        generated += len(generate_greedy(params, p, stop_token=stop_token, max_new=max_new))
    elapsed = time.perf_counter() - t0
    if generated == 0:
        raise ValueError("measure_throughput: no tokens were generated")
    return generated / elapsed


@dataclass
class EvalReport:
    error_rate: float
    n_samples: int
    tokens_per_second: float
    param_count: int
    param_bytes: int
    depth: int


def evaluate(params: ModelParams, corpus: Corpus, throughput_prompts: int = 16,
             throughput_max_new: int = 32) -> EvalReport:
    """TER on the corpus plus throughput and size accounting."""
    rate = corpus_error_rate(params, corpus)
    prompts = [s.prompt for s in corpus.samples[:throughput_prompts]]
    tps = measure_throughput(params, prompts, max_new=throughput_max_new)
    return EvalReport(
        error_rate=rate,
        n_samples=len(corpus),
        tokens_per_second=tps,
        param_count=param_count(params),
        param_bytes=param_bytes(params),
        depth=params.config.n_layers,
    )


def save_report(report: EvalReport, path) -> None:
    """One structured-text record; timing is kept in its own sub-object so the
    deterministic fields can be hashed separately from wall-clock values."""
    rec = asdict(report)
    rec["timing"] = {"tokens_per_second": rec.pop("tokens_per_second")}
    with open(path, "w") as f:
        f.write(json.dumps(rec, sort_keys=True, indent=2) + "\n")


def load_report(path) -> EvalReport:
    with open(path) as f:
        rec = json.load(f)
    timing = rec.pop("timing", {})
    rec["tokens_per_second"] = timing.get("tokens_per_second", rec.pop("tokens_per_second", 0.0))
    return EvalReport(**rec)


def canonical_report_bytes(path) -> bytes:
    """Report content with timing stripped, for byte-level determinism checks."""
    with open(path) as f:
        rec = json.load(f)
    rec.pop("timing", None)
    return json.dumps(rec, sort_keys=True).encode()
