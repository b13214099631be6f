"""Per-layer importance scores.

Two families: ablation scores (generate with one layer skipped, measure the
token error rate against the reference; high means the layer matters) and
cosine scores (mean cosine distance between a layer's input and output
latents on teacher-forced sequences; the classical baseline).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .metrics import corpus_error_rate
from .taskgen import Corpus


@dataclass
class ImportanceProfile:
    wli: list[float]  # ablation score per layer (error rate, >= 0)
    cli: list[float]  # cosine distance per layer, in [0, 2]
    base_error_rate: float  # no-ablation error rate on the same corpus
    fingerprint: str  # model hash : corpus split : corpus seed : n_samples

    @property
    def n_layers(self) -> int:
        return len(self.wli)


def wli_score(params: mdl.ModelParams, eval_corpus: Corpus, layer_i: int) -> float:
    """Pooled error rate of greedy generations with layer_i ablated."""
    if not 0 <= layer_i < params.config.n_layers:
        raise ValueError(f"layer index {layer_i} outside [0, {params.config.n_layers})")
    if len(eval_corpus) == 0:
        raise ValueError("wli_score requires a nonempty corpus")
    return corpus_error_rate(params, eval_corpus, skip={layer_i})


def _cosine_accumulate(trace: mdl.ForwardTrace, sums: np.ndarray, counts: np.ndarray) -> None:
    """Add 1 - cos(x_in, x_out) per position into per-layer accumulators.

    Positions where either latent has zero norm are skipped.
    """
    for slot, _layer in enumerate(trace.executed):
        a = trace.layer_inputs[slot]
        b = trace.layer_outputs[slot]
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        ok = (na > 0) & (nb > 0)
        if not ok.any():
            continue
        cos = (a[ok] * b[ok]).sum(axis=-1) / (na[ok] * nb[ok])
        sums[slot] += (1.0 - cos).sum()
        counts[slot] += int(ok.sum())


def cli_score(params: mdl.ModelParams, eval_corpus: Corpus, layer_i: int) -> float:
    """Mean cosine distance between layer_i's input and output latents."""
    if not 0 <= layer_i < params.config.n_layers:
        raise ValueError(f"layer index {layer_i} outside [0, {params.config.n_layers})")
    if len(eval_corpus) == 0:
        raise ValueError("cli_score requires a nonempty corpus")
    sums = np.zeros(params.config.n_layers)
    counts = np.zeros(params.config.n_layers, dtype=np.int64)
    for s in eval_corpus.samples:
        _cosine_accumulate(mdl.forward(params, s.packed), sums, counts)
    if counts[layer_i] == 0:
        raise ValueError(f"cli_score: every position of layer {layer_i} had zero-norm latents")
    return float(sums[layer_i] / counts[layer_i])


def build_profile(params: mdl.ModelParams, eval_corpus: Corpus, workers: int = 1) -> ImportanceProfile:
    """Both score families for every layer, plus the no-ablation base rate.

    Ablation runs are independent read-only evaluations; workers > 1 spreads
    them over threads. Results are keyed by layer index, so the assembly is
    order-independent.
    """
    n_layers = params.config.n_layers
    if len(eval_corpus) == 0:
        raise ValueError("build_profile requires a nonempty corpus")

    sums = np.zeros(n_layers)
    counts = np.zeros(n_layers, dtype=np.int64)
    for s in eval_corpus.samples:
        _cosine_accumulate(mdl.forward(params, s.packed), sums, counts)
    if (counts == 0).any():
        raise ValueError("build_profile: a layer had zero-norm latents at every position")
    cli = (sums / counts).tolist()

    jobs = [None] + list(range(n_layers))  # None = base rate, no ablation

    def run(job):
        skip = () if job is None else {job}
        return corpus_error_rate(params, eval_corpus, skip=skip)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rates = list(pool.map(run, jobs))
    else:
        rates = [run(j) for j in jobs]

    fp = f"{mdl.fingerprint(params)}:{eval_corpus.split}:{eval_corpus.seed}:{len(eval_corpus)}"
    return ImportanceProfile(wli=rates[1:], cli=cli, base_error_rate=rates[0], fingerprint=fp)


def save_profile(profile: ImportanceProfile, path) -> None:
    with open(path, "w") as f:
        f.write("# layertrim importance profile v1\n")
        f.write(f"# base_error_rate={profile.base_error_rate!r}\n")
        f.write(f"# fingerprint={profile.fingerprint}\n")
        f.write("# columns: layer\twli\tcli\n")
        for i, (w, c) in enumerate(zip(profile.wli, profile.cli)):
            f.write(f"{i}\t{w!r}\t{c!r}\n")


def load_profile(path) -> ImportanceProfile:
    base = None
    fp = ""
    wli: list[float] = []
    cli: list[float] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("base_error_rate="):
                    base = float(body.split("=", 1)[1])
                elif body.startswith("fingerprint="):
                    fp = body.split("=", 1)[1]
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            idx, w, c = parts
            if int(idx) != len(wli):
                raise ValueError(f"{path}:{lineno}: layer rows out of order")
            wli.append(float(w))
            cli.append(float(c))
    if base is None or not wli:
        raise ValueError(f"{path}: missing base_error_rate header or layer rows")
    return ImportanceProfile(wli=wli, cli=cli, base_error_rate=base, fingerprint=fp)
