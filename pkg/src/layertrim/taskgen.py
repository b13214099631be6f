"""Synthetic prompt-conditioned transduction corpus.

Each sample hides a per-sample "speaker" transform: a cyclic shift s over the
content vocabulary. The model sees a reference pair (x1, y1) with y1 = x1 + s
(mod C) and must apply the same shift to a query x2. Samples are packed as

    [BOS] x1 [SEP] y1 [SEP] x2 [SEP] y2 [EOS]

with BOS/SEP/EOS drawn from reserved ids above the content vocabulary.

Corpus file format (plain text, one line each):
  line 1: JSON header {"task": {...}, "split": ..., "n": ...}
  lines 2..n+1: JSON records {"x1": [...], "y1": [...], "x2": [...],
                              "y2": [...], "speaker_id": k}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class TaskConfig:
    content_vocab: int = 64
    x_len_min: int = 8
    x_len_max: int = 16
    n_speakers: int = 64
    train_seed: int = 1
    eval_seed: int = 2
    max_packed_len: int = 128

    def __post_init__(self):
        if self.content_vocab < 2:
            raise ValueError(f"content_vocab must be >= 2, got {self.content_vocab}")
        if self.n_speakers < 2:
            raise ValueError(f"n_speakers must be >= 2, got {self.n_speakers}")
        if not 1 <= self.x_len_min <= self.x_len_max:
            raise ValueError(f"bad x length range [{self.x_len_min}, {self.x_len_max}]")
        if self.train_seed == self.eval_seed:
            raise ValueError("train and eval splits must use disjoint seeds")
        if 4 * self.x_len_max + 5 > self.max_packed_len:
            raise ValueError(
                f"x_len_max {self.x_len_max} cannot pack within max_packed_len {self.max_packed_len}"
            )

    @property
    def bos(self) -> int:
        return self.content_vocab

    @property
    def sep(self) -> int:
        return self.content_vocab + 1

    @property
    def eos(self) -> int:
        return self.content_vocab + 2

    @property
    def vocab_size(self) -> int:
        return self.content_vocab + 3


@dataclass
class Sample:
    x1: list[int]
    y1: list[int]
    x2: list[int]
    y2: list[int]
    speaker_id: int  # diagnostics only, never fed to the model
    packed: list[int]
    loss_mask: list[bool]  # True exactly at the y2 positions of packed
    y2_start: int

    @property
    def prompt(self) -> list[int]:
        """Everything up to and including the separator before y2."""
        return self.packed[: self.y2_start]

    def y1_positions(self) -> list[int]:
        start = 1 + len(self.x1) + 1
        return list(range(start, start + len(self.y1)))


def _pack(task: TaskConfig, x1, y1, x2, y2, speaker_id: int) -> Sample:
    head = [task.bos] + x1 + [task.sep] + y1 + [task.sep] + x2 + [task.sep]
    y2_start = len(head)
    packed = head + y2 + [task.eos]
    mask = [y2_start <= i < y2_start + len(y2) for i in range(len(packed))]
    return Sample(x1, y1, x2, y2, speaker_id, packed, mask, y2_start)


def make_sample(task: TaskConfig, rng_seed) -> Sample:
    """One deterministic sample; rng_seed may be an int or a seed tuple."""
    rng = np.random.default_rng(rng_seed)
    s = int(rng.integers(task.n_speakers))
    n1 = int(rng.integers(task.x_len_min, task.x_len_max + 1))
    n2 = int(rng.integers(task.x_len_min, task.x_len_max + 1))
    x1 = rng.integers(task.content_vocab, size=n1).tolist()
    x2 = rng.integers(task.content_vocab, size=n2).tolist()
    y1 = [(v + s) % task.content_vocab for v in x1]
    y2 = [(v + s) % task.content_vocab for v in x2]
    sample = _pack(task, x1, y1, x2, y2, s)
    if len(sample.packed) > task.max_packed_len:
        raise ValueError(f"packed length {len(sample.packed)} exceeds {task.max_packed_len}")
    return sample


@dataclass
class Corpus:
    task: TaskConfig
    split: str
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def seed(self) -> int:
        return self.task.train_seed if self.split == "train" else self.task.eval_seed


def make_corpus(task: TaskConfig, n: int, split: str) -> Corpus:
    """n samples for the given split; eval regenerates independently of train."""
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    base = task.train_seed if split == "train" else task.eval_seed
    samples = [make_sample(task, (base, i)) for i in range(n)]
    return Corpus(task, split, samples)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as f:
        header = {"task": asdict(corpus.task), "split": corpus.split, "n": len(corpus)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in corpus.samples:
            rec = {"x1": s.x1, "y1": s.y1, "x2": s.x2, "y2": s.y2, "speaker_id": s.speaker_id}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    with open(path) as f:
        header = json.loads(f.readline())
        task = TaskConfig(**header["task"])
        samples = []
        for line in f:
            rec = json.loads(line)
            samples.append(_pack(task, rec["x1"], rec["y1"], rec["x2"], rec["y2"], rec["speaker_id"]))
    if len(samples) != header["n"]:
        raise ValueError(f"{path}: expected {header['n']} records, found {len(samples)}")
    return Corpus(task, header["split"], samples)
