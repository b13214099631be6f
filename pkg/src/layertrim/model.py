"""Decoder-only pre-norm transformer with per-layer residual traces.

The forward pass can skip an arbitrary subset of layers; because blocks are
pre-norm and purely additive on the residual stream, a skipped layer is an
exact pass-through. Training-time forwards run through the autodiff graph;
greedy decoding uses a plain-numpy incremental path with a KV cache.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .tensor import TensorNode

CHECKPOINT_MAGIC = b"LTCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; iteration order defines file layout."""
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.max_seq_len, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        shapes[f"layer{i}.ln1.gain"] = (cfg.d_model,)
        shapes[f"layer{i}.ln1.bias"] = (cfg.d_model,)
        shapes[f"layer{i}.attn.wq"] = (cfg.d_model, cfg.d_model)
        shapes[f"layer{i}.attn.wk"] = (cfg.d_model, cfg.d_model)
        shapes[f"layer{i}.attn.wv"] = (cfg.d_model, cfg.d_model)
        shapes[f"layer{i}.attn.wo"] = (cfg.d_model, cfg.d_model)
        shapes[f"layer{i}.ln2.gain"] = (cfg.d_model,)
        shapes[f"layer{i}.ln2.bias"] = (cfg.d_model,)
        shapes[f"layer{i}.ffn.w1"] = (cfg.d_model, cfg.d_ff)
        shapes[f"layer{i}.ffn.w2"] = (cfg.d_ff, cfg.d_model)
    shapes["final_ln.gain"] = (cfg.d_model,)
    shapes["final_ln.bias"] = (cfg.d_model,)
    shapes["out_proj"] = (cfg.d_model, cfg.vocab_size)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic initialization from cfg.seed.

    Weight matrices are 0.02 * N(0,1); the residual output projections
    (attention output and second feed-forward matrix) carry an extra
    1/sqrt(2*n_layers) so the initial residual stream stays well-scaled.
    """
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain") or name.endswith(".bias"):
            fill = 1.0 if name.endswith(".gain") else 0.0
            tensors[name] = np.full(shape, fill, dtype=np.float64)
            continue
        w = 0.02 * rng.standard_normal(shape)
        if name.endswith(".attn.wo") or name.endswith(".ffn.w2"):
            w *= resid_scale
        tensors[name] = w
    return ModelParams(cfg, tensors)


def param_count(params: ModelParams) -> int:
    return sum(v.size for v in params.tensors.values())


def param_bytes(params: ModelParams) -> int:
    return param_count(params) * 8


def bind_trainable(params: ModelParams) -> dict[str, TensorNode]:
    """Wrap parameter arrays as gradient-carrying leaves sharing the buffers.

    Optimizer updates through the nodes mutate params.tensors in place.
    """
    return {name: TensorNode(arr, requires_grad=True) for name, arr in params.tensors.items()}


@dataclass
class ForwardTrace:
    """Single-sequence trace: logits plus per-executed-layer residual states."""

    logits: np.ndarray  # (T, V)
    embedded: np.ndarray  # (T, d), the x^0 stream fed to the first layer
    executed: list[int]
    layer_inputs: list[np.ndarray]  # x^{l-1} per executed layer, (T, d)
    layer_outputs: list[np.ndarray]  # x^l per executed layer, (T, d)
    attentions: list[np.ndarray]  # (heads, T, T) post-softmax probabilities


@dataclass
class BatchTrace:
    """Batched graph-carrying trace used by the training losses."""

    tokens: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,) real lengths; positions >= length are padding
    logits: TensorNode  # (B, T, V)
    embedded: TensorNode  # (B, T, d)
    executed: list[int]
    layer_inputs: list[TensorNode] = field(default_factory=list)
    layer_outputs: list[TensorNode] = field(default_factory=list)
    attentions: list[TensorNode] = field(default_factory=list)  # (B, H, T, T)


def _check_skip(cfg: ModelConfig, skip) -> frozenset:
    skip = frozenset(int(i) for i in skip)
    bad = [i for i in skip if i < 0 or i >= cfg.n_layers]
    if bad:
        raise ValueError(f"skip indices {sorted(bad)} outside [0, {cfg.n_layers})")
    return skip


def _causal_bias(t: int) -> np.ndarray:
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, k=1)] = tt.NEG_MASK
    return bias


def forward_batch(
    params: ModelParams,
    tokens: np.ndarray,
    lengths: np.ndarray | None = None,
    skip=(),
    nodes: dict[str, TensorNode] | None = None,
) -> BatchTrace:
    """Teacher-forced forward over a padded (B, T) token batch.

    Pass nodes=bind_trainable(params) to connect gradients; otherwise the
    pass is graph-free. Trailing padding cannot influence real positions
    (causal attention), so padded entries are simply excluded from losses
    downstream via lengths.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"forward_batch expects (B, T) tokens, got shape {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    skip = _check_skip(cfg, skip)
    if lengths is None:
        lengths = np.full(b, t, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)

    p = nodes if nodes is not None else {k: TensorNode(v) for k, v in params.tensors.items()}
    h, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    bias = _causal_bias(t)

    x = tt.add(tt.take_rows(p["tok_emb"], tokens), tt.take_rows(p["pos_emb"], np.arange(t)))
    trace = BatchTrace(
        tokens=tokens, lengths=lengths, logits=None, embedded=x,
        executed=[i for i in range(cfg.n_layers) if i not in skip],
    )
    for i in range(cfg.n_layers):
        if i in skip:
            continue
        trace.layer_inputs.append(x)
        pre = tt.layer_norm(x, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])
        q = tt.transpose(tt.reshape(tt.linear(pre, p[f"layer{i}.attn.wq"]), (b, t, h, dh)), (0, 2, 1, 3))
        k = tt.transpose(tt.reshape(tt.linear(pre, p[f"layer{i}.attn.wk"]), (b, t, h, dh)), (0, 2, 1, 3))
        v = tt.transpose(tt.reshape(tt.linear(pre, p[f"layer{i}.attn.wv"]), (b, t, h, dh)), (0, 2, 1, 3))
        scores = tt.add(tt.mul(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), scale), bias)
        probs = tt.softmax(scores, axis=-1)
        trace.attentions.append(probs)
        ctx = tt.reshape(tt.transpose(tt.matmul(probs, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = tt.add(x, tt.linear(ctx, p[f"layer{i}.attn.wo"]))
        pre2 = tt.layer_norm(x, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])
        ff = tt.linear(tt.gelu(tt.linear(pre2, p[f"layer{i}.ffn.w1"])), p[f"layer{i}.ffn.w2"])
        x = tt.add(x, ff)
        trace.layer_outputs.append(x)

    final = tt.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
    trace.logits = tt.linear(final, p["out_proj"])
    return trace


def forward(params: ModelParams, tokens, skip=()) -> ForwardTrace:
    """Graph-free forward over one token sequence, skipping the given layers."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError(f"forward expects a nonempty 1-d token sequence, got shape {tokens.shape}")
    bt = forward_batch(params, tokens[None, :], skip=skip)
    return ForwardTrace(
        logits=bt.logits.values[0],
        embedded=bt.embedded.values[0],
        executed=bt.executed,
        layer_inputs=[n.values[0] for n in bt.layer_inputs],
        layer_outputs=[n.values[0] for n in bt.layer_outputs],
        attentions=[n.values[0] for n in bt.attentions],
    )


def _np_layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gain + shift


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _np_softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _DecodeState:
    """Per-layer key/value caches for incremental greedy decoding."""

    def __init__(self, params: ModelParams, skip, capacity: int):
        cfg = params.config
        self.cfg = cfg
        self.w = params.tensors
        self.skip = skip
        self.pos = 0
        self.k_cache = [
            None if i in skip else np.empty((cfg.n_heads, capacity, cfg.head_dim))
            for i in range(cfg.n_layers)
        ]
        self.v_cache = [
            None if i in skip else np.empty((cfg.n_heads, capacity, cfg.head_dim))
            for i in range(cfg.n_layers)
        ]

    def prefill(self, tokens: np.ndarray) -> np.ndarray:
        """Process the prompt; returns logits at the final prompt position."""
        cfg, w = self.cfg, self.w
        t = len(tokens)
        h, dh = cfg.n_heads, cfg.head_dim
        bias = _causal_bias(t)
        x = w["tok_emb"][tokens] + w["pos_emb"][:t]
        for i in range(cfg.n_layers):
            if i in self.skip:
                continue
            pre = _np_layer_norm(x, w[f"layer{i}.ln1.gain"], w[f"layer{i}.ln1.bias"])
            q = (pre @ w[f"layer{i}.attn.wq"]).reshape(t, h, dh).transpose(1, 0, 2)
            k = (pre @ w[f"layer{i}.attn.wk"]).reshape(t, h, dh).transpose(1, 0, 2)
            v = (pre @ w[f"layer{i}.attn.wv"]).reshape(t, h, dh).transpose(1, 0, 2)
            self.k_cache[i][:, :t] = k
            self.v_cache[i][:, :t] = v
            scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh) + bias
            ctx = _np_softmax_rows(scores) @ v
            x = x + ctx.transpose(1, 0, 2).reshape(t, cfg.d_model) @ w[f"layer{i}.attn.wo"]
            pre2 = _np_layer_norm(x, w[f"layer{i}.ln2.gain"], w[f"layer{i}.ln2.bias"])
            x = x + _np_gelu(pre2 @ w[f"layer{i}.ffn.w1"]) @ w[f"layer{i}.ffn.w2"]
        self.pos = t
        final = _np_layer_norm(x[-1], w["final_ln.gain"], w["final_ln.bias"])
        return final @ w["out_proj"]

    def step(self, token: int) -> np.ndarray:
        """Feed one token at the current position; returns next-token logits."""
        cfg, w = self.cfg, self.w
        h, dh = cfg.n_heads, cfg.head_dim
        pos = self.pos
        x = w["tok_emb"][token] + w["pos_emb"][pos]
        for i in range(cfg.n_layers):
            if i in self.skip:
                continue
            pre = _np_layer_norm(x, w[f"layer{i}.ln1.gain"], w[f"layer{i}.ln1.bias"])
            q = (pre @ w[f"layer{i}.attn.wq"]).reshape(h, dh)
            self.k_cache[i][:, pos] = (pre @ w[f"layer{i}.attn.wk"]).reshape(h, dh)
            self.v_cache[i][:, pos] = (pre @ w[f"layer{i}.attn.wv"]).reshape(h, dh)
            keys = self.k_cache[i][:, : pos + 1]
            vals = self.v_cache[i][:, : pos + 1]
            scores = np.einsum("hd,htd->ht", q, keys) / np.sqrt(dh)
            probs = _np_softmax_rows(scores)
            ctx = np.einsum("ht,htd->hd", probs, vals)
            x = x + ctx.reshape(cfg.d_model) @ w[f"layer{i}.attn.wo"]
            pre2 = _np_layer_norm(x, w[f"layer{i}.ln2.gain"], w[f"layer{i}.ln2.bias"])
            x = x + _np_gelu(pre2 @ w[f"layer{i}.ffn.w1"]) @ w[f"layer{i}.ffn.w2"]
        self.pos = pos + 1
        final = _np_layer_norm(x, w["final_ln.gain"], w["final_ln.bias"])
        return final @ w["out_proj"]


def generate_greedy(params: ModelParams, prompt, stop_token: int, max_new: int, skip=()) -> list[int]:
    """Deterministic argmax decoding; stops at stop_token (excluded) or max_new."""
    cfg = params.config
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError("generate_greedy requires a nonempty 1-d prompt")
    if prompt.size + max_new > cfg.max_seq_len:
        raise ValueError(
            f"prompt length {prompt.size} + max_new {max_new} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if prompt.min() < 0 or prompt.max() >= cfg.vocab_size:
        raise ValueError(f"prompt token id out of range [0, {cfg.vocab_size})")
    skip = _check_skip(cfg, skip)
    if max_new <= 0:
        return []

    state = _DecodeState(params, skip, capacity=prompt.size + max_new)
    logits = state.prefill(prompt)
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(np.argmax(logits))
        if nxt == stop_token:
            break
        out.append(nxt)
        if len(out) == max_new:
            break
        logits = state.step(nxt)
    return out


def fingerprint(params: ModelParams) -> str:
    """Content hash of config plus every tensor, for provenance records."""
    digest = hashlib.sha256()
    digest.update(json.dumps(asdict(params.config), sort_keys=True).encode())
    for name in param_shapes(params.config):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params.tensors[name]).tobytes())
    return digest.hexdigest()


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the binary checkpoint container (header + raw float64 payload)."""
    names = list(param_shapes(params.config))
    index = []
    offset = 0
    for name in names:
        arr = params.tensors[name]
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode())
    cfg = ModelConfig(**header["config"])
    payload = data[16 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    expected = set(param_shapes(cfg))
    if set(tensors) != expected:
        raise ValueError(f"{path}: tensor index does not match config architecture")
    return ModelParams(cfg, tensors)
