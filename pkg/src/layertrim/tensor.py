"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every value is a numpy float64 array wrapped in a TensorNode. Ops record
their provenance only when some input requires gradients, so inference
paths build no graph. Graphs are rebuilt on every step; there is no
caching across calls.
"""

from __future__ import annotations

import numpy as np

# Additive attention-mask value. Finite on purpose: softmax rejects
# non-finite inputs, and exp(-1e30 - rowmax) underflows to exactly 0.0
# for any realistic rowmax, so masked entries come out exactly zero.
NEG_MASK = -1e30


class TensorNode:
    """N-d float64 array plus gradient buffer and backward provenance."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "TensorNode":
        """Same values, no gradient tracking. Shares the underlying buffer."""
        return TensorNode(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate .grad of every reachable grad-requiring node.

        The root must be scalar. Repeated calls without zeroing accumulate.
        """
        if self.values.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        adjoint = {id(self): np.ones_like(self.values)}
        for node in order:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = np.asarray(pg, dtype=np.float64)

    # Operator sugar. Scalars and ndarrays are promoted to constant nodes.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"TensorNode(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False) -> TensorNode:
    """Wrap values (list / ndarray / scalar) in a TensorNode."""
    return TensorNode(values, requires_grad=requires_grad)


def _as_node(x) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    return TensorNode(x)


def _make(values, parents, backward) -> TensorNode:
    """Build an op result; provenance recorded only if a parent needs grad."""
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if grad_parents:
        return TensorNode(values, requires_grad=True, _parents=grad_parents, _backward=backward)
    return TensorNode(values)


def _topo_order(root: TensorNode):
    """Reverse topological order (consumers first) via iterative DFS."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)
    out = a.values + b.values

    def backward(g):
        return ((a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(g, b.values.shape)))

    return _make(out, (a, b), backward)


def mul(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)
    out = a.values * b.values

    def backward(g):
        return (
            (a, _unbroadcast(g * b.values, a.values.shape)),
            (b, _unbroadcast(g * a.values, b.values.shape)),
        )

    return _make(out, (a, b), backward)


def matmul(a, b) -> TensorNode:
    """Matrix product. 2-d strict, or n-d with identical batch dims."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul inner-dimension mismatch: {av.shape} x {bv.shape}")
    if av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul batch-dimension mismatch: {av.shape} x {bv.shape}")
    out = av @ bv

    def backward(g):
        return (
            (a, g @ bv.swapaxes(-1, -2)),
            (b, av.swapaxes(-1, -2) @ g),
        )

    return _make(out, (a, b), backward)


def linear(x, w) -> TensorNode:
    """x (..., k) @ w (k, n) -> (..., n); folds leading dims into one GEMM."""
    x, w = _as_node(x), _as_node(w)
    if x.values.shape[-1] != w.values.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    if x.ndim == 2:
        return matmul(x, w)
    lead = x.values.shape[:-1]
    flat = reshape(x, (-1, x.values.shape[-1]))
    return reshape(matmul(flat, w), lead + (w.values.shape[1],))


def reshape(x, shape) -> TensorNode:
    x = _as_node(x)
    old = x.values.shape
    out = x.values.reshape(shape)

    def backward(g):
        return ((x, g.reshape(old)),)

    return _make(out, (x,), backward)


def transpose(x, axes) -> TensorNode:
    x = _as_node(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.values.transpose(axes)

    def backward(g):
        return ((x, g.transpose(inverse)),)

    return _make(out, (x,), backward)


def take_rows(x, indices) -> TensorNode:
    """Gather along axis 0: out[i...] = x[indices[i...]]. Backward scatter-adds."""
    x = _as_node(x)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.values.shape[0]):
        raise ValueError(f"take_rows index out of range for first dim {x.values.shape[0]}")
    out = x.values[idx]

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _make(out, (x,), backward)


def reduce_sum(x, axis=None, keepdims=False) -> TensorNode:
    x = _as_node(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.values.shape)),)

    return _make(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False) -> TensorNode:
    x = _as_node(x)
    n = x.values.size if axis is None else x.values.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1) -> TensorNode:
    """Normalized exponentials along axis, computed with max subtraction."""
    x = _as_node(x)
    if not np.isfinite(x.values).all():
        raise FloatingPointError("softmax input contains non-finite values")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((x, p * (g - dot)),)

    return _make(p, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5) -> TensorNode:
    """Per-vector standardization over the last axis, then affine gain/bias."""
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    d = x.values.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = ((x.values - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return ((x, dx), (gain, dgain), (bias, dbias))

    return _make(out, (x, gain, bias), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> TensorNode:
    """Gaussian-error linear unit (tanh form). Smooth, so finite differences behave."""
    x = _as_node(x)
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return ((x, g * dv),)

    return _make(out, (x,), backward)


def cross_entropy(logits, targets, mask) -> TensorNode:
    """Mean negative log-softmax probability of targets over masked positions.

    logits (..., V), targets (...) integer ids, mask (...) booleans selecting
    the positions that contribute. At least one position must be selected.
    """
    logits = _as_node(logits)
    v = logits.values.shape[-1]
    tgt = np.asarray(targets)
    msk = np.asarray(mask, dtype=bool)
    if tgt.shape != logits.values.shape[:-1] or msk.shape != tgt.shape:
        raise ValueError(
            f"cross_entropy shape mismatch: logits {logits.shape}, "
            f"targets {tgt.shape}, mask {msk.shape}"
        )
    if not msk.any():
        raise ValueError("cross_entropy mask selects no positions")
    flat_logits = logits.values.reshape(-1, v)
    flat_tgt = tgt.reshape(-1)
    flat_msk = msk.reshape(-1)
    sel = np.flatnonzero(flat_msk)
    sel_tgt = flat_tgt[sel]
    if sel_tgt.min() < 0 or sel_tgt.max() >= v:
        raise ValueError(f"cross_entropy target id out of range [0, {v})")
    z = flat_logits[sel]
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    n = len(sel)
    out = -logp[np.arange(n), sel_tgt].sum() / n

    def backward(g):
        gl = np.zeros_like(flat_logits)
        probs = e / denom
        probs[np.arange(n), sel_tgt] -= 1.0
        gl[sel] = probs * (float(g) / n)
        return ((logits, gl.reshape(logits.values.shape)),)

    return _make(out, (logits,), backward)


def skew_kl(p, q, lam) -> "TensorNode | float":
    """KL(p || lam*p + (1-lam)*q) between probability vectors.

    p is treated as a constant; q may be a TensorNode carrying gradients
    (rows of student softmax output) or a plain array, in which case a float
    is returned. Accepts a single distribution (V,) or a batch (N, V); for a
    batch the result is the mean over rows. The lam*p share keeps the mixture
    positive wherever p is, so the value stays finite even when q has zeros.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"skew_kl lambda must be in (0, 1], got {lam}")
    pv = p.values if isinstance(p, TensorNode) else np.asarray(p, dtype=np.float64)
    q_node = q if isinstance(q, TensorNode) else None
    qv = q.values if isinstance(q, TensorNode) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValueError(f"skew_kl shape mismatch: {pv.shape} vs {qv.shape}")
    squeeze = pv.ndim == 1
    P = pv.reshape(1, -1) if squeeze else pv
    Q = qv.reshape(1, -1) if squeeze else qv
    for name, dist in (("p", P), ("q", Q)):
        if not np.isfinite(dist).all() or (dist < -1e-12).any():
            raise FloatingPointError(f"skew_kl: {name} is not a valid distribution")
        if np.abs(dist.sum(axis=-1) - 1.0).max() > 1e-8:
            raise FloatingPointError(f"skew_kl: {name} rows do not sum to 1")
    n_rows = P.shape[0]
    if lam == 1.0:
        # Mixture degenerates to p itself; exactly zero with no q dependence.
        if q_node is None or not q_node.requires_grad:
            return 0.0
        return _make(np.float64(0.0), (q_node,), lambda g: ((q_node, np.zeros_like(qv)),))
    # q + lam*(p - q) rather than lam*p + (1-lam)*q: bitwise-equal p and q
    # then yield m == p exactly, so the divergence is exactly zero.
    m = Q + lam * (P - Q)
    support = P > 0.0
    ratio = np.ones_like(P)
    np.divide(P, m, out=ratio, where=support)
    terms = np.where(support, P * np.log(ratio), 0.0)
    value = terms.sum() / n_rows

    if q_node is None or not q_node.requires_grad:
        return float(value)

    def backward(g):
        gq = np.zeros_like(Q)
        np.divide(P, m, out=gq, where=support)
        gq *= -(1.0 - lam) * float(g) / n_rows
        return ((q_node, gq.reshape(qv.shape)),)

    return _make(np.float64(value), (q_node,), backward)
