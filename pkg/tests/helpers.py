"""Independent oracles used across the test suite.

These deliberately avoid the library's own computation paths: gradients are
checked by central finite differences, and edit distances by a shortest-path
search over the alignment graph.
"""

from collections import deque

import numpy as np

from layertrim.tensor import TensorNode


def max_grad_error(make_loss, arrays, h=1e-5):
    """Worst relative mismatch between backward() and central differences.

    make_loss takes one TensorNode per input array and returns a scalar node.
    Relative error uses max(1, |analytic|, |numeric|) as the denominator.
    """
    nodes = [TensorNode(a.copy(), requires_grad=True) for a in arrays]
    loss = make_loss(*nodes)
    loss.backward()
    worst = 0.0
    for node in nodes:
        assert node.grad is not None and node.grad.shape == node.values.shape
        vals = node.values
        for idx in np.ndindex(vals.shape):
            orig = vals[idx]
            vals[idx] = orig + h
            fp = float(make_loss(*[TensorNode(n.values) for n in nodes]).values)
            vals[idx] = orig - h
            fm = float(make_loss(*[TensorNode(n.values) for n in nodes]).values)
            vals[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = node.grad[idx]
            denom = max(1.0, abs(numeric), abs(analytic))
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def search_edit_distance(a, b) -> int:
    """Levenshtein distance via 0/1-weighted shortest-path search.

    Explores the alignment graph over (i, j) prefixes with a deque (matches
    cost 0, edits cost 1); structurally unrelated to the DP recurrence in
    layertrim.metrics.
    """
    a, b = list(a), list(b)
    la, lb = len(a), len(b)
    goal = (la, lb)
    dist = {(0, 0): 0}
    dq = deque([(0, 0)])
    while dq:
        i, j = dq.popleft()
        d = dist[(i, j)]
        if (i, j) == goal:
            return d
        if i < la and j < lb and a[i] == b[j]:
            nd = d
            if nd < dist.get((i + 1, j + 1), nd + 1):
                dist[(i + 1, j + 1)] = nd
                dq.appendleft((i + 1, j + 1))
        for ni, nj in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
            if ni <= la and nj <= lb and d + 1 < dist.get((ni, nj), d + 2):
                dist[(ni, nj)] = d + 1
                dq.append((ni, nj))
    return dist[goal]
