"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each operation records its input tensors and a backward
closure, and ``backward`` walks the graph in reverse topological order,
accumulating gradients additively over fan-out. Only the operations the
mixture-of-adapters model and its losses need are implemented; everything
is 64-bit.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    """A dense array node in a define-by-run differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is out of scope; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), _bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), _bw)


def matmul(a, b):
    """Strict 2-D matrix product with the standard transpose backward rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(data, (a, b), _bw)


def linear(x, w, b=None):
    """y = x @ w.T (+ b) with x shaped [..., n_in] and w shaped [n_out, n_in]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape} vs w {w.shape}")
    data = x.data @ w.data.T
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        if x.requires_grad:
            x._accum(g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, w.shape[0])
            x2 = x.data.reshape(-1, w.shape[1])
            w._accum(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, parents, _bw)


def bmm(a, b):
    """Batched matmul over a shared leading batch dimension."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accum(a.data.transpose(0, 2, 1) @ g)

    return _make(data, (a, b), _bw)


def transpose_last2(x):
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 needs ndim >= 2, got {x.shape}")
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)

    def _bw(g):
        if x.requires_grad:
            x._accum(g.transpose(axes))

    return _make(x.data.transpose(axes), (x,), _bw)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape

    def _bw(g):
        if x.requires_grad:
            x._accum(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), _bw)


def softmax(v):
    """Numerically stable softmax over the last axis."""
    v = _as_tensor(v)
    if not np.all(np.isfinite(v.data)):
        raise ContractError("softmax input must be finite")
    z = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        if v.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            v._accum(p * (g - inner))

    return _make(p, (v,), _bw)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def _bw(g):
        if x.requires_grad:
            x._accum(g * mask)

    return _make(x.data * mask, (x,), _bw)


def layer_norm(v, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    v, gain, bias = _as_tensor(v), _as_tensor(gain), _as_tensor(bias)
    d = v.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs last dim >= 2, got {v.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    mu = v.data.mean(axis=-1, keepdims=True)
    var = v.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v.data - mu) * inv
    data = gain.data * xhat + bias.data

    def _bw(g):
        if gain.requires_grad:
            gg = g * xhat
            gain._accum(_unbroadcast(gg, gain.data.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if v.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            v._accum(inv * (dxhat - m1 - xhat * m2))

    return _make(data, (v, gain, bias), _bw)


def _log_softmax_data(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """Negative log-softmax of one class index, fused in log space."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    c = logits.shape[0]
    label = int(label)
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    ls = _log_softmax_data(logits.data)
    data = -ls[label]

    def _bw(g):
        if logits.requires_grad:
            p = np.exp(ls)
            p[label] -= 1.0
            logits._accum(g * p)

    return _make(data, (logits,), _bw)


def cross_entropy_batch(logits, labels):
    """Per-example cross-entropy for logits [N, C] and integer labels [N]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_batch shapes: {logits.shape} vs {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    ls = _log_softmax_data(logits.data)
    rows = np.arange(labels.shape[0])
    data = -ls[rows, labels]

    def _bw(g):
        if logits.requires_grad:
            p = np.exp(ls)
            p[rows, labels] -= 1.0
            logits._accum(g[:, None] * p)

    return _make(data, (logits,), _bw)


def tsum(x, axis=None):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis)

    def _bw(g):
        if x.requires_grad:
            if axis is None:
                x._accum(np.broadcast_to(g, x.data.shape))
            else:
                x._accum(np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(data, (x,), _bw)


def tmean(x, axis=None):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def col(x, j):
    """Column j of a 2-D tensor as a 1-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"col expects a 2-D tensor, got {x.shape}")

    def _bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, j] = g
            x._accum(full)

    return _make(x.data[:, j].copy(), (x,), _bw)


def select_axis1(x, i):
    """x[:, i, :] of a 3-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"select_axis1 expects a 3-D tensor, got {x.shape}")

    def _bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, i, :] = g
            x._accum(full)

    return _make(x.data[:, i, :].copy(), (x,), _bw)


def embedding(table, idx):
    """Row lookup table[idx] with scatter-add backward into the table."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"token index out of range for table of size {table.shape[0]}")
    data = table.data[idx]

    def _bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accum(acc)

    return _make(data, (table,), _bw)


def backward(root):
    """Reverse-mode sweep from a scalar root; accumulates into leaf ``.grad``s."""
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ContractError("backward requires a scalar tensor root")
    if not root.requires_grad:
        return
    topo = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) in seen or not p.requires_grad:
                continue
            seen.add(id(p))
            stack.append((p, iter(p._parents)))
            advanced = True
            break
        if not advanced:
            topo.append(node)
            stack.pop()
    root._accum(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic gradients and central differences.

    ``f`` maps the parameter list to a scalar Tensor and must be deterministic;
    two forward evaluations that disagree raise a ContractError.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"step {step} outside [1e-7, 1e-3]")
    v1 = float(f(params).data)
    v2 = float(f(params).data)
    if v1 != v2:
        raise ContractError("f is not deterministic: two evaluations differ")
    zero_grads(params)
    out = f(params)
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(params).data)
            flat[i] = orig - step
            lo = float(f(params).data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        num = num.reshape(p.data.shape)
        rel = np.abs(analytic - num) / (np.abs(analytic) + np.abs(num) + 1e-12)
        if rel.size:
            worst = max(worst, float(rel.max()))
    zero_grads(params)
    return worst


def topk_indices(probs, k):
    """Indices of the k largest entries per row, ties broken by lowest index."""
    probs = np.asarray(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]
