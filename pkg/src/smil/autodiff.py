"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built per forward pass and consumed exactly once by backward().
Broadcasting is restricted to scalar-vs-tensor; everything else must match
shapes exactly (dedicated ops like bias_add cover the remaining cases).
"""

from __future__ import annotations

import numpy as np

from smil import _kernels as kernels


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for an op kind."""

    def __init__(self, kind, *shapes):
        super().__init__(f"{kind}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.kind = kind
        self.shapes = shapes


class GraphError(RuntimeError):
    """Backward called on a non-scalar loss or on an already-consumed graph."""


class Tensor:
    """n-d float64 array, optionally linked into an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, no graph link; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate .grad of every reachable requires_grad tensor.

        The loss must be scalar-shaped and each graph is consumable once.
        """
        if self.data.shape != ():
            raise GraphError(f"backward: loss must be scalar, got shape {self.data.shape}")

        order = _toposort(self)
        for node in order:
            if node._parents:  # leaves (parameters) are shared across graphs
                if node._consumed:
                    raise GraphError("backward: graph already consumed")
                node._consumed = True
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and (p.requires_grad or p._parents):
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accum(t, g, owned=False):
    """Add g into t.grad.

    owned=True transfers the buffer without copying; the caller guarantees
    g is not handed to any other accumulation target (a fresh array, or the
    spent gradient of the node being processed given to at most one parent).
    """
    if not t.requires_grad and not t._parents:
        return
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*ts):
    return any(t.requires_grad or t._parents for t in ts)


def _binary_shapes(kind, a, b):
    # exact match, or one side scalar
    if a.data.shape == b.data.shape or a.data.shape == () or b.data.shape == ():
        return
    raise ShapeMismatch(kind, a.data.shape, b.data.shape)


def _reduce_to(shape, g):
    # collapse a broadcasted gradient back onto a scalar operand
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data, requires_grad=_needs_graph(a, b), _parents=(a, b), _op="add")

    def backward(g):
        ga = _reduce_to(a.data.shape, g)
        gb = _reduce_to(b.data.shape, g)
        _accum(a, ga, owned=True)
        _accum(b, gb, owned=gb is not ga)

    out._backward = backward if out.requires_grad else None
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data, requires_grad=_needs_graph(a, b), _parents=(a, b), _op="sub")

    def backward(g):
        _accum(a, _reduce_to(a.data.shape, g), owned=True)
        _accum(b, _reduce_to(b.data.shape, -g), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data, requires_grad=_needs_graph(a, b), _parents=(a, b), _op="mul")

    def backward(g):
        _accum(a, _reduce_to(a.data.shape, g * b.data), owned=True)
        _accum(b, _reduce_to(b.data.shape, g * a.data), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data, requires_grad=_needs_graph(a, b), _parents=(a, b), _op="matmul")

    def backward(g):
        _accum(a, g @ b.data.T, owned=True)
        _accum(b, a.data.T @ g, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def bias_add(x, b):
    """Row-broadcast add of a bias vector onto a (N, M) matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeMismatch("bias_add", x.data.shape, b.data.shape)
    out = Tensor(x.data + b.data, requires_grad=_needs_graph(x, b), _parents=(x, b), _op="bias_add")

    def backward(g):
        _accum(x, g, owned=True)
        _accum(b, g.sum(axis=0), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def relu(x):
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_needs_graph(x), _parents=(x,), _op="relu")

    def backward(g):
        _accum(x, g * (x.data > 0.0), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def softplus(x):
    x = as_tensor(x)
    out = Tensor(np.logaddexp(0.0, x.data), requires_grad=_needs_graph(x), _parents=(x,), _op="softplus")

    def backward(g):
        _accum(x, g * _sigmoid(x.data), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(s, requires_grad=_needs_graph(x), _parents=(x,), _op="sigmoid")

    def backward(g):
        _accum(x, g * s * (1.0 - s), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def _sigmoid(z):
    # tanh form avoids overflow on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log(x):
    x = as_tensor(x)
    out = Tensor(np.log(x.data), requires_grad=_needs_graph(x), _parents=(x,), _op="log")

    def backward(g):
        _accum(x, g / x.data, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=_needs_graph(x), _parents=(x,), _op="reshape")

    def backward(g):
        _accum(x, g.reshape(x.data.shape), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        if len(t.data.shape) != len(ref) or any(
            i != axis and t.data.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch("concat", *[t.data.shape for t in tensors])
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=_needs_graph(*tensors),
        _parents=tuple(tensors),
        _op="concat",
    )
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(idx)], owned=True)
            offset += n

    out._backward = backward if out.requires_grad else None
    return out


def split(x, sizes, axis=1):
    """Inverse of concat: returns one tensor per requested size."""
    x = as_tensor(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeMismatch("split", x.data.shape, tuple(sizes))
    outs = []
    offset = 0
    for n in sizes:
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(offset, offset + n)
        idx = tuple(idx)
        piece = Tensor(x.data[idx].copy(), requires_grad=_needs_graph(x), _parents=(x,), _op="split")

        def backward(g, idx=idx):
            buf = np.zeros_like(x.data)
            buf[idx] = g
            _accum(x, buf, owned=True)

        piece._backward = backward if piece.requires_grad else None
        outs.append(piece)
        offset += n
    return tuple(outs)


def conv2d(x, w):
    """Valid-padding 2-D convolution: (N,C,H,W) * (F,C,kh,kw) -> (N,F,H',W')."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    n, c, h, wd = x.data.shape
    f, _, kh, kw = w.data.shape
    if kh > h or kw > wd:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    oh, ow = h - kh + 1, wd - kw + 1

    cols = kernels.im2col(x.data, kh, kw)  # (N*oh*ow, C*kh*kw)
    w2 = w.data.reshape(f, c * kh * kw)
    y = kernels.rows_to_nfhw(cols @ w2.T, n, f, oh, ow)
    out = Tensor(y, requires_grad=_needs_graph(x, w), _parents=(x, w), _op="conv2d")

    def backward(g):
        g2 = kernels.nfhw_to_rows(g)
        if w.requires_grad or w._parents:
            _accum(w, (g2.T @ cols).reshape(f, c, kh, kw), owned=True)
        if x.requires_grad or x._parents:
            dx = np.zeros_like(x.data)
            kernels.col2im_add(g2 @ w2, kh, kw, dx)
            _accum(x, dx, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def conv_bias_add(x, b):
    """Per-channel bias for conv activations: (N,F,H,W) + (F,)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ShapeMismatch("conv_bias_add", x.data.shape, b.data.shape)
    out = Tensor(
        x.data + b.data[None, :, None, None],
        requires_grad=_needs_graph(x, b),
        _parents=(x, b),
        _op="conv_bias_add",
    )

    def backward(g):
        _accum(x, g, owned=True)
        _accum(b, g.sum(axis=(0, 2, 3)), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def maxpool2(x):
    """2x2 max-pool, stride 2; ties route backward to the lowest flat index."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ShapeMismatch("maxpool2", x.data.shape)
    y, idx = kernels.pool2_fwd(x.data)
    out = Tensor(y, requires_grad=_needs_graph(x), _parents=(x,), _op="maxpool2")

    def backward(g):
        dx = np.zeros_like(x.data)
        kernels.pool2_bwd(g, idx, dx)
        _accum(x, dx, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def softmax_cross_entropy(logits, labels):
    """Per-sample cross-entropy of softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeMismatch("softmax_cross_entropy", logits.data.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(len(labels)), labels]
    out = Tensor(losses, requires_grad=_needs_graph(logits), _parents=(logits,), _op="softmax_cross_entropy")
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def backward(g):
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        d *= g[:, None]
        _accum(logits, d, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid_bce(logits, targets, pos_weight=1.0):
    """Per-sample multi-label binary cross-entropy, summed over classes.

    pos_weight scales the positive-label term.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.shape != targets.shape:
        raise ShapeMismatch("sigmoid_bce", logits.data.shape, targets.shape)
    x = logits.data
    cell = pos_weight * targets * np.logaddexp(0.0, -x) + (1.0 - targets) * np.logaddexp(0.0, x)
    out = Tensor(cell.sum(axis=1), requires_grad=_needs_graph(logits), _parents=(logits,), _op="sigmoid_bce")

    def backward(g):
        s = _sigmoid(x)
        d = -pos_weight * targets * (1.0 - s) + (1.0 - targets) * s
        d *= g[:, None]
        _accum(logits, d, owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def mean_all(x):
    """Mean over all elements -> scalar tensor."""
    x = as_tensor(x)
    out = Tensor(x.data.mean(), requires_grad=_needs_graph(x), _parents=(x,), _op="mean")

    def backward(g):
        _accum(x, np.full_like(x.data, g / x.data.size), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def sum_all(x):
    x = as_tensor(x)
    out = Tensor(x.data.sum(), requires_grad=_needs_graph(x), _parents=(x,), _op="sum")

    def backward(g):
        _accum(x, np.full_like(x.data, g), owned=True)

    out._backward = backward if out.requires_grad else None
    return out


def grad_check(fn, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn must map a single Tensor to a scalar Tensor, deterministically.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"grad_check: step must be in (0, 1e-2], got {step}")
    x0 = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    probe = Tensor(x0.copy(), requires_grad=True)
    loss = fn(probe)
    if loss.data.shape != ():
        raise GraphError(f"grad_check: function must return a scalar, got shape {loss.data.shape}")
    loss.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = fn(Tensor(plus.reshape(x0.shape))).item()
        f_minus = fn(Tensor(minus.reshape(x0.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
