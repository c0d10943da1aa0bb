"""Tensors with recorded forward ops and reverse-mode differentiation.

Training runs in float32; tests build float64 graphs for finite-difference
oracles. Operands of one op must share dtype, and there is no broadcasting
beyond the bias form of `add`, so shape bugs surface as errors.
"""

from __future__ import annotations

import numpy as np

_ALLOWED = (np.float32, np.float64)


class Tensor:
    """N-d array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if data.dtype not in _ALLOWED:
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A view of the same values that gradients do not flow into."""
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray, own: bool = False):
        # `own=True` promises g is freshly computed and aliased nowhere else,
        # so it can be adopted without a defensive copy.
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _check_dtypes(op: str, *tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def backward(loss: Tensor):
    """Populate .grad on every requires-grad tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass first")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
            node.grad = None  # interior buffers are dead once consumed; leaves keep theirs
    loss._done = True


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dimensions, when present, must match exactly."""
    _check_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >= 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward_fn(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2), own=True)
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g, own=True)

    return _result(a.data @ b.data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may alternatively be a bias of shape (a.shape[-1],)."""
    _check_dtypes("add", a, b)
    bias = a.shape != b.shape
    if bias and b.shape != a.shape[-1:]:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} (bias must match last dim)")

    def backward_fn(g):
        b._accumulate(g.reshape(-1, b.data.shape[0]).sum(axis=0) if bias else g, own=bias)
        a._accumulate(g, own=True)  # adopted last; the bias read above sees it unmutated

    return _result(a.data + b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        a._accumulate(g * np.asarray(c, dtype=a.data.dtype), own=True)

    return _result(a.data * np.asarray(c, dtype=a.data.dtype), (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward_fn(g):
        a._accumulate(g * (a.data > 0), own=True)

    return _result(out, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        a._accumulate(g * out * (1.0 - out), own=True)

    return _result(out, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        tmp = g * out
        inner = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=tmp)
        tmp *= out
        a._accumulate(tmp, own=True)

    return _result(out, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine pair."""
    _check_dtypes("layer_norm", x, gain, bias)
    feat = x.shape[-1]
    if gain.shape != (feat,) or bias.shape != (feat,):
        raise ValueError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} must be ({feat},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backward_fn(g):
        lead = (-1,) if g.ndim == 1 else tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=lead) if g.ndim > 1 else g * xhat)
        bias._accumulate(g.sum(axis=lead) if g.ndim > 1 else g)
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (gx - m1 - xhat * m2), own=True)

    return _result(out, (x, gain, bias), backward_fn)


def max_pool(a: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; gradient routes to the first maximal element."""
    if a.data.shape[axis] == 0:
        raise ValueError("max_pool: empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        a._accumulate(full, own=True)

    return _result(out, (a,), backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries (scalar)."""
    _check_dtypes("mse", a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def backward_fn(g):
        coeff = g * np.asarray(2.0 / diff.size, dtype=a.data.dtype)
        a._accumulate(coeff * diff, own=True)
        b._accumulate(-coeff * diff, own=True)

    return _result(out, (a, b), backward_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    _check_dtypes("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        # Split views are disjoint regions of g, so each may be adopted.
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece, own=True)

    return _result(out, tensors, backward_fn)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing with ints/slices; gradient scatters back into place."""
    if not isinstance(key, tuple):
        key = (key,)
    out = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full, own=True)

    return _result(out, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward_fn(g):
        a._accumulate(g.reshape(a.data.shape), own=True)

    return _result(out, (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        a._accumulate(g.transpose(inverse), own=True)

    return _result(a.data.transpose(axes), (a,), backward_fn)
