"""Linear maps, parameter initialization, and multi-head cross-attention."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, matmul, reshape, scale, softmax, transpose


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32):
    """Weight uniform in +-sqrt(1/fan_in), bias zero."""
    bound = (1.0 / fan_in) ** 0.5
    w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    return w, b


def init_layer_norm(features: int, dtype=np.float32):
    gain = Tensor(np.ones(features, dtype=dtype), requires_grad=True)
    bias = Tensor(np.zeros(features, dtype=dtype), requires_grad=True)
    return gain, bias


def init_attention(rng: np.random.Generator, dim: int, dtype=np.float32) -> dict:
    params = {}
    for name in ("wq", "wk", "wv", "wo"):
        w, b = init_linear(rng, dim, dim, dtype)
        params[name] = w
        params["b" + name[1]] = b
    return params


def subparams(params: dict, prefix: str) -> dict:
    """View of a flat parameter dict restricted to one `prefix.` namespace."""
    plen = len(prefix)
    sub = {k[plen:]: v for k, v in params.items() if k.startswith(prefix)}
    if not sub:
        raise KeyError(f"no parameters under prefix {prefix!r}")
    return sub


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: y = x @ w + b."""
    if x.data.ndim == 2:
        return add(matmul(x, w), b)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    return reshape(add(matmul(flat, w), b), lead + (w.shape[1],))


def multi_head_cross_attention(queries: Tensor, keys_values: Tensor, heads: int, params: dict) -> Tensor:
    """Scaled dot-product attention of query tokens over a key/value token set.

    Accepts (N,d) or batched (B,N,d) token stacks; output token count equals the
    query token count. `params` holds wq/wk/wv/wo with matching biases.
    """
    squeeze = queries.data.ndim == 2
    q3 = reshape(queries, (1,) + queries.shape) if squeeze else queries
    kv3 = reshape(keys_values, (1,) + keys_values.shape) if keys_values.data.ndim == 2 else keys_values
    if q3.data.ndim != 3 or kv3.data.ndim != 3:
        raise ValueError(f"attention expects 2-d or 3-d token stacks, got {queries.shape}, {keys_values.shape}")
    b, n, d = q3.shape
    m = kv3.shape[1]
    if kv3.shape[0] != b or kv3.shape[2] != d:
        raise ValueError(f"attention: query {q3.shape} and key/value {kv3.shape} disagree")
    if d % heads != 0:
        raise ValueError(f"attention: model dim {d} not divisible by {heads} heads")
    dh = d // heads

    q = linear(q3, params["wq"], params["bq"])
    k = linear(kv3, params["wk"], params["bk"])
    v = linear(kv3, params["wv"], params["bv"])
    # Scaling the (small) query block instead of the (N,M) logits keeps one
    # fewer full attention matrix alive in the recorded graph.
    qh = scale(transpose(reshape(q, (b, n, heads, dh)), (0, 2, 1, 3)), 1.0 / np.sqrt(dh))
    kh = transpose(reshape(k, (b, m, heads, dh)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (b, m, heads, dh)), (0, 2, 1, 3))
    attn = softmax(matmul(qh, kh), axis=-1)
    ctx = reshape(transpose(matmul(attn, vh), (0, 2, 1, 3)), (b, n, d))
    out = linear(ctx, params["wo"], params["bo"])
    return reshape(out, (n, d)) if squeeze else out
