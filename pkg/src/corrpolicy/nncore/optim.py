"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: dict,
    *,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """One in-place update of a single parameter array; state holds m, v, t."""
    if param.shape != grad.shape:
        raise ValueError(f"adamw_step: grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("adamw_step: non-finite gradient")
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """Optimizer over a named parameter dict; iteration order is sorted for determinism."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params.items()
        }

    def step(self):
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            adamw_step(
                p.data,
                p.grad,
                self.state[name],
                lr=self.lr,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
                weight_decay=self.weight_decay,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        """Flatten moment estimates for checkpointing; step counts ride along as 0-d arrays."""
        out = {}
        for name, st in self.state.items():
            out[f"{name}#m"] = st["m"]
            out[f"{name}#v"] = st["v"]
            out[f"{name}#t"] = np.asarray(float(st["t"]), dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict):
        for name, st in self.state.items():
            st["m"][...] = arrays[f"{name}#m"]
            st["v"][...] = arrays[f"{name}#v"]
            st["t"] = int(arrays[f"{name}#t"])
