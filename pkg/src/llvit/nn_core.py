"""Dense-tensor engine: functional kernels with explicit backward, layers, optimizers.

Tensors are plain C-contiguous numpy arrays (row-major). Training runs in
float32; the integer path uses int8 operands with int32 accumulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid configuration. ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class TrainingError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# functional kernels
# --------------------------------------------------------------------------

_INT_EXACT_LIMIT = 2**52


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a[M,K]`` and ``b[K,P]``.

    float32 operands accumulate in float32. int8 operands produce an int32
    result; the sum is formed in float64, which is exact here because every
    partial sum is an integer far below 2**53.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype == np.int8 and b.dtype == np.int8:
        return int_matmul(a, b)
    if a.dtype != np.float32 or b.dtype != np.float32:
        raise TypeError(f"unsupported dtypes {a.dtype} x {b.dtype}")
    return a @ b


def int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer GEMM with int32 output; operands may be any integer dtype."""
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    bound = int(np.abs(a).max(initial=0)) * int(np.abs(b).max(initial=0)) * a.shape[-1]
    if bound >= _INT_EXACT_LIMIT:
        raise OverflowError("integer GEMM exceeds the exact accumulation range")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    if bound >= 2**31:
        if np.abs(out).max(initial=0) >= 2**31:
            raise OverflowError("int32 accumulator overflow")
    return out.astype(np.int32)


def layernorm_forward(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis using the population variance.

    Returns ``(y, cache)``; the cache feeds :func:`layernorm_backward`.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layernorm_backward(grad, cache):
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    red = tuple(range(grad.ndim - 1))
    dgamma = (grad * xhat).sum(axis=red)
    dbeta = grad.sum(axis=red)
    g = grad * gamma
    dx = rstd / d * (d * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t)


def gelu_backward(grad, x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad, p):
    return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def mha_forward(z, wq, wk, wv, wo, heads, bq=None, bk=None, bv=None, bo=None):
    """Multi-head self-attention over ``z[..., N, D]``.

    Weights are ``[D, D]`` and act on the right (``z @ W``). Returns the
    output and a cache for :func:`mha_backward`.
    """
    d = z.shape[-1]
    if d % heads:
        raise ConfigError(f"D={d} is not divisible by heads={heads}", "heads")
    dh = d // heads
    lead = z.shape[:-2]
    n = z.shape[-2]

    def split(t):
        return np.swapaxes(t.reshape(*lead, n, heads, dh), -2, -3)

    def proj(w, b):
        y = z @ w
        return y if b is None else y + b

    q, k, v = split(proj(wq, bq)), split(proj(wk, bk)), split(proj(wv, bv))
    scale = 1.0 / math.sqrt(dh)
    p = softmax_rows((q @ np.swapaxes(k, -1, -2)) * scale)
    o = p @ v
    merged = np.swapaxes(o, -2, -3).reshape(*lead, n, d)
    out = merged @ wo
    if bo is not None:
        out = out + bo
    cache = (z, q, k, v, p, merged, scale, heads, (wq, wk, wv, wo))
    return out, cache


def mha_backward(grad, cache):
    """Gradients of :func:`mha_forward`: returns ``(dz, {name: grad})``.

    The dict holds ``wq, wk, wv, wo, bq, bk, bv, bo``.
    """
    z, q, k, v, p, merged, scale, heads, (wq, wk, wv, wo) = cache
    d = z.shape[-1]
    dh = d // heads
    lead = z.shape[:-2]
    n = z.shape[-2]
    z2 = z.reshape(-1, d)
    g2 = grad.reshape(-1, d)
    grads = {"wo": merged.reshape(-1, d).T @ g2, "bo": g2.sum(0)}
    dmerged = grad @ wo.T
    do = np.swapaxes(dmerged.reshape(*lead, n, heads, dh), -2, -3)
    dp = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ do
    ds = softmax_backward(dp, p) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q

    def merge(t):
        return np.swapaxes(t, -2, -3).reshape(*lead, n, d)

    dz = 0
    for name, dt, w in (("q", dq, wq), ("k", dk, wk), ("v", dv, wv)):
        dt = merge(dt)
        dt2 = dt.reshape(-1, d)
        grads["w" + name] = z2.T @ dt2
        grads["b" + name] = dt2.sum(0)
        dz = dz + dt @ w.T
    return dz, grads


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient wrt ``logits[B, C]``."""
    p = softmax_rows(logits.astype(np.float64))
    b = logits.shape[0]
    loss = -np.log(np.maximum(p[np.arange(b), labels], 1e-300)).mean()
    g = p
    g[np.arange(b), labels] -= 1.0
    return float(loss), (g / b).astype(logits.dtype)


# --------------------------------------------------------------------------
# parameters and layers
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    decay: bool = True
    lr_mult: float = 1.0
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32)


class Linear:
    def __init__(self, d_in, d_out, name, rng, bias=True, std=0.02):
        self.weight = Parameter(f"{name}.weight", trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, np.float32), decay=False) if bias else None
        self._x = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        self._x = x
        y = x @ self.weight.value
        return y + self.bias.value if self.bias is not None else y

    def backward(self, grad):
        if self._x is None:
            raise UsageError(f"{self.weight.name}: backward before forward")
        d_in, d_out = self.weight.value.shape
        x2 = self._x.reshape(-1, d_in)
        g2 = grad.reshape(-1, d_out)
        self.weight.grad += x2.T @ g2
        if self.bias is not None:
            self.bias.grad += g2.sum(0)
        self._x = None
        return grad @ self.weight.value.T


class LayerNorm:
    def __init__(self, d, name, eps=1e-6):
        self.gamma = Parameter(f"{name}.gamma", np.ones(d, np.float32), decay=False)
        self.beta = Parameter(f"{name}.beta", np.zeros(d, np.float32), decay=False)
        self.eps = eps
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        y, self._cache = layernorm_forward(x, self.gamma.value, self.beta.value, self.eps)
        return y.astype(x.dtype, copy=False)

    def backward(self, grad):
        if self._cache is None:
            raise UsageError(f"{self.gamma.name}: backward before forward")
        dx, dg, db = layernorm_backward(grad, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        self._cache = None
        return dx.astype(grad.dtype, copy=False)


class GELU:
    def __init__(self):
        self._x = None

    def parameters(self):
        return []

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, grad):
        if self._x is None:
            raise UsageError("gelu: backward before forward")
        g = gelu_backward(grad, self._x)
        self._x = None
        return g


class MultiHeadAttention:
    def __init__(self, d, heads, name, rng):
        if d % heads:
            raise ConfigError(f"D={d} is not divisible by heads={heads}", "model.heads")
        self.heads = heads
        self.params = {}
        for w in ("q", "k", "v", "o"):
            self.params["w" + w] = Parameter(f"{name}.w{w}", trunc_normal(rng, (d, d)))
            self.params["b" + w] = Parameter(f"{name}.b{w}", np.zeros(d, np.float32), decay=False)
        self._cache = None

    def parameters(self):
        return list(self.params.values())

    def forward(self, z):
        v = {k: p.value for k, p in self.params.items()}
        out, self._cache = mha_forward(z, v["wq"], v["wk"], v["wv"], v["wo"], self.heads,
                                       v["bq"], v["bk"], v["bv"], v["bo"])
        return out

    def backward(self, grad):
        if self._cache is None:
            raise UsageError("attention: backward before forward")
        dz, grads = mha_backward(grad, self._cache)
        for k, g in grads.items():
            self.params[k].grad += g
        self._cache = None
        return dz


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


def cosine_lr(base_lr, step, total_steps, warmup_steps=0, min_lr=0.0):
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    t = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


class Optimizer:
    """SGD with momentum or AdamW with decoupled weight decay.

    Weight decay applies only to parameters with ``decay=True``; LUT latent
    tables and encoded values are created with ``decay=False``.
    """

    def __init__(self, kind="adamw", lr=5e-4, betas=(0.9, 0.999), momentum=0.9,
                 weight_decay=0.05, eps=1e-8):
        if kind not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {kind!r}", "optim.kind")
        self.kind = kind
        self.lr = lr
        self.betas = tuple(betas)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params, lr=None):
        lr = self.lr if lr is None else lr
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {p.name}")
        self.step_count += 1
        t = self.step_count
        for p in params:
            plr = lr * p.lr_mult
            if p.decay and self.weight_decay:
                p.value *= np.float32(1.0 - plr * self.weight_decay)
            st = self.state.setdefault(p.name, {})
            if self.kind == "sgd":
                if self.momentum:
                    buf = st.setdefault("momentum", np.zeros_like(p.value))
                    buf *= self.momentum
                    buf += p.grad
                    upd = buf
                else:
                    upd = p.grad
                p.value -= np.float32(plr) * upd
            else:
                b1, b2 = self.betas
                m = st.setdefault("m", np.zeros_like(p.value))
                v = st.setdefault("v", np.zeros_like(p.value))
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                mhat = m / (1 - b1**t)
                vhat = v / (1 - b2**t)
                p.value -= (plr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for pname, st in self.state.items():
            for k, a in st.items():
                out[f"{pname}::{k}"] = a
        return out

    def load_state_arrays(self, arrays, step_count):
        self.state = {}
        for key, a in arrays.items():
            pname, k = key.rsplit("::", 1)
            self.state.setdefault(pname, {})[k] = np.array(a, copy=True)
        self.step_count = step_count
