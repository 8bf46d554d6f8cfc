"""Conditional summation output layer and post-training quantization of its encoded values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import DimensionError, Parameter, UsageError, trunc_normal


@dataclass
class QuantizedEncoded:
    """Integer encoded values ``wq[D, J]`` with one scale per layer (or per output channel)."""

    wq: np.ndarray
    scale: np.ndarray
    bits: int

    def dequantize(self) -> np.ndarray:
        s = self.scale.reshape(-1, 1) if self.scale.size > 1 else self.scale.reshape(())
        return (self.wq.astype(np.float32) * s).astype(np.float32)


def quantize_encoded(w: np.ndarray, bits: int = 4, per_channel: bool = False) -> QuantizedEncoded:
    """Symmetric PTQ: s = max|W| / qmax, wq = clamp(round_half_even(W / s), -2^(b-1), qmax).

    A zero (row of) W gets s = 1 and wq = 0.
    """
    qmax = 2 ** (bits - 1) - 1
    qmin = -(2 ** (bits - 1))
    if qmax < 1:
        raise ValueError("need at least 2 bits")
    amax = np.abs(w).max(axis=1) if per_channel else np.array([np.abs(w).max()])
    scale = np.where(amax > 0, amax / qmax, 1.0).astype(np.float32)
    s = scale.reshape(-1, 1) if per_channel else scale[0]
    wq = np.clip(np.rint(w / s), qmin, qmax).astype(np.int8)
    return QuantizedEncoded(wq, scale, bits)


def condsum_add_only(w: np.ndarray, bits: np.ndarray, counter=None) -> np.ndarray:
    """y[r, i] = sum of w[i, j] over j with bits[r, j] == 1, using additions only."""
    y = np.zeros((bits.shape[0], w.shape[0]), dtype=w.dtype)
    mask = bits.astype(bool)
    for j in range(w.shape[1]):
        rows = mask[:, j]
        y[rows] += w[:, j]
    if counter is not None:
        counter.add(adds=int(mask.sum()) * w.shape[0])
    return y


class CondSum:
    def __init__(self, d_out, width, name, rng, std=0.02, lr_mult=1.0):
        self.w = Parameter(f"{name}.w", trunc_normal(rng, (d_out, width), std), decay=False,
                           lr_mult=lr_mult)
        self.quantized: QuantizedEncoded | None = None
        self._x = None

    def parameters(self):
        return [self.w]

    def quantize(self, bits=4, per_channel=False):
        self.quantized = quantize_encoded(self.w.value, bits, per_channel)
        return self.quantized

    def effective_weights(self):
        return self.quantized.dequantize() if self.quantized is not None else self.w.value

    def forward(self, bits: np.ndarray, counter=None) -> np.ndarray:
        if bits.shape[1] != self.w.value.shape[1]:
            raise DimensionError(f"cond-sum expects width {self.w.value.shape[1]}, got {bits.shape[1]}")
        if counter is not None:
            if self.quantized is None:
                return condsum_add_only(self.w.value, bits, counter)
            q = self.quantized
            acc = condsum_add_only(q.wq.astype(np.int32), bits, counter)
            counter.add(mults=acc.size)
            s = q.scale.reshape(1, -1) if q.scale.size > 1 else q.scale[0]
            return (acc * s).astype(np.float32)
        x = bits.astype(np.float32)
        self._x = x
        return x @ self.effective_weights().T

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError(f"{self.w.name}: backward before forward")
        self.w.grad += grad.T @ self._x
        self._x = None
        return grad @ self.w.value
