"""Layers of trainable n-input LUT neurons.

Forward is a strict binary table lookup. Backward follows the extended
finite-difference scheme: a straight-through estimator into the latent
table entries that were addressed, and for each input bit the mean
difference of latent values across that bit over all settings of the
remaining bits.
"""

from __future__ import annotations

import numpy as np

from .nn_core import ConfigError, Parameter, UsageError

EFD_MODES = ("global", "local")


def make_mapping(inputs: int, neurons: int, fan_in: int, seed: int) -> np.ndarray:
    """Balanced random wiring ``[neurons, fan_in]`` into ``range(inputs)``.

    Slots are filled round-robin from successive seeded shuffles of the
    inputs, so use counts differ by at most one. When a neuron would receive
    a duplicate, the offending slot swaps with a later slot.
    """
    if inputs < fan_in:
        raise ConfigError(f"layer input width {inputs} < fan-in {fan_in}", "mixer.fan_in")
    rng = np.random.default_rng(seed)
    total = neurons * fan_in
    reps = -(-total // inputs)
    stream = np.concatenate([rng.permutation(inputs) for _ in range(reps)])[:total]
    m = stream.reshape(neurons, fan_in).copy()
    flat = m.reshape(-1)
    for j in range(neurons):
        for i in range(fan_in):
            pos = j * fan_in + i
            if flat[pos] not in flat[j * fan_in:pos]:
                continue
            row = set(flat[j * fan_in:pos].tolist())
            for q in list(range(pos + 1, total)) + list(range(0, j * fan_in)):
                cand = flat[q]
                qj = q // fan_in
                if cand in row:
                    continue
                # the swap must not create a duplicate in the other neuron
                other = flat[qj * fan_in:(qj + 1) * fan_in]
                if flat[pos] in other and qj != j:
                    continue
                flat[pos], flat[q] = flat[q], flat[pos]
                break
            else:
                raise ConfigError("could not build a duplicate-free mapping", "mixer.fan_in")
    return m.astype(np.int32)


def addresses(bits: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    """LSB-first addresses ``[R, J]``: addr = sum_i bit(map[j, i]) << i."""
    n = mapping.shape[1]
    g = np.take(bits, mapping.T.reshape(-1), axis=1).reshape(bits.shape[0], n, -1)
    addr = g[:, 0].astype(np.int32)
    for i in range(1, n):
        addr |= g[:, i].astype(np.int32) << i
    return addr


def efd_table(latent: np.ndarray) -> np.ndarray:
    """``[J, n]`` mean over all 2^(n-1) settings of the other bits of
    latent[a | bit_i] - latent[a & ~bit_i]."""
    j, size = latent.shape
    n = size.bit_length() - 1
    a = np.arange(size)
    out = np.empty((j, n), dtype=np.float64)
    for i in range(n):
        on = (a >> i) & 1 == 1
        out[:, i] = latent[:, on].mean(axis=1) - latent[:, ~on].mean(axis=1)
    return out


class LutLayer:
    def __init__(self, inputs, neurons, fan_in, name, rng, mapping_seed, efd_mode="global",
                 need_input_grad=True, lr_mult=1.0):
        if not 1 <= fan_in <= 16:
            raise ConfigError(f"fan-in {fan_in} out of range", "mixer.fan_in")
        if efd_mode not in EFD_MODES:
            raise ConfigError(f"unknown EFD mode {efd_mode!r}", "mixer.efd_mode")
        self.inputs = inputs
        self.neurons = neurons
        self.fan_in = fan_in
        self.efd_mode = efd_mode
        self.need_input_grad = need_input_grad
        self.mapping = make_mapping(inputs, neurons, fan_in, mapping_seed)
        init = rng.uniform(-1.0, 1.0, size=(neurons, 2**fan_in)).astype(np.float32)
        self.latent = Parameter(f"{name}.latent", init, decay=False, lr_mult=lr_mult)
        self._cache = None

    def parameters(self):
        return [self.latent]

    def truth_table(self) -> np.ndarray:
        """Binarized tables ``[J, 2^n]``; latent >= 0 maps to 1."""
        return (self.latent.value >= 0).astype(np.uint8)

    def forward(self, bits: np.ndarray) -> np.ndarray:
        if bits.shape[1] != self.inputs:
            raise ConfigError(f"LUT layer expects width {self.inputs}, got {bits.shape[1]}")
        addr = addresses(bits, self.mapping)
        flat = addr + (np.arange(self.neurons, dtype=np.int32) << self.fan_in)
        self._cache = (flat, addr)
        return (self.latent.value.reshape(-1)[flat] >= 0).view(np.uint8)

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        """Accumulate the latent gradient; return the input-bit gradient ``[R, I]``."""
        if self._cache is None:
            raise UsageError(f"{self.latent.name}: backward before forward")
        flat, addr = self._cache
        self._cache = None
        size = self.neurons << self.fan_in
        g = np.bincount(flat.reshape(-1), weights=grad.reshape(-1), minlength=size)
        self.latent.grad += g.reshape(self.latent.value.shape).astype(np.float32)
        if not self.need_input_grad:
            return None
        return self.input_grad(grad, addr)

    def input_grad(self, grad, addr):
        lat = self.latent.value
        rows = np.arange(self.neurons)
        if self.efd_mode == "global":
            sens = np.zeros((self.neurons, self.inputs), dtype=np.float32)
            sens[rows[:, None], self.mapping] = efd_table(lat)
            return grad @ sens
        out = np.zeros((grad.shape[0], self.inputs), dtype=np.float32)
        for i in range(self.fan_in):
            hi = lat[rows, addr | (1 << i)]
            lo = lat[rows, addr & ~(1 << i)]
            onehot = np.zeros((self.neurons, self.inputs), dtype=np.float32)
            onehot[rows, self.mapping[:, i]] = 1.0
            out += (grad * (hi - lo)) @ onehot
        return out
