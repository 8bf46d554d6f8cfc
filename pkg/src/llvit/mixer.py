"""Channel mixers: the MLP baseline and the LUT-based replacement.

Both take the post-LayerNorm activations ``z`` and a ``skip`` stream and
return ``skip + f(z)``; with no skip given, ``z`` itself is the residual.
"""

from __future__ import annotations

import numpy as np

from .condsum import CondSum
from .config import MixerConfig
from .lut import LutLayer
from .nn_core import GELU, Linear, UsageError
from .thermometer import Thermometer


class MLPMixer:
    kind = "mlp"

    def __init__(self, dim, cfg: MixerConfig, name, rng):
        hidden = cfg.hidden_ratio * dim
        self.fc1 = Linear(dim, hidden, f"{name}.fc1", rng)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, f"{name}.fc2", rng)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def forward(self, z, skip=None, counter=None):
        y = self.fc2.forward(self.act.forward(self.fc1.forward(z)))
        return (z if skip is None else skip) + y

    def backward(self, grad):
        """Returns ``(grad_z, grad_skip)``."""
        gz = self.fc1.backward(self.act.backward(self.fc2.backward(grad)))
        return gz, grad


class LUTMixer:
    """Thermometer -> LUT layers -> conditional summation, plus residual."""

    kind = "lut"

    def __init__(self, dim, cfg: MixerConfig, name, rng, mapping_seed):
        self.dim = dim
        self.codec = Thermometer(dim, cfg.bits)
        self.luts = []
        width = dim * cfg.bits
        for k, w in enumerate(cfg.widths):
            self.luts.append(LutLayer(width, int(w), cfg.fan_in, f"{name}.lut{k}", rng,
                                      mapping_seed=mapping_seed + k, efd_mode=cfg.efd_mode,
                                      need_input_grad=k > 0, lr_mult=cfg.latent_lr_mult))
            width = int(w)
        self.condsum = CondSum(dim, width, f"{name}.condsum", rng)
        self.name = name

    def parameters(self):
        return [l.latent for l in self.luts] + self.condsum.parameters()

    def lut_bits(self, z, counter=None):
        """Final-layer LUT outputs ``[R, J]`` for rows of ``z``."""
        if not self.codec.calibrated:
            raise UsageError(f"{self.name}: thermometer not calibrated")
        bits = self.codec.encode(z)
        if counter is not None:
            counter.add(compares=bits.size)
        for layer in self.luts:
            bits = layer.forward(bits)
            if counter is not None:
                counter.add(lookups=bits.size)
        return bits

    def forward(self, z, skip=None, counter=None):
        shape = z.shape
        bits = self.lut_bits(z.reshape(-1, self.dim), counter)
        y = self.condsum.forward(bits, counter).reshape(shape)
        return (z if skip is None else skip) + y

    def backward(self, grad):
        g = self.condsum.backward(grad.reshape(-1, self.dim))
        for layer in reversed(self.luts):
            g = layer.backward(g)
        # thresholds are frozen: no gradient reaches z through the encoder
        return np.zeros_like(grad), grad


def make_mixer(dim, cfg: MixerConfig, name, rng, mapping_seed=0):
    if cfg.kind == "mlp":
        return MLPMixer(dim, cfg, name, rng)
    return LUTMixer(dim, cfg, name, rng, mapping_seed)


def mixer_param_count(cfg: MixerConfig, dim: int) -> dict:
    """Per-encoder mixer cost. Biases are excluded, matching the Table-I-style formulas."""
    if cfg.kind == "mlp":
        h = cfg.hidden_ratio * dim
        return {"weights": 2 * dim * h, "ff1": dim * h, "ff2": h * dim}
    table = 2**cfg.fan_in
    latent = sum(int(w) * table for w in cfg.widths)
    j = int(cfg.widths[-1])
    return {
        "latent_entries": latent,
        "truth_table_bits": latent,
        "encoded_values": dim * j,
        "encoded_bytes": dim * j * cfg.encoded_bits / 8,
        "thresholds": dim * cfg.bits,
    }
