"""Thermometer encoding of real activations into monotone bit vectors."""

from __future__ import annotations

import warnings

import numpy as np

from .nn_core import ConfigError, UsageError


class Thermometer:
    """Per-feature thermometer codec with ``bits`` ordered thresholds.

    Thresholds are frozen once calibrated; no gradient flows into them.
    Encoded bits are feature-major, LSB (lowest threshold) first.
    """

    def __init__(self, features: int, bits: int = 8):
        if bits < 1:
            raise ConfigError("thermometer bits must be >= 1", "mixer.bits")
        self.features = features
        self.bits = bits
        self.thresholds: np.ndarray | None = None

    @property
    def calibrated(self) -> bool:
        return self.thresholds is not None

    def calibrate(self, sample: np.ndarray) -> "Thermometer":
        """Place thresholds at the k/(bits+1) quantiles of each feature, k=1..bits."""
        sample = np.asarray(sample, dtype=np.float64).reshape(-1, self.features)
        if sample.shape[0] < self.bits + 1:
            raise UsageError(f"need at least {self.bits + 1} calibration rows, got {sample.shape[0]}")
        qs = np.arange(1, self.bits + 1) / (self.bits + 1)
        t = np.quantile(sample, qs, axis=0).T.astype(np.float32)  # [D, b]
        self.thresholds = make_strictly_increasing(t, sample)
        return self

    def encode(self, x: np.ndarray) -> np.ndarray:
        """``x[R, D]`` -> uint8 bits ``[R, D*bits]``; a bit is 1 iff x > threshold."""
        if self.thresholds is None:
            raise UsageError("thermometer used before calibration")
        x = x.reshape(-1, self.features)
        bits = x[:, :, None] > self.thresholds[None, :, :]
        return bits.reshape(x.shape[0], -1).view(np.uint8)


def make_strictly_increasing(t: np.ndarray, sample: np.ndarray | None = None) -> np.ndarray:
    """Nudge tied thresholds upward by a feature-scaled epsilon, warning on degenerate columns."""
    t = t.astype(np.float32).copy()
    if t.shape[1] < 2:
        return t
    ties = np.any(np.diff(t, axis=1) <= 0, axis=1)
    if not ties.any():
        return t
    cols = np.flatnonzero(ties)
    warnings.warn(f"thermometer: {len(cols)} feature(s) with tied thresholds; perturbing", RuntimeWarning)
    if sample is not None:
        scale = np.maximum(np.abs(sample[:, cols]).max(axis=0), 1.0)
    else:
        scale = np.maximum(np.abs(t[cols]).max(axis=1), 1.0)
    eps = (1e-5 * scale).astype(np.float32)
    for c, d in enumerate(cols):
        for j in range(1, t.shape[1]):
            if t[d, j] <= t[d, j - 1]:
                t[d, j] = max(t[d, j - 1] + eps[c], np.nextafter(t[d, j - 1], np.float32(np.inf)))
    return t
