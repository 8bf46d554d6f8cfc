"""Post-training evaluations of a trained checkpoint: cond-sum bit width sweep and integer fidelity."""

from __future__ import annotations

import numpy as np

from .data import Dataset, batches
from .int_infer import calibrate_ranges, quantize_model
from .model import evaluate


def encoded_bits_sweep(model, test: Dataset, bits=(8, 4, 2), per_channel=False) -> dict:
    """Top-1 with real cond-sum values and with each PTQ width; restores the model after."""
    out = {"float": evaluate(model, test)["accuracy"]}
    try:
        for b in bits:
            for m in model.lut_mixers:
                m.condsum.quantize(b, per_channel)
            out[f"int{b}"] = evaluate(model, test)["accuracy"]
    finally:
        for m in model.lut_mixers:
            m.condsum.quantized = None
    return out


def integer_fidelity(model, test: Dataset, ranges: dict | None, encoded_bits=4, calib=None,
                     batch_size=250) -> dict:
    """Integer-path accuracy and argmax agreement with the float path (real cond-sum values).

    Without recorded activation ``ranges`` they are measured on ``calib`` images.
    """
    if not ranges:
        ranges = calibrate_ranges(model, calib)
    im = quantize_model(model, ranges=ranges, encoded_bits=encoded_bits if model.lut_mixers else None)
    ip, fp, labels = [], [], []
    for x, y in batches(test, batch_size, 0, 0, augment=False, shuffle=False):
        ip.append(im.forward(x).argmax(1))
        fp.append(model.forward(x).argmax(1))
        labels.append(y)
    ip, fp, labels = np.concatenate(ip), np.concatenate(fp), np.concatenate(labels)
    return {"int_accuracy": float((ip == labels).mean()),
            "float_accuracy": float((fp == labels).mean()),
            "argmax_agreement": float((ip == fp).mean()), "count": int(len(labels))}
