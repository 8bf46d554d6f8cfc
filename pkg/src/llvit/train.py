"""End-to-end training runs: calibration, epochs, JSONL metrics, resumable checkpoints."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Dataset, load_dataset
from .model import LLViT, Trainer, evaluate, train_epoch


def load_splits(cfg: RunConfig, root=None):
    root = root or cfg.data.root or None
    train = load_dataset(cfg.data.name, root, "train", resize=cfg.data.resize)
    test = load_dataset(cfg.data.name, root, "test", resize=cfg.data.resize)
    train.augment = cfg.data.augment
    test.mean, test.std = train.mean, train.std
    if cfg.data.train_subset:
        train = train.subset(cfg.data.train_subset)
    return train, test


def build(cfg: RunConfig, train: Dataset):
    """Model with codecs calibrated once on the first ``calib_samples`` training images."""
    model = LLViT(cfg.model, seed=cfg.seed)
    steps = -(-len(train) // cfg.optim.batch_size)
    trainer = Trainer(model, cfg.optim, steps)
    if model.lut_mixers:
        n = min(cfg.data.calib_samples, len(train))
        model.calibrate_codecs(train.normalize(train.images[:n]), batch_size=n)
    return model, trainer


def finalize(model, cfg: RunConfig, train: Dataset) -> dict:
    """Quantize cond-sum values and record activation ranges for the integer path."""
    from .int_infer import calibrate_ranges

    for m in model.lut_mixers:
        m.condsum.quantize(cfg.model.mixer.encoded_bits, cfg.model.mixer.per_channel)
    n = min(cfg.data.calib_samples, len(train))
    return calibrate_ranges(model, train.normalize(train.images[:n]))


def clear_quantized(model):
    """Training and float evaluation use the real-valued encoded values."""
    for m in model.lut_mixers:
        m.condsum.quantized = None


def restore(path, cfg: RunConfig, train: Dataset):
    arrays, meta = checkpoint.load(path)
    model, trainer = build(cfg, train)
    msd, osd = checkpoint.split_state(arrays)
    model.load_state_dict(msd)
    clear_quantized(model)
    trainer.opt.load_state_arrays(osd, int(meta["step"]))
    return model, trainer, meta


def run(cfg: RunConfig, out_dir, train: Dataset, test: Dataset, resume=False, stop_after=None,
        log=print, log_every=0):
    """Train for ``cfg.optim.epochs`` epochs; returns the list of per-epoch metric dicts.

    ``stop_after`` ends the process early after that many completed epochs
    (used to exercise resumption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = out / "last.ckpt"
    metrics_path = out / "metrics.jsonl"
    start = 0
    history = []
    if resume and last.exists():
        model, trainer, meta = restore(last, cfg, train)
        start = int(meta["epoch"]) + 1
        if metrics_path.exists():
            history = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
            history = history[:start]
    else:
        model, trainer = build(cfg, train)
    metrics_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    best = max((h["test_accuracy"] for h in history), default=-1.0)
    for epoch in range(start, cfg.optim.epochs):
        t0 = time.time()
        tr = train_epoch(trainer, train, cfg.seed, epoch, log_every=log_every, log=log)
        ev = evaluate(model, test)
        rec = {"epoch": epoch, "train_loss": tr["loss"], "train_accuracy": tr["accuracy"],
               "test_accuracy": ev["accuracy"], "seconds": round(time.time() - t0, 2)}
        history.append(rec)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        log(f"epoch {epoch}: loss {tr['loss']:.4f} train {tr['accuracy']:.4f} "
            f"test {ev['accuracy']:.4f} ({rec['seconds']}s)")
        ranges = finalize(model, cfg, train)
        checkpoint.save_training_state(last, model, trainer, cfg, epoch, rec, ranges)
        if ev["accuracy"] > best:
            best = ev["accuracy"]
            checkpoint.save_training_state(out / "best.ckpt", model, trainer, cfg, epoch, rec,
                                           ranges)
        clear_quantized(model)
        if stop_after is not None and epoch + 1 - start >= stop_after:
            break
    return history


def load_model(path, quantized=False):
    """Model, RunConfig and header from a checkpoint (no optimizer state, no dataset needed).

    With ``quantized`` the stored int cond-sum values replace the real ones
    in the float forward pass.
    """
    from .config import run_config_from_dict

    arrays, meta = checkpoint.load(path)
    cfg = run_config_from_dict(meta["config"])
    model = LLViT(cfg.model, seed=cfg.seed)
    msd, _ = checkpoint.split_state(arrays)
    model.load_state_dict(msd)
    if not quantized:
        clear_quantized(model)
    return model, cfg, meta
