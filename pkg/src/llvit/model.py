"""Vision transformer assembly with a selectable channel mixer, plus training/eval loops."""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig, OptimConfig
from .mixer import LUTMixer, make_mixer
from .nn_core import (
    ConfigError,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Optimizer,
    Parameter,
    TrainingError,
    cosine_lr,
    cross_entropy,
    trunc_normal,
)


def to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, (H/p)*(W/p), p*p*C]``, patches in row-major order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}", "model.patch_size")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def from_patches(grad: np.ndarray, shape, patch: int) -> np.ndarray:
    b, h, w, c = shape
    x = grad.reshape(b, h // patch, w // patch, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(shape)


class PatchEmbed:
    def __init__(self, cfg: ModelConfig, rng):
        pdim = cfg.patch_size**2 * cfg.channels
        self.cfg = cfg
        self.proj = Linear(pdim, cfg.dim, "embed.proj", rng)
        self.pos = Parameter("embed.pos", trunc_normal(rng, (cfg.tokens, cfg.dim)), decay=False)
        self.cls = Parameter("embed.cls", trunc_normal(rng, (cfg.dim,)), decay=False)
        self._shape = None

    def parameters(self):
        return self.proj.parameters() + [self.pos, self.cls]

    def forward(self, images):
        if images.shape[1:] != (self.cfg.image_size, self.cfg.image_size, self.cfg.channels):
            raise ConfigError(f"image shape {images.shape[1:]} does not match config",
                              "model.image_size")
        self._shape = images.shape
        p = self.proj.forward(to_patches(images, self.cfg.patch_size))
        cls = np.broadcast_to(self.cls.value, (p.shape[0], 1, p.shape[2]))
        return np.concatenate([cls, p], axis=1) + self.pos.value

    def backward(self, grad):
        self.pos.grad += grad.sum(0)
        self.cls.grad += grad[:, 0].sum(0)
        return from_patches(self.proj.backward(grad[:, 1:]), self._shape, self.cfg.patch_size)


def patch_embed(image: np.ndarray, weight, bias, pos, cls, patch: int) -> np.ndarray:
    """Functional patch embedding of one ``[H, W, C]`` image -> ``[N, D]``."""
    p = to_patches(image[None], patch)[0] @ weight + bias
    return np.concatenate([cls[None], p], axis=0) + pos


class EncoderBlock:
    def __init__(self, cfg: ModelConfig, index, rng, seed):
        name = f"blocks.{index}"
        self.name = name
        self.ln1 = LayerNorm(cfg.dim, f"{name}.ln1", cfg.ln_eps)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, f"{name}.attn", rng)
        self.ln2 = LayerNorm(cfg.dim, f"{name}.ln2", cfg.ln_eps)
        self.mixer = make_mixer(cfg.dim, cfg.mixer, f"{name}.mixer", rng,
                                mapping_seed=seed * 1000 + 17 * index)

    def parameters(self):
        return (self.ln1.parameters() + self.attn.parameters() + self.ln2.parameters()
                + self.mixer.parameters())

    def forward(self, x, trace=None, calibrate=False, counter=None):
        h = self.ln1.forward(x)
        x1 = x + self.attn.forward(h)
        z = self.ln2.forward(x1)
        if calibrate and isinstance(self.mixer, LUTMixer) and not self.mixer.codec.calibrated:
            self.mixer.codec.calibrate(z.reshape(-1, z.shape[-1]))
        out = self.mixer.forward(z, skip=x1, counter=counter)
        if trace is not None:
            _, q, k, v, _, merged, _, _, _ = self.attn._cache
            for key, val in (("ln1", h), ("q", q), ("k", k), ("v", v), ("attn", merged),
                             ("x1", x1), ("ln2", z), ("out", out)):
                _track(trace, f"{self.name}.{key}", val)
            if self.mixer.kind == "mlp":
                _track(trace, f"{self.name}.fc1", self.mixer.act._x)
                _track(trace, f"{self.name}.gelu", self.mixer.fc2._x)
        return out

    def backward(self, grad):
        gz, gskip = self.mixer.backward(grad)
        if self.mixer.kind == "lut":
            self.ln2._cache = None
            g1 = gskip
        else:
            g1 = gskip + self.ln2.backward(gz)
        return g1 + self.ln1.backward(self.attn.backward(g1))


def _track(trace, key, value):
    m = float(np.abs(value).max()) if value.size else 0.0
    trace[key] = max(trace.get(key, 0.0), m)


class LLViT:
    """ViT classifier; ``cfg.mixer.kind`` selects the MLP or LUT channel mixer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [EncoderBlock(cfg, i, rng, seed) for i in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, "norm", cfg.ln_eps)
        self.head = Linear(cfg.dim, cfg.num_classes, "head", rng)
        self._n = None

    # -- parameters / state --------------------------------------------------

    def parameters(self):
        ps = self.embed.parameters()
        for b in self.blocks:
            ps += b.parameters()
        return ps + self.norm.parameters() + self.head.parameters()

    @property
    def lut_mixers(self):
        return [b.mixer for b in self.blocks if b.mixer.kind == "lut"]

    def buffers(self) -> dict:
        out = {}
        for b in self.blocks:
            m = b.mixer
            if m.kind != "lut":
                continue
            if m.codec.thresholds is not None:
                out[f"{m.name}.thresholds"] = m.codec.thresholds
            for k, layer in enumerate(m.luts):
                out[f"{m.name}.lut{k}.mapping"] = layer.mapping
            q = m.condsum.quantized
            if q is not None:
                out[f"{m.name}.condsum.wq"] = q.wq
                out[f"{m.name}.condsum.scale"] = q.scale
        return out

    def state_dict(self) -> dict:
        sd = {p.name: p.value for p in self.parameters()}
        sd.update(self.buffers())
        return sd

    def load_state_dict(self, sd: dict, bits: int | None = None):
        from .condsum import QuantizedEncoded

        for p in self.parameters():
            if p.name not in sd:
                raise KeyError(f"missing parameter {p.name}")
            if sd[p.name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value[...] = sd[p.name]
        for m in self.lut_mixers:
            if f"{m.name}.thresholds" in sd:
                m.codec.thresholds = np.asarray(sd[f"{m.name}.thresholds"], np.float32).copy()
            for k, layer in enumerate(m.luts):
                layer.mapping = np.asarray(sd[f"{m.name}.lut{k}.mapping"], np.int32).copy()
            if f"{m.name}.condsum.wq" in sd:
                m.condsum.quantized = QuantizedEncoded(
                    np.asarray(sd[f"{m.name}.condsum.wq"], np.int8),
                    np.asarray(sd[f"{m.name}.condsum.scale"], np.float32),
                    bits or self.cfg.mixer.encoded_bits)
            else:
                m.condsum.quantized = None

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- compute ---------------------------------------------------------------

    def features(self, images, trace=None, calibrate=False, counter=None):
        x = self.embed.forward(images)
        if trace is not None:
            _track(trace, "input", images)
            _track(trace, "embed", x)
        for b in self.blocks:
            x = b.forward(x, trace, calibrate, counter=None if counter is None else counter.at(f"{b.name}.mixer"))
        return x

    def forward(self, images, trace=None, calibrate=False, counter=None):
        x = self.features(images, trace, calibrate, counter)
        self._n = x.shape[1]
        c = self.norm.forward(x[:, 0])
        if trace is not None:
            _track(trace, "norm", c)
        return self.head.forward(c)

    def backward(self, grad_logits):
        gc = self.norm.backward(self.head.backward(grad_logits))
        g = np.zeros((gc.shape[0], self._n, gc.shape[1]), dtype=gc.dtype)
        g[:, 0] = gc
        for b in reversed(self.blocks):
            g = b.backward(g)
        self.embed.backward(g)

    def calibrate_codecs(self, images, batch_size=512):
        """Fix every LUT mixer's thermometer thresholds from one pass over ``images``."""
        if not self.lut_mixers:
            return
        for m in self.lut_mixers:
            m.codec.thresholds = None
        self.forward(images[:batch_size], calibrate=True)

    def find_nonfinite(self, images) -> str:
        """Name of the first layer whose output is non-finite (diagnostics)."""
        for p in self.parameters():
            if not np.all(np.isfinite(p.value)):
                return p.name
        x = self.embed.forward(images)
        if not np.all(np.isfinite(x)):
            return "embed"
        for b in self.blocks:
            x = b.forward(x)
            if not np.all(np.isfinite(x)):
                return b.name
        c = self.norm.forward(x[:, 0])
        if not np.all(np.isfinite(c)):
            return "norm"
        return "head"

    def predict(self, images, batch_size=256):
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.forward(images[i:i + batch_size]))
        return np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes), np.float32)


# --------------------------------------------------------------------------
# training / evaluation
# --------------------------------------------------------------------------


class Trainer:
    """Holds the optimizer and the step-indexed learning-rate schedule."""

    def __init__(self, model: LLViT, optim: OptimConfig, steps_per_epoch: int):
        self.model = model
        self.cfg = optim
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = max(1, optim.epochs * steps_per_epoch)
        self.warmup = int(round(optim.warmup_epochs * steps_per_epoch))
        self.opt = Optimizer(optim.kind, optim.lr, tuple(optim.betas), optim.momentum,
                             optim.weight_decay)

    def lr_at(self, step):
        return cosine_lr(self.cfg.lr, step, self.total_steps, self.warmup, self.cfg.min_lr)

    def step(self, images, labels):
        logits = self.model.forward(images)
        loss, g = cross_entropy(logits, labels)
        if not math.isfinite(loss):
            where = self.model.find_nonfinite(images)
            raise TrainingError(f"non-finite loss; first non-finite output at {where}")
        self.model.backward(g)
        self.opt.step(self.model.parameters(), lr=self.lr_at(self.opt.step_count))
        return loss, int((logits.argmax(1) == labels).sum())


def train_epoch(trainer: Trainer, dataset, seed: int, epoch: int, augment=None, log_every=0,
                log=print):
    """One pass over ``dataset``; returns running mean loss and top-1 accuracy."""
    from .data import batches

    tot_loss = 0.0
    correct = 0
    seen = 0
    aug = dataset.augment if augment is None else augment
    for i, (x, y) in enumerate(batches(dataset, trainer.cfg.batch_size, seed, epoch, aug)):
        loss, c = trainer.step(x, y)
        tot_loss += loss * len(y)
        correct += c
        seen += len(y)
        if log_every and (i + 1) % log_every == 0:
            log(f"  epoch {epoch} step {i + 1}: loss {tot_loss / seen:.4f} acc {correct / seen:.4f}")
    return {"loss": tot_loss / max(seen, 1), "accuracy": correct / max(seen, 1)}


def evaluate(model: LLViT, dataset, batch_size=256) -> dict:
    from .data import batches

    preds = []
    labels = []
    for x, y in batches(dataset, batch_size, seed=0, epoch=0, augment=False, shuffle=False):
        preds.append(model.forward(x).argmax(1))
        labels.append(y)
    return accuracy_report(np.concatenate(preds), np.concatenate(labels), model.cfg.num_classes)


def accuracy_report(preds, labels, num_classes) -> dict:
    per_class = {}
    for c in range(num_classes):
        m = labels == c
        per_class[str(c)] = float((preds[m] == c).mean()) if m.any() else None
    return {"accuracy": float((preds == labels).mean()) if len(labels) else 0.0,
            "count": int(len(labels)), "per_class": per_class}
