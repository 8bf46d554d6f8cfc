import math

import numpy as np
import pytest

from conftest import calibrated, toy_model_config
from llvit.config import OptimConfig
from llvit.data import Dataset
from llvit.model import LLViT, Trainer, evaluate, patch_embed, to_patches, train_epoch
from llvit.nn_core import ConfigError, TrainingError, cross_entropy


def test_token_counts():
    assert toy_model_config(image=32, patch=4).tokens == 65
    from llvit.config import ModelConfig

    assert ModelConfig(image_size=224, patch_size=16).tokens == 197


def test_patch_order_row_major():
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    p = to_patches(img, 2)
    assert p[0, 0].tolist() == [0, 1, 4, 5]
    assert p[0, 1].tolist() == [2, 3, 6, 7]


def test_patch_embed_zero_image_zero_weights(rng):
    pos = rng.normal(size=(5, 3))
    cls = rng.normal(size=3)
    out = patch_embed(np.zeros((4, 4, 1)), np.zeros((4, 3)), np.zeros(3), pos, cls, 2)
    assert out.shape == (5, 3)
    assert np.allclose(out[1:], pos[1:]) and np.allclose(out[0], pos[0] + cls)


def test_bad_image_shape(rng):
    m = LLViT(toy_model_config("mlp"))
    with pytest.raises(ConfigError):
        m.forward(np.zeros((1, 12, 12, 1), np.float32))


@pytest.mark.parametrize("kind", ["lut", "mlp"])
def test_shapes_at_every_boundary(kind, rng):
    cfg = toy_model_config(kind)
    m = LLViT(cfg, seed=0)
    x = calibrated(m, rng)[:3]
    h = m.embed.forward(x)
    assert h.shape == (3, cfg.tokens, cfg.dim)
    for b in m.blocks:
        h = b.forward(h)
        assert h.shape == (3, cfg.tokens, cfg.dim)
    assert m.forward(x).shape == (3, cfg.num_classes)


def test_initial_loss_near_log_classes(rng):
    cfg = toy_model_config("lut", classes=10)
    m = LLViT(cfg)
    x = calibrated(m, rng)
    loss, _ = cross_entropy(m.forward(x), rng.integers(0, 10, len(x)))
    assert abs(loss - math.log(10)) < 0.2 * math.log(10)


def _fd_check(model, params, x, y, rng, frac=0.01, h=1e-2):
    model.zero_grad()
    logits = model.forward(x)
    _, g = cross_entropy(logits, y)
    model.backward(g)
    checked = 0
    for p in params:
        flat = p.value.reshape(-1)
        k = max(1, int(round(frac * flat.size)))
        for idx in rng.choice(flat.size, k, replace=False):
            old = flat[idx]
            flat[idx] = old + h
            lp, _ = cross_entropy(model.forward(x), y)
            flat[idx] = old - h
            lm, _ = cross_entropy(model.forward(x), y)
            flat[idx] = old
            num = (lp - lm) / (2 * h)
            ana = float(p.grad.reshape(-1)[idx])
            assert abs(num - ana) <= 1e-2 * max(abs(num), abs(ana)) + 2e-5, (p.name, idx, num, ana)
            checked += 1
    return checked


def _widen(model, rng):
    # larger weights than the training init so gradients stand well above float32 noise
    for p in model.parameters():
        if p.value.ndim == 2 and not p.name.endswith(".latent"):
            p.value[...] = rng.normal(0, 0.3, p.value.shape).astype(np.float32)


def test_gradients_mlp_toy(rng):
    m = LLViT(toy_model_config("mlp", dim=16, depth=2), seed=1)
    _widen(m, rng)
    x = rng.normal(size=(4, 8, 8, 1)).astype(np.float32)
    y = rng.integers(0, 4, 4)
    assert _fd_check(m, m.parameters(), x, y, rng) > 20


def test_gradients_lut_toy_downstream_params(rng):
    # parameters downstream of every thermometer see a piecewise-smooth loss
    m = LLViT(toy_model_config("lut", dim=16, depth=2), seed=1)
    _widen(m, rng)
    x = calibrated(m, rng)[:4]
    y = rng.integers(0, 4, 4)
    ps = m.blocks[-1].mixer.condsum.parameters() + m.norm.parameters() + m.head.parameters()
    assert _fd_check(m, ps, x, y, rng, frac=0.05) > 10


def _toy_data(rng, n=32, classes=4):
    imgs = rng.integers(0, 256, (n, 8, 8, 1)).astype(np.uint8)
    labels = np.arange(n) % classes
    return Dataset(imgs, labels, "train", classes, np.array([0.5]), np.array([0.29]))


@pytest.mark.parametrize("kind", ["lut", "mlp"])
def test_overfits_32_samples(kind, rng):
    ds = _toy_data(rng)
    m = LLViT(toy_model_config(kind, classes=4), seed=0)
    m.calibrate_codecs(ds.normalize(ds.images))
    opt = OptimConfig(lr=3e-3, weight_decay=0.0, batch_size=32, epochs=200, warmup_epochs=0)
    tr = Trainer(m, opt, 1)
    for ep in range(200):
        met = train_epoch(tr, ds, 0, ep, augment=False)
        if met["accuracy"] == 1.0 and evaluate(m, ds)["accuracy"] == 1.0:
            break
    assert evaluate(m, ds)["accuracy"] == 1.0


def test_same_seed_identical_metrics(rng):
    ds = _toy_data(rng)
    out = []
    for _ in range(2):
        m = LLViT(toy_model_config("lut"), seed=5)
        m.calibrate_codecs(ds.normalize(ds.images))
        tr = Trainer(m, OptimConfig(batch_size=8, epochs=2), 4)
        mets = [train_epoch(tr, ds, 5, e) for e in range(2)]
        out.append((mets, [p.value.copy() for p in m.parameters()]))
    assert out[0][0] == out[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(out[0][1], out[1][1]))


def test_nan_loss_aborts_with_layer_name(rng):
    ds = _toy_data(rng)
    m = LLViT(toy_model_config("mlp"), seed=0)
    m.blocks[1].attn.params["wq"].value[0, 0] = np.nan
    tr = Trainer(m, OptimConfig(batch_size=8), 4)
    with pytest.raises(TrainingError, match="blocks.1.attn.wq"):
        train_epoch(tr, ds, 0, 0)


def test_state_dict_roundtrip(rng):
    m = LLViT(toy_model_config("lut"), seed=2)
    x = calibrated(m, rng)
    m2 = LLViT(toy_model_config("lut"), seed=99)
    m2.load_state_dict(m.state_dict())
    assert np.array_equal(m.forward(x), m2.forward(x))
