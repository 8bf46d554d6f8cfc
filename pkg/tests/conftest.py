import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from llvit.config import MixerConfig, ModelConfig

settings.register_profile("suite", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

DATA_ROOT = Path(os.environ.get("LLVIT_DATA", "/root/data"))
MNIST_DIR = DATA_ROOT / "mnist"
HAVE_MNIST = (MNIST_DIR / "train-images-idx3-ubyte").exists()
needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason="MNIST IDX files not present")


def toy_model_config(kind="lut", depth=2, dim=16, heads=2, image=8, patch=4, channels=1,
                     classes=4, widths=(32, 16), fan_in=4, bits=4):
    if kind == "lut":
        mixer = MixerConfig(kind="lut", widths=list(widths), fan_in=fan_in, bits=bits)
    else:
        mixer = MixerConfig(kind="mlp")
    return ModelConfig(image_size=image, patch_size=patch, channels=channels, dim=dim, heads=heads,
                       depth=depth, num_classes=classes, mixer=mixer)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def calibrated(model, rng, n=64):
    cfg = model.cfg
    x = rng.normal(0, 1, (n, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)
    model.calibrate_codecs(x)
    return x
