"""MNIST (IDX) and CIFAR-10/100 (binary) loaders with deterministic batching."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import os
import shutil
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "LLVIT_DATA"


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [S, H, W, C]
    labels: np.ndarray  # int64 [S]
    split: str
    num_classes: int
    mean: np.ndarray  # per-channel, in [0, 1] units, from the train split
    std: np.ndarray
    augment: bool = False
    resize: int = 0

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes, self.mean,
                       self.std, self.augment, self.resize)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float32) / 255.0
        x = (x - self.mean.astype(np.float32)) / self.std.astype(np.float32)
        if self.resize and self.resize != x.shape[1]:
            x = resize_nearest(x, self.resize)
        return x

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        y = x * self.std.astype(np.float32) + self.mean.astype(np.float32)
        return np.rint(y * 255.0).astype(np.uint8)


def channel_stats(images: np.ndarray):
    x = images.reshape(-1, images.shape[-1]).astype(np.float64) / 255.0
    return x.mean(axis=0), x.std(axis=0)


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, "data"))


# --------------------------------------------------------------------------
# MNIST
# --------------------------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000),
}

# SHA-256 of the decompressed IDX files.
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(str(path))


def parse_idx(buf: bytes, expect_magic: int) -> np.ndarray:
    """Parse an IDX buffer (big-endian header, unsigned-byte payload)."""
    if len(buf) < 8:
        raise OSError("truncated IDX header")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expect_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise OSError("truncated IDX header")
    dims = [int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(buf) - hdr < count:
        raise OSError(f"truncated IDX payload: {len(buf) - hdr} of {count} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def _load_mnist_split(root: Path, split: str):
    img_name, lab_name, _ = MNIST_FILES[split]
    images = parse_idx(_read_maybe_gz(root / img_name), 0x00000803)
    labels = parse_idx(_read_maybe_gz(root / lab_name), 0x00000801)
    if len(images) != len(labels):
        raise FormatError("image/label count mismatch")
    return images[..., None], labels.astype(np.int64)


def load_mnist(root=None, split="train") -> Dataset:
    root = data_root(root)
    if root.name != "mnist" and (root / "mnist").is_dir():
        root = root / "mnist"
    tr_x, tr_y = _load_mnist_split(root, "train")
    mean, std = channel_stats(tr_x)
    if split == "train":
        x, y = tr_x, tr_y
    else:
        x, y = _load_mnist_split(root, "test")
    if y.size and (y.min() < 0 or y.max() >= 10):
        raise FormatError("MNIST label out of range")
    return Dataset(x, y, split, 10, mean, std)


# --------------------------------------------------------------------------
# CIFAR
# --------------------------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3 x 32 x 32 channel-planar pixels


def parse_cifar_records(buf: bytes, label_bytes=1, expect_records=10000, label_index=-1):
    stride = label_bytes + 3072
    if len(buf) % stride or (expect_records and len(buf) // stride != expect_records):
        raise FormatError(f"CIFAR batch of {len(buf)} bytes is not {expect_records} records "
                          f"of {stride} bytes")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, stride)
    labels = raw[:, label_index if label_index >= 0 else label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _cifar_dir(root: Path, names, marker: str) -> Path:
    for cand in [root] + [root / n for n in names]:
        if (cand / marker).is_file():
            return cand
    raise FileNotFoundError(f"CIFAR directory not found under {root}")


def load_cifar10(root=None, split="train") -> Dataset:
    d = _cifar_dir(data_root(root), ("cifar-10-batches-bin", "cifar10", "cifar-10"), "test_batch.bin")
    train = [parse_cifar_records((d / f"data_batch_{i}.bin").read_bytes()) for i in range(1, 6)]
    tr_x = np.concatenate([t[0] for t in train])
    mean, std = channel_stats(tr_x)
    if split == "train":
        x, y = tr_x, np.concatenate([t[1] for t in train])
    else:
        x, y = parse_cifar_records((d / "test_batch.bin").read_bytes())
    return Dataset(x, y, split, 10, mean, std)


def load_cifar100(root=None, split="train") -> Dataset:
    d = _cifar_dir(data_root(root), ("cifar-100-binary", "cifar100", "cifar-100"), "test.bin")
    tr_x, tr_y = parse_cifar_records((d / "train.bin").read_bytes(), 2, 50000, label_index=1)
    mean, std = channel_stats(tr_x)
    if split == "train":
        x, y = tr_x, tr_y
    else:
        x, y = parse_cifar_records((d / "test.bin").read_bytes(), 2, 10000, label_index=1)
    return Dataset(x, y, split, 100, mean, std)


def check_layout_flowers102(root) -> Path:
    """Validate the Flowers-102 directory layout (loader not provided at desk scale)."""
    d = Path(root)
    for rel in ("jpg", "imagelabels.mat", "setid.mat"):
        if not (d / rel).exists():
            raise FileNotFoundError(f"Flowers-102 layout: missing {rel}")
    return d


def check_layout_tiny_imagenet(root) -> Path:
    """Validate the Tiny-ImageNet directory layout (loader not provided at desk scale)."""
    d = Path(root)
    for rel in ("train", "val", "wnids.txt"):
        if not (d / rel).exists():
            raise FileNotFoundError(f"Tiny-ImageNet layout: missing {rel}")
    return d


def load_dataset(name, root=None, split="train", augment=False, resize=0) -> Dataset:
    loaders = {"mnist": load_mnist, "cifar10": load_cifar10, "cifar100": load_cifar100}
    if name not in loaders:
        raise ValueError(f"unknown dataset {name!r}")
    ds = loaders[name](root, split)
    ds.augment = augment
    ds.resize = resize
    return ds


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def resize_nearest(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[1:3]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return x[:, rows][:, :, cols]


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad=4) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, flip half horizontally."""
    b, h, w, c = images.shape
    padded = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=images.dtype)
    padded[:, pad:pad + h, pad:pad + w] = images
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(images)
    for i in range(b):
        crop = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, ::-1] if flip[i] else crop
    return out


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int, augment=False, shuffle=True):
    """Yield ``(images float32 [B,H,W,C], labels)``; order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        imgs = ds.images[idx]
        if augment:
            imgs = augment_batch(imgs, rng)
        yield ds.normalize(imgs), ds.labels[idx]


# --------------------------------------------------------------------------
# fetch
# --------------------------------------------------------------------------

SOURCES = {
    "mnist": [
        # npm package shipping the raw IDX files under package/data/
        ("https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz", "npm-tgz"),
    ] + [
        (f"https://ossci-datasets.s3.amazonaws.com/mnist/{n}.gz", "gz") for n in MNIST_SHA256
    ],
    "cifar10": [("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz", "tgz")],
    "cifar100": [("https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz", "tgz")],
}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, timeout=60) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as r:
        return r.read()


def fetch(name: str, root, sources=None, log=print) -> dict:
    """Download a dataset into ``root/name``, verify known checksums, write ``manifest.json``.

    The first source that yields a complete, verified file set wins.
    """
    dest = Path(root) / name
    dest.mkdir(parents=True, exist_ok=True)
    errors = []
    for url, kind in sources or SOURCES[name]:
        try:
            if kind == "gz":
                fname = url.rsplit("/", 1)[1][:-3]
                (dest / fname).write_bytes(gzip.decompress(_download(url)))
                if name == "mnist" and not all((dest / f).exists() for f in MNIST_SHA256):
                    continue
            else:
                with tarfile.open(fileobj=io.BytesIO(_download(url)), mode="r:gz") as tf:
                    for m in tf.getmembers():
                        if not m.isfile():
                            continue
                        base = Path(m.name).name
                        if kind == "npm-tgz" and "/data/" not in m.name:
                            continue
                        with tf.extractfile(m) as src, open(dest / base, "wb") as dst:
                            shutil.copyfileobj(src, dst)
            break
        except Exception as e:  # noqa: BLE001 - try the next mirror
            errors.append(f"{url}: {e}")
            log(f"fetch: {url} failed: {e}")
    else:
        raise OSError("all sources failed:\n" + "\n".join(errors))
    files = {}
    for p in sorted(dest.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            digest = sha256_file(p)
            expected = MNIST_SHA256.get(p.name) if name == "mnist" else None
            if expected and digest != expected:
                raise FormatError(f"checksum mismatch for {p.name}")
            files[p.name] = {"sha256": digest, "bytes": p.stat().st_size, "verified": bool(expected)}
    manifest = {"dataset": name, "files": files}
    (dest / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
