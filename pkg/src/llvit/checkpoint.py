"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian buffers at the offsets listed in the header. Arrays
tagged ``int4`` are nibble-packed (low nibble first) two's-complement.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from . import __version__

MAGIC = b"LLVITCK1"
_ALIGN = 16


class CheckpointError(ValueError):
    pass


def pack_int4(a: np.ndarray) -> bytes:
    flat = np.asarray(a, np.int8).reshape(-1)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise ValueError("value outside int4 range")
    nib = (flat.astype(np.uint8) & 0x0F)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, np.uint8)
    nib = np.empty(b.size * 2, np.uint8)
    nib[0::2] = b & 0x0F
    nib[1::2] = b >> 4
    v = nib[:count].astype(np.int8)
    v[v > 7] -= 16
    return v


def _entry_bytes(arr: np.ndarray, int4: bool):
    if int4:
        return "int4", pack_int4(arr)
    a = np.ascontiguousarray(arr)
    dt = a.dtype.newbyteorder("<")
    return a.dtype.str.lstrip("<>|="), a.astype(dt, copy=False).tobytes()


def save(path, arrays: dict, meta: dict, int4_keys=()):
    """Write ``arrays`` (name -> ndarray) with a JSON ``meta`` dict; atomic rename."""
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        tag, blob = _entry_bytes(arr, name in int4_keys)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                         "offset": offset, "nbytes": len(blob)})
        pad = (-len(blob)) % _ALIGN
        blobs.append(blob + b"\0" * pad)
        offset += len(blob) + pad
    header = dict(meta)
    header["tool_version"] = __version__
    header["tensors"] = manifest
    hb = json.dumps(header, sort_keys=True).encode()
    hb += b" " * ((-len(hb) - 16) % _ALIGN)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load(path):
    """Returns ``(arrays, meta)``. Raises :class:`CheckpointError` on a malformed file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        meta = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    base = 16 + hlen
    arrays = {}
    for t in meta.pop("tensors"):
        start = base + t["offset"]
        buf = data[start:start + t["nbytes"]]
        if len(buf) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["dtype"] == "int4":
            a = unpack_int4(buf, count)
        else:
            a = np.frombuffer(buf, np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiu" else t["dtype"])
            a = a.astype(a.dtype.newbyteorder("="))
        arrays[t["name"]] = a.reshape(t["shape"]).copy()
    return arrays, meta


def save_training_state(path, model, trainer, run_cfg, epoch, metrics=None, ranges=None):
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"optim/{k}": v for k, v in trainer.opt.state_arrays().items()})
    int4 = {f"model/{k}" for k in model.buffers() if k.endswith("condsum.wq")
            and run_cfg.model.mixer.encoded_bits <= 4}
    meta = {"config": run_cfg.to_dict(), "epoch": epoch, "step": trainer.opt.step_count,
            "metrics": metrics or {}, "activation_ranges": ranges or {}}
    save(path, arrays, meta, int4)


def split_state(arrays):
    model = {k[6:]: v for k, v in arrays.items() if k.startswith("model/")}
    optim = {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}
    return model, optim
