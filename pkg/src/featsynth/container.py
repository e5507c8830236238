"""Binary artifact containers.

Checkpoint layout: 8-byte magic "FGSMODL1", u32-LE length of a UTF-8 JSON
metadata document, the document itself, then one blob per parameter as
little-endian float32 in exactly the order the metadata lists.

Feature dump layout: 4-byte magic "FDMP", one version byte, u32-LE record
count, then per record: u32 C, u32 h, u32 w, a mask record (u32 H, u32 W,
H*W uint8 values), and C*h*w little-endian float32 feature values.
"""

import json
import struct

import numpy as np
import torch

from .errors import MissingArtifactError

MODEL_MAGIC = b"FGSMODL1"
DUMP_MAGIC = b"FDMP"
DUMP_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, modules: dict) -> None:
    """Serialize one or more modules; params are named '<prefix>.<param name>'."""
    entries = []
    blobs = []
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            arr = p.detach().cpu().to(torch.float32).contiguous().numpy()
            entries.append({"name": f"{prefix}.{name}", "shape": list(arr.shape)})
            blobs.append(arr.astype("<f4").tobytes())
    meta = json.dumps({"kind": kind, "config": config, "params": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (kind, config, params) with params[prefix][name] -> float32 ndarray."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise MissingArtifactError(f"checkpoint not found: {path}") from e
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:8]!r}")
    (meta_len,) = struct.unpack_from("<I", data, 8)
    meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
    pos = 12 + meta_len
    params: dict = {}
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        prefix, name = entry["name"].split(".", 1)
        params.setdefault(prefix, {})[name] = arr.astype(np.float32)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes in checkpoint")
    return meta["kind"], meta["config"], params


def load_into(module: torch.nn.Module, params: dict) -> None:
    """Copy a loaded parameter dict into a freshly constructed module."""
    own = dict(module.named_parameters())
    if set(own) != set(params):
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        raise ValueError(f"parameter name mismatch (missing={missing}, extra={extra})")
    with torch.no_grad():
        for name, p in own.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: shape {arr.shape} != expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))


def write_feature_dump(path, records) -> None:
    """records: iterable of (mask uint8 (H,W), feature float32 (C,h,w))."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(bytes([DUMP_VERSION]))
        f.write(struct.pack("<I", len(records)))
        for mask, feature in records:
            mask = np.asarray(mask, dtype=np.uint8)
            feature = np.asarray(feature, dtype=np.float32)
            c, h, w = feature.shape
            mh, mw = mask.shape
            f.write(struct.pack("<III", c, h, w))
            f.write(struct.pack("<II", mh, mw))
            f.write(mask.tobytes())
            f.write(feature.astype("<f4").tobytes())


def read_feature_dump(path):
    """Returns list of (mask uint8 (H,W), feature float32 (C,h,w))."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise MissingArtifactError(f"feature dump not found: {path}") from e
    if data[:4] != DUMP_MAGIC:
        raise ValueError(f"{path}: bad dump magic {data[:4]!r}")
    if data[4] != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    records = []
    for _ in range(count):
        c, h, w = struct.unpack_from("<III", data, pos)
        mh, mw = struct.unpack_from("<II", data, pos + 12)
        pos += 20
        mask = np.frombuffer(data, dtype=np.uint8, count=mh * mw, offset=pos).reshape(mh, mw)
        pos += mh * mw
        n = c * h * w
        feature = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(c, h, w)
        pos += 4 * n
        records.append((mask.copy(), feature.astype(np.float32)))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes in feature dump")
    return records
