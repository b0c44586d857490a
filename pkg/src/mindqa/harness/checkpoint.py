"""Single-file checkpoints: magic, JSON manifest, then raw little-endian float32 tensors."""

import hashlib
import json
import struct
import warnings
from pathlib import Path

import numpy as np

MAGIC = b"MINDCKPT"
VERSION = 1
_LEN = struct.Struct("<I")


class CheckpointError(RuntimeError):
    pass


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors, model, config=None, meta=None):
    """Write ``tensors`` (name -> array) atomically; arrays are stored as '<f4'."""
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "model": model,
        "version": VERSION,
        "config_hash": config_hash(config) if config is not None else None,
        "meta": meta or {},
        "tensors": index,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return manifest


def read_manifest(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse(raw, path)[0]


def _parse(raw, path):
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + _LEN.size
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = _LEN.unpack(raw[len(MAGIC):start])
    if len(raw) < start + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CheckpointError(f"{path}: corrupt manifest (no tensor index)")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    return manifest, raw[start + n:]


def load_checkpoint(path, model=None, expect=None, config=None):
    """Return (tensors, manifest).

    ``expect`` maps names to shapes the current configuration requires; a
    missing tensor or a shape mismatch is an error. A differing config hash
    only warns.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read ({e.strerror})") from None
    manifest, body = _parse(raw, path)
    if model is not None and manifest.get("model") != model:
        raise CheckpointError(f"{path}: holds model {manifest.get('model')!r}, wanted {model!r}")
    tensors = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated data for tensor {entry['name']}")
        arr = np.frombuffer(body[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    if expect is not None:
        for name, shape in expect.items():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {tuple(tensors[name].shape)}, config needs {tuple(shape)}")
    if config is not None and manifest.get("config_hash") not in (None, config_hash(config)):
        warnings.warn(f"{path}: config hash differs from the current run", stacklevel=2)
    return tensors, manifest


def split_groups(tensors):
    """{'vae/enc.w': x} -> {'vae': {'enc.w': x}}."""
    out = {}
    for name, arr in tensors.items():
        group, _, key = name.partition("/")
        out.setdefault(group, {})[key] = arr
    return out


def join_groups(groups):
    return {f"{g}/{k}": v for g, params in groups.items() for k, v in params.items()}
