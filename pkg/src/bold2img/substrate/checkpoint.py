"""Binary tensor container and the checkpoint directory format.

One tensor per file: a little-endian header (magic, version, dtype code,
rank, dims) followed by the raw payload. A checkpoint is a directory with a
JSON manifest (names, shapes, dtypes, trainable flags, RNG seed, step
counter) plus one blob per parameter. The same container carries dataset
runs, rendered stimuli, and cached epochs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC = b"B2IT"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


def write_tensor(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, _CODES[arr.dtype]))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        version, code = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=_DTYPES[code])
        expected = int(np.prod(shape)) if ndim else 1
        if data.size != expected:
            raise ValueError(f"{path}: payload has {data.size} values, header says {expected}")
    return data.reshape(shape).astype(data.dtype.newbyteorder("="))


def _blob_name(param_name: str) -> str:
    return param_name.replace("/", "__") + ".bin"


def save_checkpoint(cdir, params: ParamStore, extra: dict | None = None):
    cdir = Path(cdir)
    cdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in params.names():
        t = params[name]
        write_tensor(cdir / _blob_name(name), t.data)
        entries.append(
            {
                "name": name,
                "file": _blob_name(name),
                "shape": list(t.data.shape),
                "dtype": str(t.data.dtype),
                "trainable": params.is_trainable(name),
            }
        )
    manifest = {"schema_version": 1, "tensors": entries, "extra": extra or {}}
    (cdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(cdir) -> tuple[ParamStore, dict]:
    cdir = Path(cdir)
    manifest = json.loads((cdir / "manifest.json").read_text())
    if manifest.get("schema_version") != 1:
        raise ValueError(f"{cdir}: unsupported checkpoint schema")
    params = ParamStore()
    for e in manifest["tensors"]:
        arr = read_tensor(cdir / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{e['name']}: blob shape {arr.shape} != manifest {e['shape']}")
        params.add(e["name"], arr, trainable=e["trainable"])
    return params, manifest["extra"]
