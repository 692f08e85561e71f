"""Binary checkpoint files with a JSON sidecar.

Layout (all little-endian)::

    b"CLABCKPT"  uint32 version  uint32 n_fields  int32[n_fields] ModelConfig fields
    uint32 n_tensors
    repeated: uint32 name_len, name (utf-8), uint32 rank, uint32[rank] dims, float32[prod(dims)]

The sidecar ``<file>.json`` holds the seed, optimiser hyper-parameters and the
AdamW moment estimates (base64 float32).
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"CLABCKPT"
VERSION = 1
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


class CheckpointError(ValueError):
    pass


def dumps(params: dict, cfg: ModelConfig) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(_CONFIG_FIELDS))]
    out.append(struct.pack(f"<{len(_CONFIG_FIELDS)}i", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    out.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes, dtype=np.float64) -> tuple[dict, ModelConfig]:
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    off = 8
    version, nf = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    vals = struct.unpack_from(f"<{nf}i", buf, off)
    off += 4 * nf
    if nf != len(_CONFIG_FIELDS):
        raise CheckpointError("config block does not match this build")
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, vals)))
    (nt,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(nt):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode()
        off += ln
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        params[name] = arr.astype(dtype)
    if off != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return params, cfg


def save(path, params: dict, cfg: ModelConfig, sidecar: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(params, cfg))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load(path, dtype=np.float64) -> tuple[dict, ModelConfig]:
    return loads(Path(path).read_bytes(), dtype)


def load_sidecar(path) -> dict:
    p = Path(str(path) + ".json")
    return json.loads(p.read_text()) if p.exists() else {}


def encode_state(step: int, m: dict, v: dict) -> dict:
    enc = lambda d: {k: base64.b64encode(np.asarray(a, "<f4").tobytes()).decode() for k, a in d.items()}
    shapes = {k: list(np.shape(a)) for k, a in m.items()}
    return {"step": step, "shapes": shapes, "m": enc(m), "v": enc(v)}


def decode_state(state: dict) -> tuple[int, dict, dict]:
    dec = lambda d: {k: np.frombuffer(base64.b64decode(s), "<f4").reshape(state["shapes"][k]).astype(np.float64)
                     for k, s in d.items()}
    return state["step"], dec(state["m"]), dec(state["v"])
