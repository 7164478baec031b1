"""Versioned checkpoint container.

Layout: magic ``S2SCKPT1``, little-endian u32 header length, JSON header,
then a little-endian f32 payload holding every named array back to back.
The header lists each array's name, shape and element offset, together
with the model config, training config, seed, step and epoch counters.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import VersionError

MAGIC = b"S2SCKPT1"
FORMAT_VERSION = 1


def write_checkpoint(path, arrays, meta):
    names = list(arrays)
    entries, chunks, offset = [], [], 0
    for name in names:
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = dict(meta, format_version=FORMAT_VERSION, tensors=entries)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise VersionError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = np.frombuffer(raw[12 + n:], dtype="<f4")
    arrays = {}
    for e in header.pop("tensors"):
        a = payload[e["offset"]:e["offset"] + e["count"]]
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    return arrays, header


def model_arrays(model):
    return {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def optimizer_arrays(model, optimizer):
    out, steps = {}, {}
    for name, p in model.named_parameters():
        st = optimizer.state.get(p)
        if not st:
            continue
        out[f"adam.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
        out[f"adam.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
        steps[name] = float(st["step"])
    return out, steps


def load_model_arrays(model, arrays):
    state = model.state_dict()
    missing = [k for k in state if f"model.{k}" not in arrays]
    if missing:
        raise VersionError(f"checkpoint lacks parameters {missing[:3]}...")
    with torch.no_grad():
        for k, v in state.items():
            a = arrays[f"model.{k}"]
            if tuple(a.shape) != tuple(v.shape):
                raise VersionError(f"parameter {k} has shape {a.shape}, model expects {tuple(v.shape)}")
            v.copy_(torch.from_numpy(a).to(v.dtype))


def load_optimizer_arrays(model, optimizer, arrays, steps):
    for name, p in model.named_parameters():
        if name not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[name], dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"adam.exp_avg.{name}"]).to(p.dtype).clone(),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.exp_avg_sq.{name}"]).to(p.dtype).clone(),
        }
