"""DSM1 checkpoints: a flat list of named float32 tensors.

Layout (little-endian): ``b"DSM1"``, u32 record count, then per record a u16
name length, the UTF-8 name, a u8 rank, u32 dims, and the float32 payload.
Architecture hyperparameters travel as ``meta.*`` records.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .cons_stream import ConsistencyModel
from .sens_stream import MODES as SENS_MODES
from .sens_stream import SensitivityModel
from .training import UnifiedModel

MAGIC = b"DSM1"
KINDS = ("sens", "cons", "unified")


class CheckpointError(ValueError):
    pass


def _meta(model) -> dict[str, float]:
    meta = {"meta.kind": KINDS.index(model.kind), "meta.d": model.d}
    if model.kind == "sens":
        meta["meta.mode"] = SENS_MODES.index(model.mode)
        meta["meta.t_max"] = model.positional_embedding.t_max
    elif model.kind == "cons":
        meta["meta.K"] = model.K
        meta["meta.t_max"] = model.positional_embedding.t_max
    else:
        meta["meta.K"] = model.K
    return meta


def save_checkpoint(model, path) -> None:
    records = [(k, np.array([v], dtype="<f4")) for k, v in _meta(model).items()]
    records += [(k, v.detach().cpu().numpy().astype("<f4")) for k, v in model.state_dict().items()]
    buf = bytearray(MAGIC + struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def read_records(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    try:
        (n,) = struct.unpack_from("<I", data, 4)
        off = 8
        out = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {off}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record table") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes at {off}")
    return out


def load_checkpoint(path):
    rec = read_records(path)
    try:
        kind = KINDS[int(rec.pop("meta.kind")[0])]
        d = int(rec.pop("meta.d")[0])
        if kind == "sens":
            model = SensitivityModel(d, SENS_MODES[int(rec.pop("meta.mode")[0])], t_max=int(rec.pop("meta.t_max")[0]))
        elif kind == "cons":
            model = ConsistencyModel(d, int(rec.pop("meta.K")[0]), t_max=int(rec.pop("meta.t_max")[0]))
        else:
            model = UnifiedModel(d, int(rec.pop("meta.K")[0]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata record {exc}") from exc
    state = {k: torch.from_numpy(v) for k, v in rec.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return model
