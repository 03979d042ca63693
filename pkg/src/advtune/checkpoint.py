"""Versioned checkpoint container.

A checkpoint is a zip archive (stored, fixed timestamps) with three members:
``meta.json``, ``params.bin`` and optionally ``optimizer.pt``. ``params.bin``
is a deterministic encoding of the model state: a length-prefixed JSON
header followed by the raw little-endian tensor bytes in sorted-name order,
so save -> load -> save reproduces the payload byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
PHASES = ("standard", "robust")
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    parameters: dict[str, torch.Tensor]
    phase: str
    epoch: int = 0
    optimizer_state: dict | None = None
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")


def encode_state(state: dict[str, torch.Tensor]) -> bytes:
    header, chunks, offset = {}, [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        header[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode_state(payload: bytes) -> dict[str, torch.Tensor]:
    (n,) = struct.unpack_from("<Q", payload)
    header = json.loads(payload[8 : 8 + n])
    body = memoryview(payload)[8 + n :]
    state = {}
    for name, info in header.items():
        raw = body[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return state


def payload_digest(state: dict[str, torch.Tensor]) -> str:
    return hashlib.sha256(encode_state(state)).hexdigest()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomically write ``ckpt`` to ``path``."""
    params = encode_state(ckpt.parameters)
    meta = {
        "format_version": ckpt.format_version,
        "phase": ckpt.phase,
        "epoch": ckpt.epoch,
        "fingerprint": ckpt.fingerprint,
        "params_sha256": hashlib.sha256(params).hexdigest(),
        "extra": ckpt.extra,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        _write_member(zf, "params.bin", params)
        if ckpt.optimizer_state is not None:
            buf = io.BytesIO()
            torch.save(ckpt.optimizer_state, buf)
            _write_member(zf, "optimizer.pt", buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["format_version"] > FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {meta['format_version']}")
        params = zf.read("params.bin")
        if hashlib.sha256(params).hexdigest() != meta["params_sha256"]:
            raise CheckpointError(f"parameter payload of {path} is corrupt")
        opt = None
        if "optimizer.pt" in zf.namelist():
            opt = torch.load(io.BytesIO(zf.read("optimizer.pt")), weights_only=True)
    return Checkpoint(
        parameters=decode_state(params),
        phase=meta["phase"],
        epoch=meta["epoch"],
        optimizer_state=opt,
        fingerprint=meta["fingerprint"],
        extra=meta["extra"],
        format_version=meta["format_version"],
    )


def read_payload(path) -> bytes:
    with zipfile.ZipFile(path) as zf:
        return zf.read("params.bin")
