"""Binary checkpoint format.

Layout: ``FCBF`` magic, uint32 format version, uint64 header length, a UTF-8
JSON header, then raw little-endian tensor bytes at the offsets listed in
the header's tensor directory (offsets are relative to the end of the header).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelConfig, param_shapes
from .optim import OptimState
from .params import ParamStore

MAGIC = b"FCBF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    """Base class for unreadable or incompatible checkpoints."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    epoch: int = 0
    val_mdice: float = 0.0
    seed: int = 0
    optimizer: OptimState | None = None
    extra: dict = field(default_factory=dict)


def _entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", t.data) for k, t in ckpt.params.items()]
    if ckpt.optimizer is not None:
        for k in sorted(ckpt.optimizer.m):
            out.append((f"adam_m/{k}", ckpt.optimizer.m[k]))
            out.append((f"adam_v/{k}", ckpt.optimizer.v[k]))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = _entries(ckpt)
    directory, offset = [], 0
    for name, arr in entries:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        directory.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                          "offset": offset, "nbytes": le.nbytes})
        offset += le.nbytes
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "val_mdice": ckpt.val_mdice,
        "seed": ckpt.seed,
        "optimizer": None if ckpt.optimizer is None else ckpt.optimizer.hyperparams(),
        "extra": ckpt.extra,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if MAGIC.startswith(raw[:4]):
            raise CheckpointTruncatedError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header: {exc}") from exc
    return header, raw[start + hlen:]


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, checking tensor shapes against its (or the expected) config."""
    header, body = read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: invalid model config in header: {exc}") from exc
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointTruncatedError(f"{path}: truncated while reading {entry['name']!r}")
        arr = np.frombuffer(body, dtype=np.dtype(entry["dtype"]), offset=entry["offset"],
                            count=entry["nbytes"] // np.dtype(entry["dtype"]).itemsize)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(
            np.dtype(entry["dtype"]).newbyteorder("="))
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}

    target = expect_config if expect_config is not None else config
    expected = param_shapes(target)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
        detail = "; ".join(f"{label}: {names[:3]}{'...' if len(names) > 3 else ''}"
                           for label, names in (("missing", missing), ("unexpected", extra),
                                                ("wrong shape", wrong)) if names)
        raise CheckpointShapeError(f"{path}: parameters do not match the model config ({detail})")

    optimizer = None
    if header.get("optimizer") is not None:
        hp = header["optimizer"]
        optimizer = OptimState(lr=hp["lr"], betas=tuple(hp["betas"]), eps=hp["eps"],
                               weight_decay=hp["weight_decay"], step=hp["step"])
        for k, v in tensors.items():
            if k.startswith("adam_m/"):
                optimizer.m[k[7:]] = v
            elif k.startswith("adam_v/"):
                optimizer.v[k[7:]] = v
    return Checkpoint(config=target, params=ParamStore(params), epoch=header["epoch"],
                      val_mdice=header["val_mdice"], seed=header["seed"], optimizer=optimizer,
                      extra=header.get("extra", {}))
