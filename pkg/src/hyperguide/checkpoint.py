"""Binary checkpoints: magic, version, JSON header, then raw little-endian arrays.

The layout is fully determined by the contents (sorted keys, no timestamps),
so saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HGCKPT\x00\x01"
VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class ComponentMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    component: str
    arrays: dict
    fingerprint: str = ""
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def fingerprint(obj) -> str:
    """sha256 over the canonical JSON form of a config-like object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        return dataclasses.asdict(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, set)):
        return list(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serialisable: {type(x).__name__}")


def _canon(a) -> tuple[str, np.ndarray]:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return "f8", np.require(a, "<f8", "C")
    if a.dtype.kind in "iu":
        return "i8", np.require(a, "<i8", "C")
    if a.dtype.kind == "b":
        return "b1", np.require(a, "|b1", "C")
    raise CheckpointError(f"unsupported array dtype {a.dtype}")


def encode(ck: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ck.arrays):
        code, arr = _canon(ck.arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "component": ck.component,
        "fingerprint": ck.fingerprint,
        "seed": ck.seed,
        "meta": ck.meta,
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_jsonable).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + payload


def decode(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CorruptCheckpoint("bad magic bytes")
    try:
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    except struct.error as exc:
        raise CorruptCheckpoint("truncated header") from exc
    if version != VERSION:
        raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint("unreadable header") from exc
    payload = data[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptCheckpoint("payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(tuple(e["shape"])).copy()
    return Checkpoint(header["component"], arrays, header["fingerprint"], header["seed"], header["meta"], version)


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path, component: str | None = None, expect_fingerprint: str | None = None,
                    force: bool = False) -> Checkpoint:
    """Read and validate a checkpoint; fingerprint mismatches need ``force``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ck = decode(path.read_bytes())
    if component is not None and ck.component != component:
        raise ComponentMismatch(f"{path} holds '{ck.component}', expected '{component}'")
    if expect_fingerprint is not None and ck.fingerprint != expect_fingerprint and not force:
        raise FingerprintMismatch(f"{path} was produced by a different configuration")
    return ck


def prefixed(groups: dict) -> dict:
    """Flatten {'a': {'x': arr}} into {'a/x': arr}."""
    return {f"{g}/{k}": v for g, d in groups.items() for k, v in d.items()}


def unprefix(arrays: dict, group: str) -> dict:
    p = group + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
