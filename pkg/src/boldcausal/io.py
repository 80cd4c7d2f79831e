"""Binary tensor container, run configuration files and run manifests.

Container layout::

    b"CMB1" | uint32 version | uint64 header_len | JSON header | payload | uint32 crc32

The header maps each tensor name to ``{dtype, shape, offset, nbytes}``
(offsets relative to the payload start) and may carry a ``meta`` dict. The
CRC covers everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"CMB1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(IOError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays (little-endian) with a JSON header and CRC32 trailer."""
    header = {"tensors": {}, "meta": meta or {}}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        arr = np.ascontiguousarray(arr) if arr.ndim else arr   # keeps 0-d shapes
        if arr.dtype.kind not in "biuf":
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        header["tensors"][name] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                                   "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def read_container(path, with_meta: bool = False):
    """Read a container; raises a distinct error for bad version, truncation or CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 4:
        raise TruncatedContainerError(f"{path}: file too short for a container")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a container (bad magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, this reader handles {VERSION}")
    start = _PREFIX.size + hlen
    if start + 4 > len(blob):
        raise TruncatedContainerError(f"{path}: header runs past end of file")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    total_payload = sum(e["nbytes"] for e in header["tensors"].values()) if header else None
    if header is not None and start + total_payload + 4 > len(blob):
        raise TruncatedContainerError(f"{path}: payload truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch, file is corrupted")
    if header is None:
        raise ContainerError(f"{path}: unreadable header")
    if start + total_payload + 4 != len(blob):
        raise ContainerError(f"{path}: trailing bytes after payload")
    out = {}
    end_prev = 0
    for name, e in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
        if e["offset"] < end_prev or e["offset"] + e["nbytes"] > total_payload:
            raise ContainerError(f"{path}: tensor {name!r} has overlapping or out-of-range bytes")
        end_prev = e["offset"] + e["nbytes"]
        a = start + e["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)),
                            offset=a).reshape(e["shape"])
        out[name] = arr.astype(arr.dtype.newbyteorder("="))
    out = {name: out[name] for name in header["tensors"]}
    return (out, header.get("meta", {})) if with_meta else out


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """Flat key=value run configuration; defaults follow the reference recipe."""

    # encoder and optimisation
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    hidden_size: int = 64
    learning_rate_stage1: float = 1e-3
    learning_rate_stage2: float = 1e-3
    learning_rate_stage3: float = 1e-5
    batch_size: int = 128
    epochs: int = 100               # per curriculum stage
    weight_decay: float = 1e-2
    warmup_epochs: int = 5
    gradient_clip: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    # simulator
    n_roi: int = 4
    n_samples: int = 10000
    duration: float = 300.0
    dt: float = 0.1
    tr: float = 0.8
    # metrics
    tau_self: float = 0.1
    gc_order: int = 2
    gc_alpha: float = 0.05

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in cls.keys():
                raise KeyError(f"line {lineno}: unknown config key {key!r}")
            caster = int if types[key] in (int, "int") else float
            try:
                values[key] = caster(val)
            except ValueError:
                raise ValueError(f"line {lineno}: {key} expects {caster.__name__}, got {val!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def validate(self) -> None:
        for key in self.keys():
            v = getattr(self, key)
            if key not in ("seed", "dropout") and v <= 0:
                raise ValueError(f"{key} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate_stage3 >= self.learning_rate_stage1:
            raise ValueError("learning_rate_stage3 must be below learning_rate_stage1")

    def dumps(self) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.keys())

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}


# epochs count per stage: the desk budget of 60 is split evenly over the three stages
DESK_PRESET = {"d_model": 16, "d_state": 8, "hidden_size": 16, "batch_size": 32, "epochs": 20,
               "n_roi": 3, "n_samples": 500}


def desk_config(**overrides) -> RunConfig:
    return RunConfig(**{**DESK_PRESET, **overrides})


# -- manifests ---------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed: int | None, inputs=()) -> dict:
    """Record what is needed to repeat a run: command, config, seed and input digests."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
