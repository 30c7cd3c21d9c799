"""Binary container formats.

Both checkpoints and corpus files share the same record framing:

    record := name_len:u32 | name:utf8 | dtype_tag:u8 | ndim:u32
              | dims:u64[ndim] | raw little-endian values

Checkpoint layout (magic ``ZIPFLOW1``):

    magic:8 | format_version:u32 | config_json (u32 len + utf8)
    | n_params:u32 | param records
    | has_optimizer:u8 [ | adam step:u64 lr,b1,b2,eps:f64 | n:u32 | m records | v records ]
    | rng_json (u32 len + utf8, may be empty)
    | step:u64

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"ZIPFLOW1"
CORPUS_MAGIC = b"ZIPCORP1"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_u32(f) -> int:
    return struct.unpack("<I", f.read(4))[0]


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    _write_u32(f, len(raw))
    f.write(raw)


def _read_str(f) -> str:
    n = _read_u32(f)
    return f.read(n).decode("utf-8")


def write_record(f, name: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"record {name!r}: unsupported dtype {array.dtype}")
    _write_str(f, name)
    f.write(struct.pack("<B", _DTYPE_TAGS[array.dtype]))
    _write_u32(f, array.ndim)
    for d in array.shape:
        f.write(struct.pack("<Q", d))
    f.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_record(f) -> tuple[str, np.ndarray]:
    name = _read_str(f)
    (tag,) = struct.unpack("<B", f.read(1))
    if tag not in _TAG_DTYPES:
        raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    ndim = _read_u32(f)
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    return name, arr.reshape(shape)


@dataclass
class Checkpoint:
    """In-memory checkpoint: config dict, named parameter arrays, optional
    optimizer state, RNG state JSON, and the training step counter."""

    config: dict
    params: dict
    optimizer: dict | None = None  # {"step", "lr", "beta1", "beta2", "eps", "m", "v"}
    rng_state: dict | None = None
    step: int = 0
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_u32(f, ckpt.format_version)
        _write_str(f, json.dumps(ckpt.config, sort_keys=True))
        _write_u32(f, len(ckpt.params))
        for name in sorted(ckpt.params):
            write_record(f, name, ckpt.params[name])
        if ckpt.optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            opt = ckpt.optimizer
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", opt["step"]))
            f.write(struct.pack("<dddd", opt["lr"], opt["beta1"], opt["beta2"], opt["eps"]))
            _write_u32(f, len(opt["m"]))
            for name in sorted(opt["m"]):
                write_record(f, name, opt["m"][name])
            for name in sorted(opt["v"]):
                write_record(f, name, opt["v"][name])
        _write_str(f, json.dumps(ckpt.rng_state) if ckpt.rng_state else "")
        f.write(struct.pack("<Q", ckpt.step))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        config = json.loads(_read_str(f))
        n = _read_u32(f)
        params = dict(read_record(f) for _ in range(n))
        (has_opt,) = struct.unpack("<B", f.read(1))
        optimizer = None
        if has_opt:
            (opt_step,) = struct.unpack("<Q", f.read(8))
            lr, b1, b2, eps = struct.unpack("<dddd", f.read(32))
            n_opt = _read_u32(f)
            m = dict(read_record(f) for _ in range(n_opt))
            v = dict(read_record(f) for _ in range(n_opt))
            optimizer = {"step": opt_step, "lr": lr, "beta1": b1, "beta2": b2,
                         "eps": eps, "m": m, "v": v}
        rng_raw = _read_str(f)
        rng_state = json.loads(rng_raw) if rng_raw else None
        (step,) = struct.unpack("<Q", f.read(8))
        return Checkpoint(config, params, optimizer, rng_state, step, version)


@dataclass
class RecordContainer:
    """Generic named-array container with a JSON header (corpus files)."""

    magic: bytes
    header: dict
    records: dict = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.magic)
            _write_u32(f, FORMAT_VERSION)
            _write_str(f, json.dumps(self.header, sort_keys=True))
            _write_u32(f, len(self.records))
            for name in sorted(self.records):
                write_record(f, name, self.records[name])

    @classmethod
    def load(cls, path, expected_magic: bytes) -> "RecordContainer":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != expected_magic:
                raise CheckpointError(
                    f"bad magic {magic!r}; expected {expected_magic!r}"
                )
            version = _read_u32(f)
            if version != FORMAT_VERSION:
                raise CheckpointError(f"unsupported container version {version}")
            header = json.loads(_read_str(f))
            n = _read_u32(f)
            records = dict(read_record(f) for _ in range(n))
            return cls(magic, header, records)
