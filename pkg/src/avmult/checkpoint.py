"""Versioned binary checkpoints.

Layout (little-endian)::

    b"MMCK" | u32 version | u32 n | n bytes of JSON metadata (sorted keys)
    | u32 tensor count | per tensor: u32 name length, name (utf-8),
      u32 rank, rank x u32 dims, prod(dims) f32 values

Tensor order is preserved, so encoding a decoded checkpoint reproduces the
original bytes.  Optimizer moments live next to the parameters under
``optim/m/<name>`` and ``optim/v/<name>``.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"MMCK"
VERSION = 1
_U32 = struct.Struct("<I")
MOMENT_PREFIXES = ("optim/m/", "optim/v/")


@dataclasses.dataclass
class Checkpoint:
    meta: dict
    tensors: OrderedDict

    def params(self):
        """Model parameters only, without optimizer moments."""
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith("optim/"))

    def moments(self, kind):
        prefix = f"optim/{kind}/"
        return OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))


def _json_bytes(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(ckpt):
    out = [MAGIC, _U32.pack(VERSION)]
    header = _json_bytes(ckpt.meta)
    out += [_U32.pack(len(header)), header, _U32.pack(len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            if not np.array_equal(arr.astype(np.float32), arr):
                raise ValueError(f"tensor {name!r} is {arr.dtype} and does not survive a float32 round trip")
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        out += [_U32.pack(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.blob) - self.pos} left", offset=self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode(blob):
    r = _Reader(bytes(blob))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    n = r.u32("metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata block: {exc}", offset=at) from None
    if not isinstance(meta, dict):
        raise FormatError("metadata is not a JSON object", offset=at)
    tensors = OrderedDict()
    for _ in range(r.u32("tensor count")):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", offset=at) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=at)
        rank = r.u32("rank")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name!r}", offset=r.pos - 4)
        shape = tuple(r.u32("dim") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = r.take(4 * count, f"values of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes", offset=r.pos)
    return Checkpoint(meta, tensors)


def save(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def from_training(model, meta, optimizer=None):
    """Snapshot ``model`` parameters (and Adam moments, if given) with ``meta``."""
    tensors = OrderedDict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for kind in ("m", "v"):
            for p, buf in zip(optimizer.params, optimizer.state[kind]):
                tensors[f"optim/{kind}/{names[id(p)]}"] = buf
        meta = dict(meta, optim_step=int(optimizer.state["step"]))
    return Checkpoint(dict(meta), OrderedDict((k, np.array(v, copy=True)) for k, v in tensors.items()))


def restore_optimizer(ckpt, model, optimizer):
    """Load the stored Adam moments and step counter into ``optimizer``."""
    names = {id(p): n for n, p in model.named_parameters()}
    state = {"step": int(ckpt.meta.get("optim_step", 0)), "m": [], "v": []}
    for kind in ("m", "v"):
        stored = ckpt.moments(kind)
        for p in optimizer.params:
            name = names[id(p)]
            if name not in stored:
                raise FormatError(f"checkpoint has no optimizer moment {kind} for {name!r}")
            state[kind].append(stored[name].astype(p.data.dtype, copy=True))
    optimizer.state = state


def config_diff(expected, found, prefix=""):
    """Field-by-field differences between two nested config dicts, one string per field."""
    lines = []
    for key in sorted(set(expected) | set(found)):
        name = f"{prefix}{key}"
        if key not in found:
            lines.append(f"{name}: expected {expected[key]!r}, missing in checkpoint")
        elif key not in expected:
            lines.append(f"{name}: unexpected field with value {found[key]!r}")
        elif isinstance(expected[key], dict) and isinstance(found[key], dict):
            lines.extend(config_diff(expected[key], found[key], name + "."))
        elif expected[key] != found[key]:
            lines.append(f"{name}: expected {expected[key]!r}, checkpoint has {found[key]!r}")
    return lines


def check_config(expected, found, what="model config"):
    diff = config_diff(expected, found)
    if diff:
        raise ConfigError(f"{what} mismatch:\n  " + "\n  ".join(diff))
