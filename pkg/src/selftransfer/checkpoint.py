"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STLW" | u32 version | u32 tensor_count
    per tensor: u16 name_len | name | u8 ndim | u32 dim * ndim | float32 data
    footer:     i32 epoch | f64 val_accuracy
                u32 rng_count, per stream: u16 name_len | name | u64 seed | u64 counter
                u32 config_len | network config text (utf-8)
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError
from .network import NetworkConfig, STLNet, config_to_text, parse_config_text

MAGIC = b"STLW"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict
    epoch: int = -1
    val_accuracy: float = float("nan")
    rng_states: dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, net: STLNet, epoch=-1, val_accuracy=float("nan"), rng_states=None):
        return cls(net.config, net.state_dict(), epoch, val_accuracy, dict(rng_states or {}))

    def to_net(self, dtype=np.float32) -> STLNet:
        net = STLNet(self.config, dtype)
        apply_checkpoint(net, self)
        return net


def apply_checkpoint(net: STLNet, ckpt: Checkpoint):
    """Copy tensors into ``net``; the first missing or mis-shaped tensor raises."""
    for p in net.params:
        if p.name not in ckpt.params:
            raise ConfigError(f"checkpoint has no tensor {p.name!r}")
        v = ckpt.params[p.name]
        if v.shape != p.value.shape:
            raise ConfigError(f"tensor {p.name!r}: checkpoint shape {v.shape} does not match "
                              f"network shape {p.value.shape}")
    for p in net.params:
        p.value[...] = ckpt.params[p.name]


def _name(buf: io.BytesIO, text: str, width="<H"):
    raw = text.encode("utf-8")
    buf.write(struct.pack(width, len(raw)))
    buf.write(raw)


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ckpt.params)))
    for name, value in ckpt.params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        _name(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    buf.write(struct.pack("<id", int(ckpt.epoch), float(ckpt.val_accuracy)))
    buf.write(struct.pack("<I", len(ckpt.rng_states)))
    for name, (seed, counter) in sorted(ckpt.rng_states.items()):
        _name(buf, name)
        buf.write(struct.pack("<QQ", seed, counter))
    _name(buf, config_to_text(ckpt.config), "<I")
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError("checkpoint is truncated", self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, width="<H") -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise LoadError("corrupt name in checkpoint", self.path) from None


def decode(data: bytes, path=None) -> Checkpoint:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise LoadError("not a checkpoint (bad magic)", path)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version}", path)
    params = {}
    for _ in range(count):
        name = r.text()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    epoch, val = r.unpack("<id")
    (n_rng,) = r.unpack("<I")
    rngs = {}
    for _ in range(n_rng):
        name = r.text()
        rngs[name] = r.unpack("<QQ")
    text = r.text("<I")
    if r.pos != len(data):
        raise LoadError("trailing bytes after checkpoint footer", path)
    try:
        config = parse_config_text(text, f"{path}:config")
    except ConfigError as exc:
        raise LoadError(f"embedded network config is invalid: {exc}", path) from None
    return Checkpoint(config, params, epoch, val, rngs)


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected: NetworkConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` also verify every tensor shape."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint: {exc.strerror}", path) from None
    ckpt = decode(data, path)
    if expected is not None:
        apply_checkpoint(STLNet(expected), ckpt)
    return ckpt
