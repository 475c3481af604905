"""Binary container for trained networks and optional task masks.

Layout (all integers little-endian)::

    magic b"STEN" | u16 version | u32 n_networks
    per network: u32 len | canonical architecture text (utf-8) | u32 n_heads
                 u32 n_tensors | per tensor: u8 ndim, u32 dims..., float64 data
    u8 has_ledger | mask ledger bytes
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .continual import MaskLedger
from .errors import FormatError
from .network import Architecture, Network, build_network

MAGIC = b"STEN"
VERSION = 1


def _tensor_bytes(a: np.ndarray) -> bytes:
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def dumps(networks: Sequence[Network], ledger: MaskLedger | None = None) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(networks))]
    for net in networks:
        text = net.arch.canonical_text().encode()
        state = net.state()
        out += [struct.pack("<I", len(text)), text, struct.pack("<II", len(net.heads), len(state))]
        out += [_tensor_bytes(a) for a in state]
    out.append(struct.pack("<B", ledger is not None))
    if ledger is not None:
        out.append(ledger.to_bytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError("model file truncated", self.pos)
        values = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("model file truncated", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk


def loads(blob: bytes) -> tuple[list[Network], MaskLedger | None]:
    r = _Reader(blob)
    if r.raw(4) != MAGIC:
        raise FormatError("not a model file (bad magic)", 0)
    version, n_networks = r.take("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}", 4)
    networks = []
    for _ in range(n_networks):
        (length,) = r.take("<I")
        at = r.pos
        try:
            arch = Architecture.from_dict(json.loads(r.raw(length).decode()))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad architecture text: {exc}", at) from None
        n_heads, n_tensors = r.take("<II")
        state = []
        for _ in range(n_tensors):
            (ndim,) = r.take("<B")
            shape = r.take(f"<{ndim}I")
            count = int(np.prod(shape))
            state.append(np.frombuffer(r.raw(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
        net = build_network(arch, 0, n_heads)
        try:
            net.load_state(state)
        except ValueError as exc:
            raise FormatError(f"tensor layout does not match architecture: {exc}", at) from None
        networks.append(net)
    (has_ledger,) = r.take("<B")
    ledger = None
    if has_ledger:
        ledger, r.pos = MaskLedger.from_bytes(blob, r.pos)
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", r.pos)
    return networks, ledger


def save_model(path: str | Path, networks: Sequence[Network], ledger: MaskLedger | None = None) -> None:
    Path(path).write_bytes(dumps(networks, ledger))


def load_model(path: str | Path) -> tuple[list[Network], MaskLedger | None]:
    return loads(Path(path).read_bytes())
