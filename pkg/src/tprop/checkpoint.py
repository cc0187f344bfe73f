"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TPRP" | version u32 | record count u32
    record: kind tag u32 | array count u32 | arrays...
    array:  ndim u64 | shape u64 * ndim | float64 payload (C order)

Records are the forward modules in order followed by the feedback modules
``G^1 .. G^{N-1}``.  Arrays are stored as float64 so float32 networks
round-trip exactly as well.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .net import ConvBlock, ConvFeedback, FCLayer, LinearFeedback, Network

MAGIC = b"TPRP"
VERSION = 1
KIND_TAGS = {"conv": 1, "fc": 2, "fc_final": 3, "fb_linear": 16, "fb_direct": 17, "fb_conv": 18}


def _records(net: Network) -> list[tuple[int, list[np.ndarray]]]:
    recs = []
    for layer in net.layers:
        recs.append((KIND_TAGS[layer.kind], [layer.params["weight"], layer.params["bias"]]))
    for g in (net.feedback or [])[1:]:
        if isinstance(g, ConvFeedback):
            tag = KIND_TAGS["fb_conv"]
        else:
            tag = KIND_TAGS["fb_direct" if g.topology == "direct" else "fb_linear"]
        recs.append((tag, [g.weight]))
    return recs


def save_checkpoint(net: Network, path) -> None:
    recs = _records(net)
    parts = [MAGIC, struct.pack("<II", VERSION, len(recs))]
    for tag, arrays in recs:
        parts.append(struct.pack("<II", tag, len(arrays)))
        for a in arrays:
            parts.append(struct.pack(f"<Q{a.ndim}Q", a.ndim, *a.shape))
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> list[tuple[int, list[np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    recs = []
    for _ in range(count):
        tag, n_arrays = take("<II")
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = take("<Q")
            shape = take(f"<{ndim}Q")
            n = int(np.prod(shape))
            (raw,) = take(f"<{8 * n}s")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape))
        recs.append((tag, arrays))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes in checkpoint")
    return recs


def load_checkpoint(net: Network, path) -> None:
    """Load parameters in place into a network of the same architecture."""
    stored = read_checkpoint(path)
    expected = _records(net)
    if len(stored) != len(expected):
        raise FormatError(f"checkpoint has {len(stored)} records, network needs {len(expected)}")
    for i, ((tag, arrays), (etag, targets)) in enumerate(zip(stored, expected)):
        if tag != etag or len(arrays) != len(targets):
            raise FormatError(f"record {i}: kind tag {tag} does not match network module tag {etag}")
        for a, t in zip(arrays, targets):
            if a.shape != t.shape:
                raise FormatError(f"record {i}: stored shape {a.shape} != parameter shape {t.shape}")
    for (_, arrays), (_, targets) in zip(stored, expected):
        for a, t in zip(arrays, targets):
            t[...] = a
    net.invalidate()
