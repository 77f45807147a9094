"""Portable weight-file format and depth-agnostic weight transfer.

Binary layout (little-endian throughout):

    magic   5 bytes  "MP3DW"
    version u32      (currently 1)
    count   u32      number of entries
    entry:  name_len u16, name UTF-8, rank u8, extents u32 * rank,
            raw 32-bit float data (row-major)

Metadata (pooling policy, training slice count) rides along as a reserved
entry named "__meta__/json" holding UTF-8 JSON bytes widened to one float
per byte, keeping the container single-typed and parseable anywhere.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MP3DW"
VERSION = 1
META_KEY = "__meta__/json"


class WeightFormatError(Exception):
    pass


class WeightStore:
    """Ordered name -> float32 array map plus optional metadata dict."""

    def __init__(self, entries=None, metadata=None):
        self.entries = dict(entries or {})
        self.metadata = dict(metadata or {})

    @classmethod
    def from_model(cls, model, metadata=None):
        entries = {}
        for name, p in model.named_parameters():
            if name in entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            entries[name] = p.data.astype("<f4", copy=True)
        return cls(entries, metadata)

    def save(self, path):
        items = list(self.entries.items())
        if self.metadata:
            blob = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
            items.append((META_KEY, np.frombuffer(blob, dtype=np.uint8).astype("<f4")))
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(items)))
            for name, arr in items:
                name_b = name.encode("utf-8")
                arr = np.ascontiguousarray(arr, dtype="<f4")
                f.write(struct.pack("<H", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:5] != MAGIC:
            raise WeightFormatError(f"bad magic bytes in {path}")
        version, count = struct.unpack_from("<II", blob, 5)
        if version != VERSION:
            raise WeightFormatError(f"unsupported weight format version {version}")
        off = 13
        entries = {}
        metadata = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off:off + name_len].decode("utf-8")
                off += name_len
                (rank,) = struct.unpack_from("<B", blob, off)
                off += 1
                shape = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                n = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
                off += 4 * n
                if name == META_KEY:
                    metadata = json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))
                else:
                    entries[name] = arr.copy()
        except (struct.error, ValueError) as e:
            raise WeightFormatError(f"truncated or corrupt weight file {path}: {e}") from e
        if off != len(blob):
            raise WeightFormatError(f"trailing bytes in weight file {path}")
        return cls(entries, metadata)


def save_weights(model, path, metadata=None):
    WeightStore.from_model(model, metadata).save(path)


def load_weights(model, store: WeightStore, strict=True):
    """Copy store values into matching model parameters.

    Returns {"matched": [...], "missing": [...], "unexpected": [...]}.
    Strict mode requires an exact name-set match; a shape mismatch is
    always an error naming the parameter.
    """
    params = dict(model.named_parameters())
    matched, missing = [], []
    for name, p in params.items():
        if name in store.entries:
            arr = store.entries[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for parameter {name!r}: "
                                 f"store {tuple(arr.shape)} vs model {tuple(p.shape)}")
            matched.append(name)
        else:
            missing.append(name)
    unexpected = [n for n in store.entries if n not in params]
    if strict and (missing or unexpected):
        raise ValueError(f"strict load failed: {len(missing)} missing {missing[:5]}, "
                         f"{len(unexpected)} unexpected {unexpected[:5]}")
    for name in matched:
        p = params[name]
        p.data = store.entries[name].astype(p.dtype, copy=True)
    return {"matched": matched, "missing": missing, "unexpected": unexpected}


class DepthTransferError(Exception):
    pass


def _widen_group_weight(arr, target_depth):
    """Center-align a group-transform depth-mixing weight [C, Ds, 1, 1, 1]
    into depth Dk, zero elsewhere (crop symmetrically when narrowing)."""
    c, ds = arr.shape[0], arr.shape[1]
    dk = target_depth
    if ds == dk:
        return arr.copy()
    out = np.zeros((c, dk) + arr.shape[2:], dtype=arr.dtype)
    if dk > ds:
        lo = (dk - ds) // 2
        out[:, lo:lo + ds] = arr
    else:
        lo = (ds - dk) // 2
        out[:] = arr[:, lo:lo + dk]
    return out


def transfer_depth(store: WeightStore, model, strict=True):
    """Initialize a model with any odd slice count from a store trained at
    a (possibly different) slice count.

    Backbone, neck, and head parameter shapes are depth-independent under
    the anisotropic pooling policy and load unchanged; the per-stage
    group-transform mixing weights are re-laid-out center-aligned. Stores
    trained under the isotropic policy are rejected: their shapes may
    match, but the weights were learned on a collapsed slice axis.
    """
    policy = store.metadata.get("pooling_policy")
    if policy is None:
        raise DepthTransferError("store has no pooling-policy metadata; cannot verify "
                                 "it was trained with depth-preserving pooling")
    if policy != "anisotropic":
        raise DepthTransferError(
            f"store was trained with {policy!r} pooling: the slice axis collapsed during "
            "training, so these weights are not depth-transferable even though shapes match")
    params = dict(model.named_parameters())
    adapted = {}
    for name, arr in store.entries.items():
        if name in params and "conversions." in name and name.endswith("conv.weight") \
                and tuple(arr.shape) != tuple(params[name].shape):
            target = params[name]
            c, dk = target.shape[0], target.shape[1]
            if arr.shape[0] != c:
                raise DepthTransferError(f"channel mismatch on {name!r}: "
                                         f"{arr.shape[0]} vs {c}")
            adapted[name] = _widen_group_weight(arr, dk)
        else:
            adapted[name] = arr
    return load_weights(model, WeightStore(adapted, store.metadata), strict=strict)
