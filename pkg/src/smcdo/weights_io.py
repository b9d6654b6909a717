"""Flat binary weight files.

Layout (all integers little-endian u32, payloads little-endian float64):

    magic "SMCDO1" | layer count
    per layer: kind tag | array count | per array: ndim, dims..., payload

Only parameter-bearing layers are stored, in layer-index order. The format
is deliberately dumb so files round-trip byte-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .graph import KIND_BATCHNORM, KIND_CONV, KIND_DENSE, ModelGraph
from .ops import BatchNormParams, ConvParams, DenseParams

MAGIC = b"SMCDO1"

KIND_TAGS = {KIND_CONV: 1, KIND_BATCHNORM: 2, KIND_DENSE: 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def _arrays_of(kind: str, params) -> list[np.ndarray]:
    if kind == KIND_CONV or kind == KIND_DENSE:
        return [params.weights, params.bias]
    return [params.gamma, params.beta, params.running_mean, params.running_var]


def weight_entries(graph: ModelGraph) -> list[tuple[str, list[np.ndarray]]]:
    """(kind, arrays) per parameterized layer, in layer-index order."""
    out = []
    for idx, layer in enumerate(graph.layers):
        if layer.kind in KIND_TAGS:
            out.append((layer.kind, _arrays_of(layer.kind, graph.weights[idx])))
    return out


def save_weights(path, entries: list[tuple[str, list[np.ndarray]]]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for kind, arrays in entries:
        chunks.append(struct.pack("<II", KIND_TAGS[kind], len(arrays)))
        for arr in arrays:
            arr = np.asarray(arr, dtype="<f8")
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: truncated weight file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path) -> list[tuple[str, list[np.ndarray]]]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: bad magic, not a weight file")
    entries = []
    for _ in range(r.u32()):
        tag = r.u32()
        if tag not in TAG_KINDS:
            raise DataError(f"{path}: unknown layer kind tag {tag}")
        arrays = []
        for _ in range(r.u32()):
            ndim = r.u32()
            if ndim > 8:
                raise DataError(f"{path}: implausible array rank {ndim}")
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = r.take(8 * count)
            arrays.append(np.frombuffer(payload, dtype="<f8").reshape(shape).copy())
        entries.append((TAG_KINDS[tag], arrays))
    if r.pos != len(blob):
        raise DataError(f"{path}: trailing bytes after weight payload")
    return entries


def save_graph_weights(graph: ModelGraph, path) -> None:
    save_weights(path, weight_entries(graph))


def load_graph_weights(graph: ModelGraph, path) -> None:
    """Load a weight file into a graph with matching architecture, in place."""
    entries = load_weights(path)
    targets = [(idx, layer.kind) for idx, layer in enumerate(graph.layers)
               if layer.kind in KIND_TAGS]
    if len(entries) != len(targets):
        raise DataError(
            f"{path}: file has {len(entries)} parameterized layers, "
            f"graph has {len(targets)}"
        )
    for (kind, arrays), (idx, want_kind) in zip(entries, targets):
        if kind != want_kind:
            raise DataError(f"{path}: layer {idx} is {want_kind}, file says {kind}")
        current = _arrays_of(kind, graph.weights[idx])
        if len(arrays) != len(current):
            raise DataError(f"{path}: layer {idx} array count mismatch")
        for have, got in zip(current, arrays):
            if have.shape != got.shape:
                raise DataError(
                    f"{path}: layer {idx} shape mismatch {got.shape} vs {have.shape}"
                )
            have[...] = got
