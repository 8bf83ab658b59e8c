"""SPCK checkpoint container.

Layout (little-endian)::

    b"SPCK"  u32 version
    u32 len, architecture descriptor (UTF-8)
    u32 tensor_count
    per tensor: u16 len, name (UTF-8), u8 rank, rank x u32 dims, f32 payload
    optional sections, each introduced by a 4-byte tag:
      b"PCA1" u32 D, u32 N, mean (D f32), components (N*D f32),
              variances (N f32), total_variance (f64)
      b"KMN1" u32 K, u32 N, centroids (K*N f32)

Tensors named ``buffer:<name>`` are batchnorm running statistics.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FormatError, VersionError
from ..pca import PcaModel
from .model import Architecture, CnnModel, _param_shapes

MAGIC = b"SPCK"
VERSION = 1
_BUFFER_PREFIX = "buffer:"


@dataclass
class Checkpoint:
    model: CnnModel
    pca: Optional[PcaModel] = None
    centroids: Optional[np.ndarray] = None


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _tensor_record(name, a) -> bytes:
    enc = name.encode("utf-8")
    a = np.asarray(a)
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + _f32(a)


def save_checkpoint(model: CnnModel, path, pca: Optional[PcaModel] = None,
                    centroids=None) -> None:
    """Write the model (and optional PCA / centroid sections) to ``path``.

    The file is written to a temporary sibling and renamed into place.
    """
    desc = f"{model.arch.describe()};seed={model.seed_used}".encode("utf-8")
    tensors = [(n, model.params[n]) for n in model.params]
    tensors += [(_BUFFER_PREFIX + n, model.buffers[n]) for n in model.buffers]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(tensors))]
    parts += [_tensor_record(n, a) for n, a in tensors]
    if pca is not None:
        d, n = pca.input_dim, pca.n_components
        parts += [b"PCA1", struct.pack("<II", d, n), _f32(pca.mean), _f32(pca.components),
                  _f32(pca.explained_variance), struct.pack("<d", pca.total_variance)]
    if centroids is not None:
        c = np.asarray(centroids)
        parts += [b"KMN1", struct.pack("<II", *c.shape), _f32(c)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count, shape=None):
        a = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
        return a.reshape(shape) if shape is not None else a


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an SPCK file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported SPCK version {version}")
    (dlen,) = r.unpack("<I")
    try:
        text = r.take(dlen).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: architecture descriptor is not UTF-8") from None
    try:
        arch = Architecture.parse(text)
        seed = int(dict(item.split("=", 1) for item in text.split(";")).get("seed", -1))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad architecture descriptor: {exc}") from None
    (count,) = r.unpack("<I")
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        a = r.floats(int(np.prod(dims, dtype=np.int64)), dims)
        if name.startswith(_BUFFER_PREFIX):
            buffers[name[len(_BUFFER_PREFIX):]] = a
        else:
            params[name] = a
    pca = centroids = None
    while r.pos < len(raw):
        tag = r.take(4)
        if tag == b"PCA1":
            d, n = r.unpack("<II")
            mean = r.floats(d).astype(np.float64)
            comps = r.floats(n * d, (n, d)).astype(np.float64)
            var = r.floats(n).astype(np.float64)
            (total,) = r.unpack("<d")
            pca = PcaModel(mean, comps, var, total)
        elif tag == b"KMN1":
            k, n = r.unpack("<II")
            centroids = r.floats(k * n, (k, n)).astype(np.float64)
        else:
            raise FormatError(f"{path}: unknown section {tag!r}")
    model = CnnModel(arch, params, buffers, seed_used=seed, dtype=np.float32)
    expected = set(_param_shapes(arch)) | {"head.weight", "head.bias"}
    if set(params) != expected:
        raise FormatError(f"{path}: tensor set does not match architecture")
    return Checkpoint(model, pca, centroids)

