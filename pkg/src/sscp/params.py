"""Named parameter storage, initialisation and the ``SSCP`` binary format.

Binary layout (all integers little-endian)::

    b"SSCP"  u32 version  u32 entry_count
    per entry:
        u32 path_len  path (UTF-8)  u32 rank  u64 dim * rank  f64 value * prod(dims)
"""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor

MAGIC = b"SSCP"
FORMAT_VERSION = 1
# running statistics are serialised but never trained
BUFFER_SUFFIXES = ("bn_mean", "bn_var")


class FormatError(ValueError):
    pass


def is_buffer(path: str) -> bool:
    return path.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


class ParamStore:
    """Insertion-ordered map from dotted path to :class:`Tensor`."""

    def __init__(self):
        self._items: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, path: str, value, trainable: bool | None = None) -> Tensor:
        if path in self._items:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not is_buffer(path) if trainable is None else trainable
        self._items[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __contains__(self, path: str) -> bool:
        return path in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def trainable(self):
        return [(k, t) for k, t in self._items.items() if t.requires_grad]

    def with_prefix(self, prefix: str) -> list[str]:
        return [k for k in self._items if k.startswith(prefix)]

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def num_scalars(self, trainable_only: bool = True) -> int:
        return sum(t.size for t in self._items.values() if t.requires_grad or not trainable_only)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._items.items():
            out.add(k, Tensor(t.data.copy()), trainable=t.requires_grad)
        return out

    # -- serialisation ---------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(self._items)))
        for path, t in self._items.items():
            raw = path.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if blob[:4] != MAGIC:
            raise FormatError("not an SSCP parameter file (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported parameter file version {version}")
        off = 12
        store = cls()
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, off)
                off += 4
                path = blob[off:off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", blob, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}Q", blob, off)
                off += 8 * rank
                size = int(np.prod(shape, dtype=np.int64))
                vals = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
                off += 8 * size
                store.add(path, Tensor(vals.astype(DTYPE).reshape(shape)))
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated parameter file: {exc}") from exc
        if off != len(blob):
            raise FormatError("trailing bytes after last entry")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv_bn(store: ParamStore, prefix: str, cout: int, cin: int, rng: np.random.Generator):
    """Register a bias-free 1x1 conv followed by batch-norm affine and buffers."""
    store.add(f"{prefix}.weight", uniform_init(rng, (cout, cin), cin))
    store.add(f"{prefix}.bn_gamma", np.ones(cout))
    store.add(f"{prefix}.bn_beta", np.zeros(cout))
    store.add(f"{prefix}.bn_mean", np.zeros(cout))
    store.add(f"{prefix}.bn_var", np.ones(cout))
