"""Named parameter collections and the EPAC checkpoint format."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import zlib
from enum import IntEnum
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"EPAC"
CHECKPOINT_VERSION = 1


class Side(IntEnum):
    ENCODER = 0
    DECODER = 1
    ENTROPY = 2  # shared-entropy: ships with the decoder
    META = 3  # non-trainable configuration scalars


class CheckpointError(ValueError):
    pass


class ParamSet:
    """Ordered mapping ``name -> float64 array`` with an immutable side tag per entry."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._sides: dict[str, Side] = {}

    def add(self, name: str, value, side: Side) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._sides[name] = Side(side)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}; use add() to create entries")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def side(self, name: str) -> Side:
        return self._sides[name]

    def names(self, *sides: Side, prefix: str | None = None) -> list[str]:
        return [
            n
            for n in self._values
            if (not sides or self._sides[n] in sides) and (prefix is None or n.startswith(prefix))
        ]

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._values.items():
            out.add(name, value, self._sides[name])
        return out

    def leaves(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Fresh graph leaves. Names outside ``names`` become constants."""
        trainable = set(self._values) if names is None else set(names)
        return {
            n: Tensor(v.copy(), name=n) if n in trainable else Tensor(v, requires_grad=False, op="const")
            for n, v in self._values.items()
        }

    def digest(self, *sides: Side) -> str:
        """SHA-256 over names, tags, shapes and raw bytes of the selected sides."""
        h = hashlib.sha256()
        for name in self.names(*sides):
            v = self._values[name]
            h.update(name.encode())
            h.update(bytes([self._sides[name]]))
            h.update(np.asarray(v.shape, dtype="<u4").tobytes())
            h.update(v.astype("<f8").tobytes())
        return h.hexdigest()

    # serialization -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
        for name, value in self._values.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<BB", self._sides[name], value.ndim))
            parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
            parts.append(value.astype("<f8").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not an EPAC checkpoint (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint CRC32 mismatch")
        (version,) = struct.unpack_from("<H", body, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out = cls()
        pos = 6
        try:
            while pos < len(body):
                (nlen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = body[pos : pos + nlen].decode("utf-8")
                pos += nlen
                side, rank = struct.unpack_from("<BB", body, pos)
                pos += 2
                dims = struct.unpack_from(f"<{rank}I", body, pos)
                pos += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                values = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
                pos += 8 * count
                out.add(name, values.reshape(dims), Side(side))
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated or malformed checkpoint at offset {pos}: {exc}") from exc
        return out

    def save(self, path: str | os.PathLike) -> None:
        write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParamSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
