"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"RLNS"                      magic
    u32  version                 (FORMAT_VERSION)
    u32  len, bytes              spec text (utf-8)
    u32  len, bytes              regime tag (utf-8), e.g. STD / ADV / RANDOM
    u32  count                   number of named arrays
    per array:
        u32 len, bytes           name (utf-8)
        u32 ndim, ndim * u32     dims
        f64 * prod(dims)         values, C order
    u32  crc32                   of every preceding byte

The same container stores model states, fusion models, saliency maps and
dataset dumps; the spec text says which.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RLNS"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointSpecMismatchError(CheckpointError):
    pass


def _text(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def encode(spec_text: str, regime: str, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _text(buf, spec_text)
    _text(buf, regime)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _text(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(data: bytes) -> tuple[str, str, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError("bad magic bytes")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    spec_text = r.text()
    regime = r.text()
    arrays = {}
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    end = r.pos
    (crc,) = struct.unpack("<I", r.take(4))
    if crc != zlib.crc32(data[:end]):
        raise CheckpointCorruptError("checksum mismatch")
    if r.pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - r.pos} trailing bytes")
    return spec_text, regime, arrays


def write_container(path, spec_text: str, regime: str, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(spec_text, regime, arrays))
    os.replace(tmp, path)
    return path


def read_container(path) -> tuple[str, str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


# --------------------------------------------------------------------------
# model states


def save_checkpoint(state, path) -> Path:
    """Write a ModelState or FusionModel."""
    from .fusion import FusionModel

    if isinstance(state, FusionModel):
        return write_container(path, state.spec_text(), state.regime, state.arrays())
    arrays = {f"param:{k}": v for k, v in state.params.items()}
    arrays.update({f"buffer:{k}": v for k, v in state.buffers.items()})
    return write_container(path, "model\n" + state.spec.to_text(), state.regime, arrays)


def state_from_container(spec_text: str, regime: str, arrays: dict[str, np.ndarray]):
    from .fusion import FusionModel
    from .nn import ModelSpec, ModelState, SpecError

    head, _, rest = spec_text.partition("\n")
    if head == "fusion":
        return FusionModel.from_container(rest, regime, arrays)
    if head != "model":
        raise CheckpointError(f"container holds {head!r}, not a model")
    try:
        spec = ModelSpec.from_text(rest)
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param:")}
        buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer:")}
        return ModelState(spec, params, buffers, regime=regime)
    except SpecError as exc:
        raise CheckpointSpecMismatchError(str(exc)) from exc


def load_checkpoint(path):
    return state_from_container(*read_container(path))
