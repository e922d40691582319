"""EPAB sequence container: header plus one CRC-protected chunk per frame.

Layout (little-endian) is documented in FORMATS.md at the repository root.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import write_atomic
from ..codec.model import CodecModel, decode_frame_i, decode_frame_p
from .cdf import CdfTable, build_cdf
from .rangecoder import RangeCoderError, range_decode, range_encode

MAGIC = b"EPAB"
VERSION = 1
HEADER = struct.Struct("<4sHHHBIHB8s")
LAMBDA_IDS = {256: 0, 512: 1, 1024: 2, 2048: 3}
FRAME_I = ord("I")
FRAME_P = ord("P")


class BitstreamError(ValueError):
    pass


class BitstreamParseError(BitstreamError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IncompatibleModelError(BitstreamError):
    pass


@dataclass
class SequenceHeader:
    width: int
    height: int
    channels: int
    frame_count: int
    gop: int
    lambda_id: int
    model_hash: bytes

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.width, self.height, self.channels, self.frame_count,
                           self.gop, self.lambda_id, self.model_hash)


@dataclass
class FrameLatents:
    frame_type: str  # "I" or "P"
    latents: list[np.ndarray]  # I: [intra]; P: [motion, residual]; each [1, C, h, w] integers


@dataclass
class RawChunk:
    frame_type: str
    payloads: list[bytes]
    offset: int
    size: int


@dataclass
class ParsedSequence:
    header: SequenceHeader
    chunks: list[RawChunk] = field(default_factory=list)
    total_bytes: int = 0


def lambda_id(lam: float) -> int:
    return LAMBDA_IDS.get(int(lam), 255)


def entropy_tables(model: CodecModel) -> dict[str, CdfTable]:
    p = model.params
    return {
        kind: build_cdf(p[f"entropy.{kind}.mu"], p[f"entropy.{kind}.raw_scale"], model.l_max)
        for kind in ("motion", "residual", "intra")
    }


def _latent_kinds(frame_type: str) -> tuple[str, ...]:
    return ("intra",) if frame_type == "I" else ("motion", "residual")


def encode_latent(latent: np.ndarray, table: CdfTable, cums: list[list[int]] | None = None) -> bytes:
    lat = np.asarray(latent)
    if lat.ndim != 4 or lat.shape[0] != 1 or lat.shape[1] != table.freqs.shape[0]:
        raise BitstreamError(f"latent shape {lat.shape} does not match table with {table.freqs.shape[0]} channels")
    if not np.array_equal(lat, np.round(lat)):
        raise BitstreamError("latents must be integers")
    if np.abs(lat).max(initial=0) > table.l_max:
        raise BitstreamError(f"latent value outside support [-{table.l_max}, {table.l_max}]")
    c, h, w = lat.shape[1:]
    symbols = (lat[0].astype(np.int64) + table.l_max).reshape(-1).tolist()
    tids = np.repeat(np.arange(c), h * w).tolist()
    return range_encode(symbols, cums if cums is not None else table.cum_lists(), tids)


def decode_latent(payload: bytes, table: CdfTable, shape: tuple[int, int, int],
                  cums: list[list[int]] | None = None) -> np.ndarray:
    c, h, w = shape
    tids = np.repeat(np.arange(c), h * w).tolist()
    symbols = range_decode(payload, cums if cums is not None else table.cum_lists(), tids)
    return (np.asarray(symbols, dtype=np.float64) - table.l_max).reshape(1, c, h, w)


def latent_shapes(model: CodecModel, height: int, width: int) -> dict[str, tuple[int, int, int]]:
    h, w = height // 4, width // 4
    return {kind: (ch, h, w) for kind, ch in model.arch.entropy_models().items()}


def write_sequence(header: SequenceHeader, frames: list[FrameLatents], model: CodecModel,
                   path: str | os.PathLike | None = None) -> bytes:
    """Entropy-code every frame's latents into one container; optionally write it atomically."""
    if header.frame_count != len(frames):
        raise BitstreamError(f"header says {header.frame_count} frames, got {len(frames)}")
    if header.model_hash != model.decoder_hash8():
        raise IncompatibleModelError("header model hash does not match the coding model")
    tables = entropy_tables(model)
    cums = {k: t.cum_lists() for k, t in tables.items()}
    parts = [header.pack()]
    for fr in frames:
        kinds = _latent_kinds(fr.frame_type)
        if len(fr.latents) != len(kinds):
            raise BitstreamError(f"{fr.frame_type}-frame needs {len(kinds)} latent tensors")
        payloads = [encode_latent(lat, tables[k], cums[k]) for lat, k in zip(fr.latents, kinds)]
        chunk = bytes([FRAME_I if fr.frame_type == "I" else FRAME_P])
        chunk += b"".join(struct.pack("<I", len(p)) for p in payloads) + b"".join(payloads)
        parts.append(chunk + struct.pack("<I", zlib.crc32(chunk)))
    blob = b"".join(parts)
    if path is not None:
        write_atomic(path, blob)
    return blob


def scan_sequence(blob: bytes) -> ParsedSequence:
    """Split a container into header and per-frame payloads; needs no model."""
    if len(blob) < HEADER.size:
        raise BitstreamParseError("file shorter than the sequence header", len(blob))
    magic, version, width, height, channels, count, gop, lam_id, mhash = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BitstreamParseError("bad magic, not an EPAB bitstream", 0)
    if version != VERSION:
        raise BitstreamParseError(f"unsupported bitstream version {version}", 4)
    header = SequenceHeader(width, height, channels, count, gop, lam_id, mhash)
    out = ParsedSequence(header)
    pos = HEADER.size
    for _ in range(count):
        start = pos
        if pos >= len(blob):
            raise BitstreamParseError("truncated: missing frame chunk", pos)
        ftype = blob[pos]
        if ftype not in (FRAME_I, FRAME_P):
            raise BitstreamParseError(f"unknown frame type byte 0x{ftype:02x}", pos)
        n_payloads = 1 if ftype == FRAME_I else 2
        pos += 1
        if pos + 4 * n_payloads > len(blob):
            raise BitstreamParseError("truncated chunk length field", pos)
        lengths = struct.unpack_from(f"<{n_payloads}I", blob, pos)
        pos += 4 * n_payloads
        payloads = []
        for n in lengths:
            if pos + n > len(blob):
                raise BitstreamParseError("truncated payload", pos)
            payloads.append(bytes(blob[pos : pos + n]))
            pos += n
        if pos + 4 > len(blob):
            raise BitstreamParseError("truncated chunk CRC", pos)
        (crc,) = struct.unpack_from("<I", blob, pos)
        if zlib.crc32(blob[start:pos]) != crc:
            raise BitstreamParseError("frame chunk CRC32 mismatch", start)
        pos += 4
        out.chunks.append(RawChunk(chr(ftype), payloads, start, pos - start))
    if pos != len(blob):
        raise BitstreamParseError(f"{len(blob) - pos} trailing bytes after last frame", pos)
    out.total_bytes = len(blob)
    return out


def parse_latents(blob: bytes, model: CodecModel) -> tuple[SequenceHeader, list[FrameLatents]]:
    seq = scan_sequence(blob)
    hdr = seq.header
    if hdr.model_hash != model.decoder_hash8():
        raise IncompatibleModelError(
            f"bitstream model hash {hdr.model_hash.hex()} does not match checkpoint {model.decoder_hash8().hex()}"
        )
    if hdr.channels != model.channels:
        raise IncompatibleModelError(f"bitstream has {hdr.channels} channels, model expects {model.channels}")
    tables = entropy_tables(model)
    cums = {k: t.cum_lists() for k, t in tables.items()}
    shapes = latent_shapes(model, hdr.height, hdr.width)
    frames = []
    for chunk in seq.chunks:
        kinds = _latent_kinds(chunk.frame_type)
        try:
            lats = [decode_latent(p, tables[k], shapes[k], cums[k]) for p, k in zip(chunk.payloads, kinds)]
        except RangeCoderError as exc:
            raise BitstreamParseError(str(exc), chunk.offset) from exc
        frames.append(FrameLatents(chunk.frame_type, lats))
    return hdr, frames


def decode_sequence(blob: bytes, model: CodecModel) -> np.ndarray:
    """Full decode to [N, C, H, W] reconstructions using decoder-side parameters only."""
    hdr, frames = parse_latents(blob, model)
    out = np.empty((hdr.frame_count, hdr.channels, hdr.height, hdr.width))
    ref = None
    for i, fr in enumerate(frames):
        if fr.frame_type == "I":
            rec = decode_frame_i(fr.latents[0], model)
        else:
            if ref is None:
                raise BitstreamParseError("P-frame without a preceding reference", 0)
            rec = decode_frame_p(fr.latents[0], fr.latents[1], ref, model)
        out[i] = rec[0]
        ref = rec
    return out


def read_sequence(path: str | os.PathLike, model: CodecModel) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_sequence(fh.read(), model)


def bpp_of(n_bytes: int, header: SequenceHeader) -> float:
    return 8.0 * n_bytes / (header.width * header.height * header.frame_count)
