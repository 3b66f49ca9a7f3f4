"""Bitstream container: sequence header plus per-frame records.

Layout (all integers little-endian):

    magic "BNVC" | version u8
    header: width u16, height u16, n_ref u8, policy u8 (0=near,
            1=further), fusion_mode u8, intra_period u16,
            lambda_index u8, weights_hash u64
    records, until end of stream:
      intra: type u8 = 0, crc u32, raw planar RGB (3*H*W bytes)
      inter: type u8 = 1, crc u32, four u32-length-prefixed payloads in
             order (mv hyper, mv main, ctx hyper, ctx main)

The crc field is CRC-32 (zlib) of the record body after the crc itself;
it exists so that any single corrupted payload byte is detected before
entropy decoding rather than silently decoding into garbage symbols.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptStreamError

__all__ = ["MAGIC", "VERSION", "StreamHeader", "FrameChunk", "BitstreamWriter", "BitstreamReader"]

MAGIC = b"BNVC"
VERSION = 1

_HEADER_FMT = "<4sBHHBBBHBQ"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

FRAME_TYPE_INTRA = 0
FRAME_TYPE_INTER = 1


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    n_ref: int
    policy_wire: int
    fusion_wire: int
    intra_period: int
    lambda_index: int
    weights_hash: int

    def pack(self) -> bytes:
        return struct.pack(
            _HEADER_FMT,
            MAGIC,
            VERSION,
            self.width,
            self.height,
            self.n_ref,
            self.policy_wire,
            self.fusion_wire,
            self.intra_period,
            self.lambda_index,
            self.weights_hash,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < _HEADER_SIZE:
            raise CorruptStreamError(f"stream shorter than the {_HEADER_SIZE}-byte header")
        magic, version, w, h, n_ref, policy, fusion, period, lam, whash = struct.unpack_from(_HEADER_FMT, data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        return cls(w, h, n_ref, policy, fusion, period, lam, whash)


@dataclass(frozen=True)
class FrameChunk:
    """The four coded payloads of one inter frame."""

    mv_hyper: bytes
    mv_main: bytes
    ctx_hyper: bytes
    ctx_main: bytes

    def payloads(self) -> tuple[bytes, bytes, bytes, bytes]:
        return (self.mv_hyper, self.mv_main, self.ctx_hyper, self.ctx_main)

    def body(self) -> bytes:
        out = bytearray()
        for p in self.payloads():
            out += struct.pack("<I", len(p))
            out += p
        return bytes(out)

    def total_bytes(self) -> int:
        return len(self.body()) + 5  # type byte + crc


class BitstreamWriter:
    def __init__(self, header: StreamHeader):
        self._buf = bytearray(header.pack())
        self.frame_bits: list[int] = []

    def add_intra(self, raw_planar: bytes) -> None:
        body = bytes(raw_planar)
        rec = struct.pack("<BI", FRAME_TYPE_INTRA, zlib.crc32(body)) + body
        self._buf += rec
        self.frame_bits.append(8 * len(rec))

    def add_inter(self, chunk: FrameChunk) -> None:
        body = chunk.body()
        rec = struct.pack("<BI", FRAME_TYPE_INTER, zlib.crc32(body)) + body
        self._buf += rec
        self.frame_bits.append(8 * len(rec))

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class BitstreamReader:
    def __init__(self, data: bytes):
        self.data = data
        self.header = StreamHeader.unpack(data)
        self.pos = _HEADER_SIZE

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStreamError(f"stream truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def next_record(self) -> tuple[int, bytes | FrameChunk]:
        """(frame_type, raw bytes or FrameChunk), CRC verified."""
        ftype, crc = struct.unpack("<BI", self._take(5))
        if ftype == FRAME_TYPE_INTRA:
            body = self._take(3 * self.header.width * self.header.height)
            if zlib.crc32(body) != crc:
                raise CorruptStreamError("intra record failed its CRC check")
            return ftype, body
        if ftype == FRAME_TYPE_INTER:
            start = self.pos
            payloads = []
            for _ in range(4):
                (length,) = struct.unpack("<I", self._take(4))
                payloads.append(self._take(length))
            body = self.data[start : self.pos]
            if zlib.crc32(body) != crc:
                raise CorruptStreamError("inter record failed its CRC check")
            return ftype, FrameChunk(*payloads)
        raise CorruptStreamError(f"unknown frame record type {ftype}")
