"""Wire framing between node agents and the collector.

Frame (big-endian)::

    magic u32 0x41474F52 | version u8 | customer u64 | rental u64 | node u32
    | gpu u8 | log_seq u64 | payload_len u32 | payload

The payload is ``send_ts u64`` (µs, in the clear, for latency measurement)
followed by the sealed log.  Acks are fixed 20-byte records::

    b"AACK" | node u32 | gpu u8 | log_seq u64 | status u8 | 2 zero bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

from ..errors import BadMagic, BadVersion, Malformed, Oversize, Truncated
from .log import SealedLog

FRAME_MAGIC = 0x41474F52
FRAME_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
_FRAME = struct.Struct(">IBQQIBQI")
FRAME_HEADER_SIZE = _FRAME.size
_SEND_TS = struct.Struct(">Q")

ACK_MAGIC = b"AACK"
_ACK = struct.Struct(">4sIBQB2x")
ACK_SIZE = _ACK.size
ACK_OK = 0
ACK_AUTH_FAILURE = 1
ACK_UNKNOWN_CUSTOMER = 2
ACK_MALFORMED = 3
ACK_ROUTING_MISMATCH = 4


@dataclass(frozen=True)
class WireFrame:
    customer_id: int
    rental_id: int
    node_id: int
    gpu_id: int
    log_seq: int
    sealed: SealedLog
    send_ts: int = 0  # µs

    @property
    def stream(self) -> tuple[int, int, int, int]:
        return (self.customer_id, self.rental_id, self.node_id, self.gpu_id)


def encode_frame(frame: WireFrame) -> bytes:
    payload = _SEND_TS.pack(frame.send_ts) + frame.sealed.to_bytes()
    if len(payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _FRAME.pack(FRAME_MAGIC, FRAME_VERSION, frame.customer_id, frame.rental_id,
                       frame.node_id, frame.gpu_id, frame.log_seq, len(payload))
    return head + payload


def frame_for(header, sealed: SealedLog, send_ts: int = 0) -> WireFrame:
    """Routing fields copied from a log header."""
    return WireFrame(header.customer_id, header.rental_id, header.node_id, header.gpu_id,
                     header.log_seq, sealed, send_ts)


def peek_length(buf: bytes) -> int:
    """Total frame size announced by a buffer holding at least the header."""
    if len(buf) < FRAME_HEADER_SIZE:
        raise Truncated(f"need {FRAME_HEADER_SIZE} header bytes, have {len(buf)}")
    magic, version, *_, plen = _FRAME.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise BadMagic(f"bad frame magic {magic:#010x}")
    if version != FRAME_VERSION:
        raise BadVersion(f"unsupported frame version {version}")
    if plen > MAX_PAYLOAD:
        raise Oversize(f"declared payload of {plen} bytes exceeds {MAX_PAYLOAD}")
    return FRAME_HEADER_SIZE + plen


def decode_frame(buf: bytes, offset: int = 0) -> tuple[WireFrame, int]:
    """Decode one frame starting at ``offset``; returns it and the bytes consumed."""
    view = memoryview(buf)[offset:]
    total = peek_length(view)
    if len(view) < total:
        raise Truncated(f"frame needs {total} bytes, have {len(view)}")
    _, _, customer, rental, node, gpu, seq, plen = _FRAME.unpack_from(view)
    if plen < _SEND_TS.size:
        raise Malformed("payload too short for the send timestamp")
    (send_ts,) = _SEND_TS.unpack_from(view, FRAME_HEADER_SIZE)
    sealed = SealedLog.from_bytes(bytes(view[FRAME_HEADER_SIZE + _SEND_TS.size : total]))
    return WireFrame(customer, rental, node, gpu, seq, sealed, send_ts), total


def iter_frames(buf: bytes) -> Iterator[WireFrame]:
    """Decode a concatenation of frames in order."""
    off = 0
    while off < len(buf):
        frame, n = decode_frame(buf, off)
        off += n
        yield frame


def read_frame(stream) -> WireFrame | None:
    """Read one frame from a binary file-like object; None on clean EOF."""
    head = _read_exact(stream, FRAME_HEADER_SIZE, allow_eof=True)
    if head is None:
        return None
    total = peek_length(head)
    body = _read_exact(stream, total - FRAME_HEADER_SIZE)
    return decode_frame(head + body)[0]


def _read_exact(stream, n: int, allow_eof: bool = False) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if got == 0 and allow_eof:
                return None
            raise Truncated(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


@dataclass(frozen=True)
class Ack:
    node_id: int
    gpu_id: int
    log_seq: int
    status: int = ACK_OK

    @property
    def ok(self) -> bool:
        return self.status == ACK_OK


def encode_ack(ack: Ack) -> bytes:
    return _ACK.pack(ACK_MAGIC, ack.node_id, ack.gpu_id, ack.log_seq, ack.status)


def decode_ack(buf: bytes) -> Ack:
    if len(buf) < ACK_SIZE:
        raise Truncated(f"ack needs {ACK_SIZE} bytes, have {len(buf)}")
    magic, node, gpu, seq, status = _ACK.unpack_from(buf)
    if magic != ACK_MAGIC:
        raise BadMagic(f"bad ack magic {magic!r}")
    return Ack(node, gpu, seq, status)
