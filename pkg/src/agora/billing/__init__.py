"""Billing logs: codec, sealed logs, wire frames."""

from .codec import compress_samples, decode_uvarints, decompress_samples, encode_uvarints, unzigzag, zigzag
from .frame import (
    ACK_OK,
    ACK_SIZE,
    Ack,
    WireFrame,
    decode_ack,
    decode_frame,
    encode_ack,
    encode_frame,
    frame_for,
    iter_frames,
    read_frame,
)
from .keys import KeyStore, generate_key
from .log import (
    DEFAULT_MAX_SAMPLES,
    LogBuilder,
    LogHeader,
    SealedLog,
    SequenceTracker,
    append_sample,
    decrypt_log,
    open_log,
    parse_plaintext,
    seal_log,
    serialize_plaintext,
)

__all__ = [
    "ACK_OK", "ACK_SIZE", "DEFAULT_MAX_SAMPLES", "Ack", "KeyStore", "LogBuilder", "LogHeader", "SealedLog",
    "SequenceTracker", "WireFrame", "append_sample", "compress_samples", "decode_ack", "decode_frame",
    "decode_uvarints", "decompress_samples", "decrypt_log", "encode_ack", "encode_frame", "encode_uvarints",
    "frame_for", "generate_key", "iter_frames", "open_log", "parse_plaintext", "read_frame", "seal_log",
    "serialize_plaintext", "unzigzag", "zigzag",
]
