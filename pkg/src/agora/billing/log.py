"""Priced billing logs: build, seal (compress + AES-256-GCM), decrypt."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import AuthFailure, Malformed, SealedError
from ..workload.formats import SAMPLE_DTYPE
from .codec import compress_samples, decompress_samples

LOG_MAGIC = b"ALOG"
LOG_VERSION = 1
DEFAULT_MAX_SAMPLES = 65_536
KEY_BYTES = 32
NONCE_BYTES = 12
SALT_BYTES = 3

# amount, date, customer, rental, node, gpu, log_seq, period, start_ts, sample_count
_HEADER = struct.Struct(">QQQQIBQIQI")
_PREFIX = len(LOG_MAGIC) + 1
PLAINTEXT_HEADER_SIZE = _PREFIX + _HEADER.size


@dataclass(frozen=True)
class LogHeader:
    amount: int  # nanodollars
    date: int  # µs since the epoch, log open time
    customer_id: int
    rental_id: int
    node_id: int
    gpu_id: int
    log_seq: int
    period: int  # µs
    start_ts: int  # µs
    sample_count: int

    def pack(self) -> bytes:
        try:
            return LOG_MAGIC + bytes([LOG_VERSION]) + _HEADER.pack(
                self.amount, self.date, self.customer_id, self.rental_id, self.node_id,
                self.gpu_id, self.log_seq, self.period, self.start_ts, self.sample_count,
            )
        except struct.error as exc:
            raise ValueError(f"header field out of range: {exc}") from None

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.period * self.sample_count


def serialize_plaintext(header: LogHeader, samples: np.ndarray) -> bytes:
    if len(samples) != header.sample_count:
        raise ValueError("sample_count does not match the body")
    return header.pack() + compress_samples(samples)


def parse_plaintext(data: bytes) -> tuple[LogHeader, np.ndarray]:
    if len(data) < PLAINTEXT_HEADER_SIZE:
        raise Malformed("log plaintext shorter than its header", location=len(data))
    if data[:4] != LOG_MAGIC:
        raise Malformed("bad log magic", location=0)
    if data[4] != LOG_VERSION:
        raise Malformed(f"unsupported log version {data[4]}", location=4)
    header = LogHeader(*_HEADER.unpack_from(data, _PREFIX))
    samples = decompress_samples(data[PLAINTEXT_HEADER_SIZE:], header.sample_count)
    return header, samples


@dataclass(frozen=True)
class SealedLog:
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedLog":
        if len(data) < NONCE_BYTES + 16:
            raise Malformed("sealed log too short")
        return cls(bytes(data[:NONCE_BYTES]), bytes(data[NONCE_BYTES:]))

    def __len__(self):
        return NONCE_BYTES + len(self.ciphertext)


def _check_key(key: bytes) -> AESGCM:
    if len(key) != KEY_BYTES:
        raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
    return AESGCM(key)


def make_nonce(log_seq: int, gpu_id: int, salt: bytes | None = None) -> bytes:
    salt = os.urandom(SALT_BYTES) if salt is None else salt
    return log_seq.to_bytes(8, "big") + bytes([gpu_id]) + salt


class SequenceTracker:
    """Remembers the last opened ``log_seq`` per (node, gpu) stream."""

    def __init__(self):
        self._last: dict[tuple[int, int], int] = {}

    def claim(self, node_id: int, gpu_id: int, log_seq: int) -> None:
        key = (node_id, gpu_id)
        last = self._last.get(key)
        if last is not None and log_seq != last + 1:
            raise ValueError(f"stream {key}: log_seq {log_seq} does not follow {last}")
        self._last[key] = log_seq

    def next_seq(self, node_id: int, gpu_id: int) -> int:
        last = self._last.get((node_id, gpu_id))
        return 0 if last is None else last + 1


class LogBuilder:
    """Accumulates samples and integer price increments for one log."""

    def __init__(self, header: LogHeader):
        self._header = header
        self._samples: list[np.ndarray] = []
        self._amount = 0
        self._count = 0
        self.sealed = False

    @property
    def amount(self) -> int:
        return self._amount

    @property
    def sample_count(self) -> int:
        return self._count

    @property
    def header(self) -> LogHeader:
        return replace(self._header, amount=self._amount, sample_count=self._count)

    def _check_open(self):
        if self.sealed:
            raise SealedError(f"log {self._header.log_seq} is already sealed")

    def append(self, sample, increment: int) -> None:
        self._check_open()
        increment = int(increment)
        if increment < 0:
            raise ValueError("price increments cannot be negative")
        rec = np.zeros(1, dtype=SAMPLE_DTYPE)
        rec[0] = tuple(sample) if not isinstance(sample, np.void) else sample
        self._samples.append(rec)
        self._amount += increment
        self._count += 1

    def extend(self, samples: np.ndarray, increments: np.ndarray) -> None:
        """Bulk append; ``increments`` must be integers."""
        self._check_open()
        samples = np.asarray(samples, dtype=SAMPLE_DTYPE)
        inc = np.asarray(increments)
        if inc.shape != samples.shape:
            raise ValueError("one increment per sample is required")
        if inc.size and (inc.dtype.kind not in "iu" or inc.min() < 0):
            raise ValueError("increments must be non-negative integers")
        self._samples.append(samples.copy())
        self._amount += int(inc.sum(dtype=np.int64))
        self._count += samples.size

    def samples(self) -> np.ndarray:
        if not self._samples:
            return np.zeros(0, dtype=SAMPLE_DTYPE)
        return np.concatenate(self._samples)

    def plaintext(self) -> bytes:
        return serialize_plaintext(self.header, self.samples())


def open_log(customer_id, rental_id, node_id, gpu_id, log_seq, period, start_ts, date=None, tracker=None) -> LogBuilder:
    """Start an empty log.  With a ``tracker`` the stream's seq must advance by one."""
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    if tracker is not None:
        tracker.claim(node_id, gpu_id, log_seq)
    header = LogHeader(0, int(start_ts if date is None else date), customer_id, rental_id, node_id,
                       gpu_id, log_seq, int(period), int(start_ts), 0)
    header.pack()  # range check
    return LogBuilder(header)


def append_sample(builder: LogBuilder, sample, increment: int) -> None:
    builder.append(sample, increment)


def seal_log(builder: LogBuilder, key: bytes, max_samples: int = DEFAULT_MAX_SAMPLES, salt: bytes | None = None) -> SealedLog:
    if builder.sample_count > max_samples:
        raise ValueError(f"log holds {builder.sample_count} samples, max is {max_samples}")
    aead = _check_key(key)
    plain = builder.plaintext()
    builder.sealed = True
    h = builder.header
    nonce = make_nonce(h.log_seq, h.gpu_id, salt)
    return SealedLog(nonce, aead.encrypt(nonce, plain, None))


def decrypt_log(sealed: SealedLog | bytes, key: bytes) -> tuple[LogHeader, np.ndarray]:
    if not isinstance(sealed, SealedLog):
        sealed = SealedLog.from_bytes(sealed)
    aead = _check_key(key)
    try:
        plain = aead.decrypt(sealed.nonce, sealed.ciphertext, None)
    except InvalidTag:
        raise AuthFailure("log failed authentication") from None
    return parse_plaintext(plain)
