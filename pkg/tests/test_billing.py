import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from agora.billing import (
    Ack,
    SealedLog,
    SequenceTracker,
    WireFrame,
    append_sample,
    compress_samples,
    decode_ack,
    decode_frame,
    decode_uvarints,
    decompress_samples,
    decrypt_log,
    encode_ack,
    encode_frame,
    encode_uvarints,
    frame_for,
    generate_key,
    iter_frames,
    open_log,
    parse_plaintext,
    read_frame,
    seal_log,
    unzigzag,
    zigzag,
)
from agora.billing.frame import ACK_SIZE, FRAME_HEADER_SIZE, MAX_PAYLOAD
from agora.billing.keys import KeyStore
from agora.errors import (
    AuthFailure,
    BadMagic,
    BadVersion,
    ConfigError,
    Malformed,
    Oversize,
    SealedError,
    Truncated,
    UnknownCustomer,
)
from agora.node import price_increment
from agora.workload.formats import SAMPLE_DTYPE

KEY = bytes(range(32))


def samples_of(rows):
    return np.array([tuple(r) for r in rows], dtype=SAMPLE_DTYPE)


sample_rows = st.lists(
    st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 65535), st.integers(0, 65535)), max_size=200)


def new_log(seq=0, **kw):
    args = dict(customer_id=7, rental_id=70, node_id=3, gpu_id=2, log_seq=seq, period=50, start_ts=1_000_000)
    args.update(kw)
    return open_log(**args)


def test_varint_examples():
    assert encode_uvarints(np.array([0, 1, 127, 128, 300], dtype=np.uint64)).hex() == "00017f8001ac02"
    assert decode_uvarints(bytes.fromhex("ac02")).tolist() == [300]


def test_varint_rejects_garbage():
    with pytest.raises(Malformed):
        decode_uvarints(b"\x80")  # unterminated
    with pytest.raises(Malformed):
        decode_uvarints(b"\xff" * 11 + b"\x01")
    with pytest.raises(Malformed):
        decode_uvarints(b"\x01\x02", count=3)


def test_zigzag_extremes():
    v = np.array([0, -1, 1, -(2**62), 2**62 - 1], dtype=np.int64)
    assert zigzag(v).tolist() == [oracles.zigzag(int(x)) for x in v]
    assert np.array_equal(unzigzag(zigzag(v)), v)


@settings(max_examples=200, deadline=None)
@given(sample_rows)
def test_compression_matches_reference_and_round_trips(rows):
    s = samples_of(rows)
    data = compress_samples(s)
    assert data == oracles.compress(rows)
    assert np.array_equal(decompress_samples(data, len(rows)), s)


def test_constant_samples_compress(fixture_dist):
    for n in (16, 100, 65536):
        s = samples_of([(620_000, 30000, 20000)] * n)
        assert len(compress_samples(s)) < s.nbytes


def test_decompress_rejects_wrong_count():
    data = compress_samples(samples_of([(1, 2, 3)] * 4))
    with pytest.raises(Malformed):
        decompress_samples(data, 5)


def test_open_log_is_empty():
    b = new_log()
    assert b.amount == 0 and b.sample_count == 0
    with pytest.raises(ValueError):
        new_log(period=0)


def test_sequence_must_advance_by_one():
    tr = SequenceTracker()
    new_log(0, tracker=tr)
    new_log(1, tracker=tr)
    with pytest.raises(ValueError):
        new_log(3, tracker=tr)
    with pytest.raises(ValueError):
        new_log(1, tracker=tr)
    new_log(0, gpu_id=5, tracker=tr)  # other streams are independent
    assert tr.next_seq(3, 2) == 2


def test_appends_sum_exactly():
    b = new_log()
    for _ in range(3):
        append_sample(b, (620_000, 1, 2), 70)
    assert b.amount == 210 and b.sample_count == 3
    with pytest.raises(ValueError):
        append_sample(b, (1, 1, 1), -1)


def test_increment_at_a100_rate(curve):
    # 5.06 $/h for 50 µs is 70.28 n$, booked as 70
    assert 5.06e9 * 50e-6 / 3600 == pytest.approx(70.28, abs=0.01)
    assert price_increment(curve, 2.039, 50) == 70


def test_append_after_seal():
    b = new_log()
    seal_log(b, KEY)
    with pytest.raises(SealedError):
        append_sample(b, (1, 2, 3), 1)
    with pytest.raises(SealedError):
        b.extend(samples_of([(1, 2, 3)]), np.array([1]))


def test_seal_decrypt_round_trip():
    b = new_log()
    rows = [(i * 1000, i, 65535 - i) for i in range(40)]
    b.extend(samples_of(rows), np.arange(40, dtype=np.int64))
    sealed = seal_log(b, KEY)
    header, body = decrypt_log(sealed, KEY)
    assert header == b.header
    assert header.amount == sum(range(40)) and header.sample_count == 40
    assert np.array_equal(body, samples_of(rows))
    assert decrypt_log(sealed.to_bytes(), KEY)[0] == header
    assert parse_plaintext(b.plaintext())[0] == header


def test_empty_log_seals():
    header, body = decrypt_log(seal_log(new_log(), KEY), KEY)
    assert header.sample_count == 0 and header.amount == 0 and len(body) == 0


def test_seal_respects_max_samples():
    b = new_log()
    b.extend(samples_of([(1, 1, 1)] * 10), np.ones(10, dtype=np.int64))
    with pytest.raises(ValueError):
        seal_log(b, KEY, max_samples=9)


def test_wrong_key_and_bit_flip():
    b = new_log()
    append_sample(b, (1, 2, 3), 5)
    sealed = seal_log(b, KEY)
    with pytest.raises(AuthFailure):
        decrypt_log(sealed, generate_key())
    raw = bytearray(sealed.to_bytes())
    raw[20] ^= 0x04
    with pytest.raises(AuthFailure):
        decrypt_log(bytes(raw), KEY)
    with pytest.raises(ValueError):
        decrypt_log(sealed, b"short")


def test_nonce_layout():
    sealed = seal_log(new_log(0x0102), KEY, salt=b"abc")
    assert sealed.nonce == (0x0102).to_bytes(8, "big") + bytes([2]) + b"abc"


def test_plaintext_layout():
    b = new_log(9)
    append_sample(b, (5, 6, 7), 11)
    plain = b.plaintext()
    assert plain[:5] == b"ALOG\x01"
    fields = struct.unpack_from(">QQQQIBQIQI", plain, 5)
    assert fields == (11, 1_000_000, 7, 70, 3, 2, 9, 50, 1_000_000, 1)


def _frame(seq=1, send_ts=5, size=4):
    b = new_log(seq)
    b.extend(samples_of([(1, 2, 3)] * size), np.ones(size, dtype=np.int64))
    return frame_for(b.header, seal_log(b, KEY), send_ts)


def test_frame_layout_and_round_trip():
    f = _frame()
    data = encode_frame(f)
    assert FRAME_HEADER_SIZE == 38
    assert data[:4] == b"AGOR" and data[4] == 1
    magic, ver, cust, rent, node, gpu, seq, plen = struct.unpack_from(">IBQQIBQI", data)
    assert (cust, rent, node, gpu, seq) == (7, 70, 3, 2, 1)
    assert plen == len(data) - FRAME_HEADER_SIZE
    back, used = decode_frame(data)
    assert back == f and used == len(data)
    assert read_frame(io.BytesIO(data)) == f
    assert read_frame(io.BytesIO(b"")) is None


def test_frame_errors():
    data = encode_frame(_frame())
    with pytest.raises(BadMagic):
        decode_frame(b"\x00" + data[1:])
    with pytest.raises(BadVersion):
        decode_frame(data[:4] + b"\x02" + data[5:])
    with pytest.raises(Truncated):
        decode_frame(data[:-1])
    with pytest.raises(Truncated):
        decode_frame(data[:10])
    with pytest.raises(Truncated):
        read_frame(io.BytesIO(data[:-3]))
    big = data[:34] + struct.pack(">I", MAX_PAYLOAD + 1) + data[38:]
    with pytest.raises(Oversize):
        decode_frame(big)
    huge = WireFrame(1, 1, 1, 1, 1, SealedLog(bytes(12), bytes(MAX_PAYLOAD)))
    with pytest.raises(Oversize):
        encode_frame(huge)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=0, max_size=6))
def test_concatenated_frames_decode_in_order(sizes):
    frames = [_frame(i, send_ts=i, size=n) for i, n in enumerate(sizes)]
    got = list(iter_frames(b"".join(encode_frame(f) for f in frames)))
    assert got == frames


def test_ack_round_trip():
    a = Ack(3, 2, 99, 1)
    data = encode_ack(a)
    assert len(data) == ACK_SIZE == 20 and data[:4] == b"AACK"
    assert decode_ack(data) == a and not a.ok
    with pytest.raises(Truncated):
        decode_ack(data[:5])


def test_keystore(tmp_path):
    ks = KeyStore(tmp_path)
    key = ks.provision(4)
    assert len(key) == 32 and ks(4) == key and ks.get(4) == key
    assert (ks.path(4).stat().st_mode & 0o777) == 0o600
    with pytest.raises(UnknownCustomer):
        ks(5)
    ks.path(6).write_bytes(b"short")
    with pytest.raises(ConfigError):
        ks(6)
