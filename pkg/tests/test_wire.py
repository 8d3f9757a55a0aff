"""Wire format tests.

The golden vectors below were laid out by hand from the frame description
(little-endian fields at fixed offsets), not by running the encoder, so they
catch byte-order and offset mistakes that a pure round-trip test would miss.
"""

import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rackbench import wire
from rackbench.wire import (
    BadMagic,
    Bye,
    FrameDecoder,
    Hello,
    PayloadLengthMismatch,
    Sample,
    UnknownMsgType,
    UnsupportedVersion,
    decode_frame,
    encode,
)

# --- golden vectors -----------------------------------------------------------

BYE_FRAME = bytes([0x4E, 0x50, 0x01, 0x03, 0x00, 0x00])

HELLO_7_100 = bytes([
    0x4E, 0x50, 0x01, 0x01, 0x06, 0x00,   # header: "NP", v1, Hello, len 6
    0x07, 0x00,                            # node_id 7
    0x64, 0x00, 0x00, 0x00,                # period 100 ms
])

# Sample(node_id=5, seq=1, timestamp_us=1_000_000, current_uA=-500, bus_mV=5000)
# -500 as i32 two's complement = 0xFFFFFE0C; 1_000_000 = 0x000F4240; 5000 = 0x1388
SAMPLE_FRAME = bytes([
    0x4E, 0x50, 0x01, 0x02, 0x18, 0x00,                     # header, len 24
    0x05, 0x00,                                              # node_id 5
    0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,          # seq 1
    0x40, 0x42, 0x0F, 0x00, 0x00, 0x00, 0x00, 0x00,          # ts 1e6 us
    0x0C, 0xFE, 0xFF, 0xFF,                                  # current -500
    0x88, 0x13,                                              # bus 5000 mV
])


def test_golden_bye():
    assert encode(Bye()) == BYE_FRAME
    msg, consumed = decode_frame(BYE_FRAME)
    assert msg == Bye() and consumed == 6


def test_golden_hello():
    assert encode(Hello(7, 100)) == HELLO_7_100
    msg, consumed = decode_frame(HELLO_7_100)
    assert msg == Hello(node_id=7, sample_period_ms=100) and consumed == 12


def test_golden_sample():
    sample = Sample(node_id=5, seq=1, timestamp_us=1_000_000,
                    current_uA=-500, bus_mV=5000)
    assert encode(sample) == SAMPLE_FRAME
    msg, consumed = decode_frame(SAMPLE_FRAME)
    assert msg == sample and consumed == 30


def test_frame_sizes():
    assert len(encode(Hello(1, 1))) == 12
    assert len(encode(Sample(1, 0, 0, 0, 0))) == 30
    assert len(encode(Bye())) == 6


# --- round trips -----------------------------------------------------------------

hellos = st.builds(
    Hello,
    node_id=st.integers(0, 0xFFFF),
    sample_period_ms=st.integers(1, 0xFFFFFFFF),
)
samples = st.builds(
    Sample,
    node_id=st.integers(0, 0xFFFF),
    seq=st.integers(0, 2**64 - 1),
    timestamp_us=st.integers(0, 2**64 - 1),
    current_uA=st.integers(-(2**31), 2**31 - 1),
    bus_mV=st.integers(0, 0xFFFF),
)
messages = st.one_of(hellos, samples, st.just(Bye()))


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip(msg):
    data = encode(msg)
    decoded, consumed = decode_frame(data)
    assert decoded == msg
    assert consumed == len(data)


@settings(max_examples=100, deadline=None)
@given(st.lists(messages, min_size=1, max_size=10), st.randoms())
def test_chunking_independence(msgs, rng):
    """Any split of the byte stream yields the same message sequence."""
    stream = b"".join(encode(m) for m in msgs)
    decoder = FrameDecoder()
    out = []
    i = 0
    while i < len(stream):
        n = rng.randint(1, 7)
        decoder.feed(stream[i:i + n])
        i += n
        out.extend(decoder)
    assert out == msgs
    assert decoder.pending == 0


def test_partial_consumes_nothing():
    frame = encode(Sample(1, 2, 3, 4, 5))
    for cut in range(len(frame)):
        msg, consumed = decode_frame(frame[:cut])
        assert msg is None and consumed == 0


def test_decoder_holds_partial_then_completes():
    frame = encode(Hello(9, 50))
    d = FrameDecoder()
    d.feed(frame[:8])
    assert d.next_message() is None
    assert d.pending == 8
    d.feed(frame[8:])
    assert d.next_message() == Hello(9, 50)
    assert d.pending == 0


# --- header validation -------------------------------------------------------------

def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_frame(b"XX" + BYE_FRAME[2:])


def test_unsupported_version():
    bad = bytearray(BYE_FRAME)
    bad[2] = 0x02
    with pytest.raises(UnsupportedVersion):
        decode_frame(bytes(bad))


def test_unknown_msg_type():
    bad = bytearray(BYE_FRAME)
    bad[3] = 0x7F
    with pytest.raises(UnknownMsgType):
        decode_frame(bytes(bad))


def test_payload_length_mismatch():
    bad = bytearray(HELLO_7_100)
    bad[4] = 0x05
    with pytest.raises(PayloadLengthMismatch):
        decode_frame(bytes(bad))


def test_header_rejected_before_payload_arrives():
    # only the 6 header bytes are present; validation must not wait
    bad_header = bytes([0x4E, 0x50, 0x01, 0x02, 0x00, 0x01])  # Sample, len 256
    with pytest.raises(PayloadLengthMismatch):
        decode_frame(bad_header)


def test_bye_with_payload_rejected():
    bad = bytearray(BYE_FRAME)
    bad[4] = 0x01
    with pytest.raises(PayloadLengthMismatch):
        decode_frame(bytes(bad) + b"\x00")


# --- field range checks ----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(node_id=-1, sample_period_ms=100),
    dict(node_id=0x10000, sample_period_ms=100),
    dict(node_id=1, sample_period_ms=0),
    dict(node_id=1, sample_period_ms=2**32),
    dict(node_id=True, sample_period_ms=100),
])
def test_hello_rejects_bad_fields(kwargs):
    with pytest.raises(ValueError):
        Hello(**kwargs)


@pytest.mark.parametrize("field,value", [
    ("seq", -1), ("seq", 2**64),
    ("timestamp_us", -1),
    ("current_uA", 2**31), ("current_uA", -(2**31) - 1),
    ("bus_mV", -1), ("bus_mV", 0x10000),
])
def test_sample_rejects_bad_fields(field, value):
    kwargs = dict(node_id=1, seq=0, timestamp_us=0, current_uA=0, bus_mV=0)
    kwargs[field] = value
    with pytest.raises(ValueError):
        Sample(**kwargs)


# --- fuzz ---------------------------------------------------------------------------

def test_fuzz_random_chunks_10k_messages():
    """>= 10k mixed messages through random-sized chunks, under 10 seconds."""
    rng = random.Random(0xC0FFEE)
    msgs = []
    for _ in range(10_000):
        pick = rng.randrange(3)
        if pick == 0:
            msgs.append(Hello(rng.randrange(0x10000), rng.randrange(1, 2**32)))
        elif pick == 1:
            msgs.append(Sample(
                rng.randrange(0x10000), rng.randrange(2**64), rng.randrange(2**64),
                rng.randrange(-(2**31), 2**31), rng.randrange(0x10000),
            ))
        else:
            msgs.append(Bye())
    stream = b"".join(encode(m) for m in msgs)

    start = time.monotonic()
    decoder = FrameDecoder()
    out = []
    i = 0
    while i < len(stream):
        n = rng.randint(1, 97)
        decoder.feed(stream[i:i + n])
        i += n
        out.extend(decoder)
    elapsed = time.monotonic() - start

    assert out == msgs
    assert decoder.pending == 0
    assert elapsed < 10.0
