import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qshed import protocol
from qshed.dither_quant import RefinementMessage
from qshed.errors import ProtocolError
from qshed.protocol import Broadcast, DeviceUpdate, decode, encode, payload_bits


def random_update(rng):
    n = int(rng.integers(1, 24))
    q_prev = int(rng.integers(0, 5))
    q_t = q_prev + int(rng.integers(0, 5))
    renewal = bool(rng.integers(0, 2))
    msgs = []
    for i in rng.choice(q_t, size=int(rng.integers(0, q_t + 1)), replace=False) if q_t else []:
        stage = int(rng.integers(0, 4))
        prior = 0 if stage == 0 else int(rng.integers(1, 40))
        added = int(rng.integers(1, 61 - prior))
        sub = rng.integers(0, 2 ** added, n, dtype=np.uint64)
        msgs.append(RefinementMessage(int(i), stage, prior, added, sub))
    exact = [(int(i), rng.uniform(-1, 1, n)) for i in range(int(rng.integers(0, 3)))]
    return DeviceUpdate(
        device=int(rng.integers(0, 2 ** 32)), round=int(rng.integers(0, 2 ** 32)), renewal=renewal,
        q_prev=q_prev, q_t=q_t, eigenvalues=np.sort(rng.standard_normal(q_t - q_prev))[::-1],
        rho=float(rng.standard_normal()), gradient=rng.standard_normal(n) * 10.0 ** rng.integers(-300, 300),
        messages=msgs, master_seed=int(rng.integers(0, 2 ** 63)) * 2 + 1 if renewal else None,
        exact_vectors=exact, infeasible=bool(rng.integers(0, 2)),
    )


def test_fuzz_roundtrip():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        u = random_update(rng)
        buf = encode(u)
        assert decode(buf) == u
        assert encode(decode(buf)) == buf


def test_gradient_only_roundtrip():
    u = DeviceUpdate(0, 1, False, 0, 0, [], 1.5, np.arange(3.0))
    assert decode(encode(u)) == u
    assert payload_bits(u) == 0


def test_payload_example():
    msgs = [RefinementMessage(0, 0, 0, 2, np.array([3, 0, 1, 2], dtype=np.uint64)),
            RefinementMessage(1, 0, 0, 1, np.array([1, 0, 1, 1], dtype=np.uint64))]
    u = DeviceUpdate(0, 1, True, 0, 2, [2.0, 1.0], 0.5, np.zeros(4), msgs, master_seed=7)
    assert payload_bits(u) == 12
    buf = encode(u)
    fixed = protocol._HEADER.size + 8 + 8 * 2 + 8 + 8 * 4 + 2 * protocol._MSG.size
    assert len(buf) - fixed == 2


def test_payload_three_ones():
    msgs = [RefinementMessage(i, 0, 0, 1, np.zeros(10, dtype=np.uint64)) for i in range(3)]
    u = DeviceUpdate(0, 1, True, 0, 3, [3.0, 2.0, 1.0], 0.0, np.zeros(10), msgs, master_seed=1)
    assert payload_bits(u) == 30


def test_header_layout():
    u = DeviceUpdate(5, 9, False, 1, 2, [0.5], 0.25, np.zeros(2))
    buf = encode(u)
    assert buf[:4] == b"QSHD"
    assert buf[4] == protocol.VERSION
    assert struct.unpack_from("<I", buf, 5)[0] == 5
    assert struct.unpack_from("<I", buf, 9)[0] == 9


def test_bad_magic_and_version():
    buf = bytearray(encode(DeviceUpdate(0, 1, False, 0, 0, [], 1.0, np.ones(2))))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(ProtocolError):
        decode(bad)
    buf[4] = 99
    with pytest.raises(ProtocolError):
        decode(bytes(buf))


def test_truncation_and_trailing():
    rng = np.random.default_rng(1)
    for _ in range(50):
        buf = encode(random_update(rng))
        with pytest.raises(ProtocolError):
            decode(buf[: int(rng.integers(0, len(buf)))])
        with pytest.raises(ProtocolError):
            decode(buf + b"\x00")


def test_bit_count_mismatch():
    msg = RefinementMessage(0, 0, 0, 3, np.array([1, 2], dtype=np.uint64))
    u = DeviceUpdate(0, 1, True, 0, 1, [1.0], 0.0, np.zeros(2), [msg], master_seed=3)
    buf = bytearray(encode(u))
    offset = protocol._HEADER.size + 8 + 8 + 8 + 16
    buf[offset + 4] = 5  # declare 5 bits where 3 were packed
    with pytest.raises(ProtocolError):
        decode(bytes(buf))


def test_non_descending_eigenvalues_rejected():
    u = DeviceUpdate(0, 1, False, 0, 2, [1.0, 2.0], 0.0, np.zeros(1))
    with pytest.raises(ProtocolError):
        decode(encode(u))


def test_encode_validation():
    with pytest.raises(ProtocolError):
        encode(DeviceUpdate(0, 1, False, 0, 2, [1.0], 0.0, np.zeros(1)))
    with pytest.raises(ProtocolError):
        encode(DeviceUpdate(0, 1, True, 0, 0, [], 0.0, np.zeros(1)))
    msg = RefinementMessage(0, 0, 0, 1, np.zeros(3, dtype=np.uint64))
    with pytest.raises(ProtocolError):
        encode(DeviceUpdate(0, 1, True, 0, 1, [1.0], 0.0, np.zeros(2), [msg], master_seed=1))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_garbage_only_raises_protocol_error(data):
    try:
        decode(b"QSHD\x01" + data)
    except ProtocolError:
        pass


def test_broadcast_roundtrip():
    b = Broadcast(3, np.array([1.0, -2.5]), 0.5, True)
    assert protocol.decode_broadcast(protocol.encode_broadcast(b)) == b
    with pytest.raises(ProtocolError):
        protocol.decode_broadcast(b"QSHX" + protocol.encode_broadcast(b)[4:])
    with pytest.raises(ProtocolError):
        protocol.decode_broadcast(protocol.encode_broadcast(b) + b"\x00")
