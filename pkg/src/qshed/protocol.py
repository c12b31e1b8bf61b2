"""Byte-level message formats exchanged between devices and the aggregator.

See PROTOCOL.md for the normative layout. Fixed-width fields are
little-endian; quantized cell indices travel in one big-endian, MSB-first
bitstream after all fixed fields.
"""
from dataclasses import dataclass, field
import struct

import numpy as np

from .dither_quant import MAX_DEPTH, RefinementMessage, pack_bits, unpack_bits
from .errors import ProtocolError

MAGIC = b"QSHD"
BROADCAST_MAGIC = b"QSHB"
VERSION = 1

FLAG_RENEWAL = 0x01
FLAG_INFEASIBLE = 0x02

_HEADER = struct.Struct("<4sBIIBHHIHHI")
_MSG = struct.Struct("<HBBB")
_BCAST = struct.Struct("<4sBIdBI")


def _farray(a):
    a = np.array(a, dtype=np.float64).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DeviceUpdate:
    device: int
    round: int
    renewal: bool
    q_prev: int
    q_t: int
    eigenvalues: np.ndarray  # lambda_{q_prev+1} .. lambda_{q_t}
    rho: float
    gradient: np.ndarray
    messages: tuple = ()
    master_seed: object = None  # present on renewal rounds only
    exact_vectors: tuple = ()  # (index, vector) pairs sent at full precision
    infeasible: bool = False

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", _farray(self.eigenvalues))
        object.__setattr__(self, "gradient", _farray(self.gradient))
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(
            self, "exact_vectors", tuple((int(i), _farray(v)) for i, v in self.exact_vectors)
        )

    @property
    def n(self):
        return self.gradient.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DeviceUpdate):
            return NotImplemented
        head = ("device", "round", "renewal", "q_prev", "q_t", "master_seed", "infeasible")
        if any(getattr(self, k) != getattr(other, k) for k in head):
            return False
        if np.float64(self.rho).tobytes() != np.float64(other.rho).tobytes():
            return False
        if self.eigenvalues.tobytes() != other.eigenvalues.tobytes():
            return False
        if self.gradient.tobytes() != other.gradient.tobytes():
            return False
        if self.messages != other.messages:
            return False
        if len(self.exact_vectors) != len(other.exact_vectors):
            return False
        return all(
            i == j and v.tobytes() == w.tobytes()
            for (i, v), (j, w) in zip(self.exact_vectors, other.exact_vectors)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Broadcast:
    round: int
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta: float = 0.0
    terminate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "theta", _farray(self.theta))

    def __eq__(self, other):
        if not isinstance(other, Broadcast):
            return NotImplemented
        return (
            self.round == other.round
            and self.terminate == other.terminate
            and np.float64(self.eta).tobytes() == np.float64(other.eta).tobytes()
            and self.theta.tobytes() == other.theta.tobytes()
        )

    __hash__ = None


def payload_bits(update):
    """Bits charged against the round budget: quantized indices plus full-precision vectors."""
    bits = sum(m.payload_bits for m in update.messages)
    return bits + sum(64 * v.shape[0] for _, v in update.exact_vectors)


def encode(update):
    n = update.n
    if len(update.eigenvalues) != update.q_t - update.q_prev:
        raise ProtocolError("eigenvalue count does not match q_t - q_prev")
    for m in update.messages:
        if m.n != n:
            raise ProtocolError(f"message for eigenvector {m.index} has dimension {m.n}, expected {n}")
    stream, nbits = pack_bits([(m.sub_indices, m.added_bits) for m in update.messages])
    flags = (FLAG_RENEWAL if update.renewal else 0) | (FLAG_INFEASIBLE if update.infeasible else 0)
    if update.renewal != (update.master_seed is not None):
        raise ProtocolError("master seed must be present exactly on renewal rounds")
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, update.device, update.round, flags, update.q_prev, update.q_t,
            n, len(update.messages), len(update.exact_vectors), len(stream),
        )
    ]
    if update.renewal:
        parts.append(struct.pack("<Q", update.master_seed))
    parts.append(update.eigenvalues.astype("<f8").tobytes())
    parts.append(struct.pack("<d", update.rho))
    parts.append(update.gradient.astype("<f8").tobytes())
    for m in update.messages:
        parts.append(_MSG.pack(m.index, m.stage, m.prior_bits, m.added_bits))
    for i, v in update.exact_vectors:
        if v.shape[0] != n:
            raise ProtocolError("exact vector dimension mismatch")
        parts.append(struct.pack("<H", i))
        parts.append(v.astype("<f8").tobytes())
    parts.append(stream)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, size):
        if size < 0 or self.pos + size > len(self.buf):
            raise ProtocolError("truncated buffer")
        out = self.buf[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def decode(buf):
    r = _Reader(buf)
    (magic, version, device, rnd, flags, q_prev, q_t, n, n_msgs, n_exact,
     stream_len) = r.unpack(_HEADER)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if q_t < q_prev:
        raise ProtocolError("q_t smaller than q_prev")
    renewal = bool(flags & FLAG_RENEWAL)
    seed = struct.unpack("<Q", r.take(8))[0] if renewal else None
    eigenvalues = r.floats(q_t - q_prev)
    if np.any(np.diff(eigenvalues) > 0):
        raise ProtocolError("eigenvalues are not in descending order")
    (rho,) = struct.unpack("<d", r.take(8))
    grad = r.floats(n)
    headers = [r.unpack(_MSG) for _ in range(n_msgs)]
    exact = []
    for _ in range(n_exact):
        (i,) = struct.unpack("<H", r.take(2))
        exact.append((i, r.floats(n)))
    stream = bytes(r.take(stream_len))
    if r.pos != len(r.buf):
        raise ProtocolError("trailing bytes after declared payload")
    nbits = n * sum(h[3] for h in headers)
    if stream_len != (nbits + 7) // 8:
        raise ProtocolError(f"bitstream length {stream_len} does not match declared bits {nbits}")
    for h in headers:
        if h[3] < 1:
            raise ProtocolError("refinement message with no bits")
        if h[2] + h[3] > MAX_DEPTH:
            raise ProtocolError(f"eigenvector {h[0]}: depth {h[2] + h[3]} exceeds {MAX_DEPTH}")
    subs = unpack_bits(stream, [(n, h[3]) for h in headers])
    messages = tuple(
        RefinementMessage(i, stage, prior, added, s)
        for (i, stage, prior, added), s in zip(headers, subs)
    )
    return DeviceUpdate(
        device, rnd, renewal, q_prev, q_t, eigenvalues, rho, grad, messages, seed,
        tuple(exact), bool(flags & FLAG_INFEASIBLE),
    )


def encode_broadcast(msg):
    head = _BCAST.pack(BROADCAST_MAGIC, VERSION, msg.round, msg.eta, int(msg.terminate), msg.theta.shape[0])
    return head + msg.theta.astype("<f8").tobytes()


def decode_broadcast(buf):
    r = _Reader(buf)
    magic, version, rnd, eta, term, n = r.unpack(_BCAST)
    if magic != BROADCAST_MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    theta = r.floats(n)
    if r.pos != len(r.buf):
        raise ProtocolError("trailing bytes after broadcast")
    return Broadcast(rnd, theta, eta, bool(term))
