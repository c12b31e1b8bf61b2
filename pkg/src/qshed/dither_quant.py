"""Subtractive-dithered uniform quantization of unit-vector coordinates.

Coordinates live in [-1, 1], split into ``2**b`` mid-rise cells of width
``delta = 2**(1 - b)``. A coordinate ``v`` is shifted by a dither ``u``
drawn uniformly from ``[-delta0/2, delta0/2)`` and the cell index of
``w = v + u`` is transmitted; the receiver regenerates ``u`` from the seed
and reconstructs ``-1 + (c + 0.5) * delta - u``.

Refinement keeps the dither of the first stage (width ``delta0``) and
transmits the extra low-order bits of the cell index of the same ``w`` at the
finer resolution. Since ``delta0`` is an integer multiple of every finer cell
width, the fine-scale quantization error of ``w`` is still uniform on
``[-delta/2, delta/2)`` and independent of ``v``, and the new index always
extends the old one (``c_new >> added == c_old``).

Dither streams come from numpy's PCG64 bit generator, seeded through
``SeedSequence``; raw 64-bit outputs are mapped to doubles as
``(x >> 11) * 2**-53`` so the stream does not depend on numpy's
distribution code.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InvalidInput, ProtocolError

MAX_DEPTH = 60


def derive_seed(master, *path):
    """Deterministic 64-bit child seed for ``(master, *path)``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def uniform_stream(seed, size):
    """``size`` doubles uniform on [0, 1) from the PCG64 stream of ``seed``."""
    raw = np.random.PCG64(int(seed)).random_raw(size)
    raw = np.asarray(raw, dtype=np.uint64)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def cell_width(bits):
    return 2.0 ** (1 - bits)


def dither_for(seed, n, base_bits):
    return (uniform_stream(seed, n) - 0.5) * cell_width(base_bits)


def _cells(w, bits):
    y = np.clip(np.floor((w + 1.0) * 2.0 ** (bits - 1)), 0.0, 2.0 ** bits)
    # clamp in integers: 2**bits - 1 is not representable as a double past 53 bits
    y = np.minimum(y.astype(np.int64), np.int64((1 << bits) - 1))
    return y.astype(np.uint64)


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    indices: np.ndarray  # uint64 cell indices at depth ``bits``
    bits: int  # cumulative bit depth
    base_bits: int  # depth of the first stage, fixes the dither width
    seed: object  # dither seed, None when the dither was supplied explicitly
    stages: int
    dither: np.ndarray

    @property
    def n(self):
        return self.indices.shape[0]

    @property
    def delta(self):
        return cell_width(self.bits)

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.base_bits == other.base_bits
            and self.seed == other.seed
            and self.stages == other.stages
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.dither, other.dither)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RefinementMessage:
    """Bits sent for one eigenvector in one round.

    Stage 0 carries the full cell indices of a fresh quantization; later
    stages carry the ``added_bits`` new low-order bits of every index.
    """

    index: int
    stage: int
    prior_bits: int
    added_bits: int
    sub_indices: np.ndarray

    @property
    def n(self):
        return self.sub_indices.shape[0]

    @property
    def payload_bits(self):
        return self.n * self.added_bits

    def __eq__(self, other):
        if not isinstance(other, RefinementMessage):
            return NotImplemented
        return (
            (self.index, self.stage, self.prior_bits, self.added_bits)
            == (other.index, other.stage, other.prior_bits, other.added_bits)
            and np.array_equal(self.sub_indices, other.sub_indices)
        )

    __hash__ = None


def _check_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInput("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("vector has non-finite components")
    return v


def _check_bits(bits, name="b"):
    if int(bits) != bits or bits < 1:
        raise InvalidInput(f"{name} must be an integer >= 1, got {bits}")
    if bits > MAX_DEPTH:
        raise InvalidInput(f"{name}={bits} exceeds the maximum depth {MAX_DEPTH}")
    return int(bits)


def quantize(v, b, seed=None, dither=None):
    """Quantize ``v`` with ``b`` bits per coordinate.

    Either ``seed`` (dither regenerated from the stream) or an explicit
    ``dither`` array must be given.
    """
    v = _check_vector(v)
    b = _check_bits(b)
    n = v.shape[0]
    if dither is None:
        if seed is None:
            raise InvalidInput("quantize needs a seed or an explicit dither")
        u = dither_for(seed, n, b)
    else:
        u = np.array(dither, dtype=np.float64).reshape(n)
        seed = None
    w = v + u
    return QuantizedVector(_frozen(_cells(w, b)), b, b, seed, 1, _frozen(u))


def dequantize(qv):
    if qv.stages < 1 or qv.bits < qv.base_bits or qv.dither.shape != qv.indices.shape:
        raise ProtocolError("quantized vector state is inconsistent (seed/stage mismatch)")
    v_hat = -1.0 + (qv.indices.astype(np.float64) + 0.5) * qv.delta - qv.dither
    return np.clip(v_hat, -1.0, 1.0)


def first_message(qv, index):
    """The stage-0 message that transmits ``qv`` from scratch."""
    if qv.stages != 1:
        raise InvalidInput("first_message expects a freshly quantized vector")
    return RefinementMessage(int(index), 0, 0, qv.bits, qv.indices)


def refine(qv, v, added_bits, index=0):
    """Add ``added_bits`` of resolution to ``qv``; ``v`` is the original vector.

    Returns the refined vector and the message a receiver needs to perform
    the same update.
    """
    v = _check_vector(v)
    if int(added_bits) != added_bits or added_bits < 1:
        raise InvalidInput(f"added_bits must be an integer >= 1, got {added_bits}")
    added_bits = int(added_bits)
    new_bits = _check_bits(qv.bits + added_bits, "cumulative depth")
    if v.shape != qv.indices.shape:
        raise InvalidInput("vector dimension does not match the quantized state")
    w = v + qv.dither
    if not np.array_equal(_cells(w, qv.bits), qv.indices):
        raise ConsistencyError("vector is not the one that produced the stored cell indices")
    fine = _cells(w, new_bits)
    mask = np.uint64((1 << added_bits) - 1)
    sub = _frozen(fine & mask)
    msg = RefinementMessage(int(index), qv.stages, qv.bits, added_bits, sub)
    refined = QuantizedVector(_frozen(fine), new_bits, qv.base_bits, qv.seed, qv.stages + 1, qv.dither)
    return refined, msg


def apply_refinement(qv, msg, seed=None):
    """Receiver-side update of ``qv`` by ``msg``.

    A stage-0 message starts a new vector (``qv`` must be None and the dither
    ``seed`` known); later stages must match the receiver's depth and stage.
    """
    if msg.stage == 0:
        if qv is not None:
            raise ProtocolError(f"eigenvector {msg.index}: fresh quantization sent over existing state")
        if seed is None:
            raise ProtocolError(f"eigenvector {msg.index}: no dither seed for a fresh quantization")
        if msg.prior_bits != 0:
            raise ProtocolError("stage-0 message with non-zero prior depth")
        bits = _check_bits(msg.added_bits)
        u = dither_for(seed, msg.n, bits)
        return QuantizedVector(msg.sub_indices, bits, bits, seed, 1, _frozen(u))
    if qv is None:
        raise ProtocolError(f"eigenvector {msg.index}: refinement without prior state")
    if msg.prior_bits != qv.bits or msg.stage != qv.stages:
        raise ProtocolError(
            f"eigenvector {msg.index}: depth/stage mismatch "
            f"(message {msg.prior_bits}/{msg.stage}, receiver {qv.bits}/{qv.stages})"
        )
    if msg.n != qv.n:
        raise ProtocolError("refinement dimension mismatch")
    new_bits = qv.bits + msg.added_bits
    if new_bits > MAX_DEPTH:
        raise ProtocolError(f"refinement exceeds maximum depth {MAX_DEPTH}")
    fine = (qv.indices << np.uint64(msg.added_bits)) | msg.sub_indices
    return QuantizedVector(_frozen(fine), new_bits, qv.base_bits, qv.seed, qv.stages + 1, qv.dither)


def apply_refinements(qv, msgs, seed=None):
    for msg in msgs:
        qv = apply_refinement(qv, msg, seed)
    return qv


def pack_bits(groups):
    """Pack ``[(values, width), ...]`` into a big-endian, MSB-first buffer.

    Returns ``(buffer, nbits)``; the buffer is zero-padded to whole bytes.
    """
    chunks = []
    for values, width in groups:
        values = np.asarray(values, dtype=np.uint64)
        if width == 0 or values.size == 0:
            continue
        if width < 64 and np.any(values >> np.uint64(width)):
            raise InvalidInput(f"value does not fit in {width} bits")
        shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
        chunks.append(((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel())
    if not chunks:
        return b"", 0
    bitvec = np.concatenate(chunks)
    return np.packbits(bitvec).tobytes(), int(bitvec.size)


def unpack_bits(buffer, layout):
    """Inverse of :func:`pack_bits` for ``layout = [(count, width), ...]``."""
    total = sum(count * width for count, width in layout)
    if total > 8 * len(buffer):
        raise ProtocolError("bit buffer is shorter than the declared layout")
    bitvec = np.unpackbits(np.frombuffer(buffer, dtype=np.uint8))
    if np.any(bitvec[total:]):
        raise ProtocolError("non-zero padding bits")
    out = []
    pos = 0
    for count, width in layout:
        if width == 0 or count == 0:
            out.append(np.zeros(count, dtype=np.uint64))
            continue
        chunk = bitvec[pos:pos + count * width].reshape(count, width).astype(np.uint64)
        shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
        out.append(_frozen((chunk << shifts).sum(axis=1, dtype=np.uint64)))
        pos += count * width
    return out
