"""Quantization functions: symmetric linear grids, log-spaced magnitude grids,
spherical-codebook directions, their composition for 3D vectors, and bit-packed
storage.

A quantized 3D vector is represented by the pair (magnitude level, codeword
index); its reconstruction to R^3 is lossy float arithmetic, but the magnitude
level itself is exactly invariant under rotation of the input, which is the
property the rest of the toolkit builds on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import SphericalCodebook, codebook_id, nearest_many
from .errors import CodeOutOfRangeError, NotUnitError, ZeroVectorError
from .geom import rotate

KIND_LINEAR = "linear-symmetric"
KIND_MAGNITUDE = "magnitude-log"
KIND_DIRECTION = "direction"

_KIND_CODES = {KIND_LINEAR: 0, KIND_MAGNITUDE: 1, KIND_DIRECTION: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

MAGNITUDE_FLOOR = 1e-6
MAGNITUDE_CEIL = 1e3


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantScheme:
    kind: str
    bits: int
    scale: float | np.ndarray = 1.0
    codebook: SphericalCodebook | None = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bits}")
        if self.kind == KIND_DIRECTION:
            if self.codebook is None or len(self.codebook) > (1 << self.bits):
                raise ValueError("direction scheme needs a codebook fitting the bit budget")
        elif np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scalar quantizer scale must be positive")


def linear_scheme(bits: int, scale: float | np.ndarray) -> QuantScheme:
    return QuantScheme(kind=KIND_LINEAR, bits=bits, scale=scale)


def linear_scheme_from_maxabs(bits: int, maxabs: float | np.ndarray) -> QuantScheme:
    """Symmetric scale mapping the observed max magnitude to the top code."""
    maxabs = np.asarray(maxabs, dtype=np.float64)
    scale = np.where(maxabs > 0, maxabs, 1.0) / qmax(bits)
    return linear_scheme(bits, float(scale) if scale.ndim == 0 else scale)


def magnitude_scheme(bits: int, lo: float | np.ndarray, hi: float | np.ndarray) -> QuantScheme:
    """Log-spaced magnitude grid covering [lo, hi], clamped to the global range.

    The grid is symmetric in log space around magnitude 1, so the step is set
    by the log bound farthest from zero. Magnitude zero has a dedicated code.
    """
    lo = np.clip(np.asarray(lo, dtype=np.float64), MAGNITUDE_FLOOR, MAGNITUDE_CEIL)
    hi = np.clip(np.asarray(hi, dtype=np.float64), MAGNITUDE_FLOOR, MAGNITUDE_CEIL)
    span = np.maximum(np.abs(np.log(lo)), np.abs(np.log(hi)))
    span = np.maximum(span, 1e-3)
    scale = span / qmax(bits)
    return QuantScheme(kind=KIND_MAGNITUDE, bits=bits, scale=float(scale) if scale.ndim == 0 else scale)


def direction_scheme(bits: int, cb: SphericalCodebook) -> QuantScheme:
    return QuantScheme(kind=KIND_DIRECTION, bits=bits, codebook=cb)


def quantize_linear(x: np.ndarray | float, s: QuantScheme) -> np.ndarray | float:
    """Round to the symmetric grid and saturate at the code range."""
    assert s.kind == KIND_LINEAR
    x = np.asarray(x, dtype=np.float64)
    q = qmax(s.bits)
    out = np.clip(np.round(x / s.scale), -q, q) * s.scale
    return float(out) if out.ndim == 0 else out


def linear_codes(x: np.ndarray, s: QuantScheme) -> np.ndarray:
    assert s.kind == KIND_LINEAR
    q = qmax(s.bits)
    return np.clip(np.round(np.asarray(x, dtype=np.float64) / s.scale), -q, q).astype(np.int64)


def quantize_magnitude(m: np.ndarray | float, s: QuantScheme) -> np.ndarray | float:
    """Quantize non-negative magnitudes on the log grid; zero maps to zero."""
    assert s.kind == KIND_MAGNITUDE
    m = np.asarray(m, dtype=np.float64)
    q = qmax(s.bits)
    safe = np.where(m > 0, m, 1.0)
    level = np.clip(np.round(np.log(safe) / s.scale), -q, q)
    out = np.where(m > 0, np.exp(level * s.scale), 0.0)
    return float(out) if out.ndim == 0 else out


def magnitude_codes(m: np.ndarray, s: QuantScheme) -> np.ndarray:
    """Integer levels; the reserved code -2^(bits-1) marks exact zero."""
    assert s.kind == KIND_MAGNITUDE
    m = np.asarray(m, dtype=np.float64)
    q = qmax(s.bits)
    safe = np.where(m > 0, m, 1.0)
    level = np.clip(np.round(np.log(safe) / s.scale), -q, q).astype(np.int64)
    return np.where(m > 0, level, -(q + 1))


def quantize_direction(u: np.ndarray, s: QuantScheme) -> np.ndarray:
    """Snap unit vectors (..., 3) to the nearest codeword in angle."""
    assert s.kind == KIND_DIRECTION
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise NotUnitError("direction quantizer requires unit inputs")
    _, words = nearest_many(s.codebook, u)
    return words


def direction_codes(u: np.ndarray, s: QuantScheme) -> np.ndarray:
    assert s.kind == KIND_DIRECTION
    idx, _ = nearest_many(s.codebook, np.asarray(u, dtype=np.float64))
    return idx


def mddq_parts(
    v: np.ndarray, sm: QuantScheme, sd: QuantScheme
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose (..., 3) vectors into (quantized magnitude, codeword index, codeword).

    The zero vector maps to magnitude 0 with the index of the first codeword.
    """
    v = np.asarray(v, dtype=np.float64)
    m = np.linalg.norm(v, axis=-1)
    nonzero = m > 0
    safe_m = np.where(nonzero, m, 1.0)
    u = np.where(nonzero[..., None], v / safe_m[..., None], np.array([0.0, 0.0, 1.0]))
    m_hat = quantize_magnitude(np.where(nonzero, m, 0.0), sm)
    idx, words = nearest_many(sd.codebook, u)
    return np.asarray(m_hat), idx, words


def mddq(v: np.ndarray, sm: QuantScheme, sd: QuantScheme) -> np.ndarray:
    """Magnitude-direction decoupled quantization of (..., 3) vectors."""
    m_hat, _, words = mddq_parts(v, sm, sd)
    return np.asarray(m_hat)[..., None] * words


def commutation_error(v: np.ndarray, r: np.ndarray, sd: QuantScheme) -> float:
    """How far direction quantization is from commuting with a rotation."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ZeroVectorError("commutation error is undefined for the zero vector")
    u = v / norm
    qu = quantize_direction(u, sd)
    ru = rotate(r, u)
    qru = quantize_direction(ru / np.linalg.norm(ru), sd)
    return float(np.linalg.norm(qru - rotate(r, qu)))


# --- bit-packed storage ---------------------------------------------------


@dataclass
class PackedTensor:
    bits: int
    payload: bytes
    shape: tuple[int, ...]
    schemes: list[QuantScheme] = field(default_factory=list)

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack signed integer codes at the given width, LSB-first within each byte."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise CodeOutOfRangeError(f"codes outside the {bits}-bit range [{lo}, {hi}]")
    mask = (1 << bits) - 1
    unsigned = (codes & mask).astype(np.uint8)
    if bits == 8:
        return unsigned.tobytes()
    if bits == 4:
        if unsigned.size % 2:
            unsigned = np.append(unsigned, np.uint8(0))
        return (unsigned[0::2] | (unsigned[1::2] << 4)).tobytes()
    raise CodeOutOfRangeError(f"unsupported pack width {bits}")


def unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits == 8:
        unsigned = raw[:count].astype(np.int64)
    elif bits == 4:
        unsigned = np.empty(raw.size * 2, dtype=np.int64)
        unsigned[0::2] = raw & 0xF
        unsigned[1::2] = raw >> 4
        unsigned = unsigned[:count]
    else:
        raise CodeOutOfRangeError(f"unsupported unpack width {bits}")
    half = 1 << (bits - 1)
    return np.where(unsigned >= half, unsigned - (1 << bits), unsigned)


def pack_tensor(codes: np.ndarray, bits: int, schemes: list[QuantScheme]) -> PackedTensor:
    return PackedTensor(
        bits=bits,
        payload=pack_codes(codes, bits),
        shape=tuple(codes.shape),
        schemes=list(schemes),
    )


def unpack_tensor(p: PackedTensor) -> np.ndarray:
    return unpack_codes(p.payload, p.element_count, p.bits).reshape(p.shape)


_MAGIC = b"EQPK"
_VERSION = 1


def write_packed(p: PackedTensor, f) -> None:
    f.write(_MAGIC)
    f.write(struct.pack("<HBB", _VERSION, p.bits, len(p.shape)))
    for d in p.shape:
        f.write(struct.pack("<I", d))
    f.write(struct.pack("<I", len(p.schemes)))
    for s in p.schemes:
        cb_id = codebook_id(s.codebook.construction) if s.codebook is not None else 0
        scale = float(np.asarray(s.scale).ravel()[0]) if s.kind != KIND_DIRECTION else 0.0
        f.write(struct.pack("<BdI", _KIND_CODES[s.kind], scale, cb_id))
    f.write(p.payload)


def read_packed(f, codebooks: dict[int, SphericalCodebook] | None = None) -> PackedTensor:
    magic = f.read(4)
    if magic != _MAGIC:
        raise CodeOutOfRangeError(f"bad packed tensor magic {magic!r}")
    version, bits, rank = struct.unpack("<HBB", f.read(4))
    if version != _VERSION:
        raise CodeOutOfRangeError(f"unsupported packed tensor version {version}")
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    (n_schemes,) = struct.unpack("<I", f.read(4))
    schemes = []
    for _ in range(n_schemes):
        kind_code, scale, cb_id = struct.unpack("<BdI", f.read(13))
        kind = _KIND_NAMES[kind_code]
        if kind == KIND_DIRECTION:
            cb = (codebooks or {}).get(cb_id)
            if cb is None:
                raise CodeOutOfRangeError(f"packed tensor references unknown codebook {cb_id}")
            schemes.append(QuantScheme(kind=kind, bits=bits, codebook=cb))
        else:
            schemes.append(QuantScheme(kind=kind, bits=bits, scale=scale))
    count = 1
    for d in shape:
        count *= d
    payload_len = (count * bits + 7) // 8
    payload = f.read(payload_len)
    if len(payload) != payload_len:
        raise CodeOutOfRangeError("truncated packed tensor payload")
    return PackedTensor(bits=bits, payload=payload, shape=shape, schemes=schemes)
