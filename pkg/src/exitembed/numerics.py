"""Deterministic numeric kernels and the INT4 activation format.

All tensors are ``float32`` numpy arrays. Matrix products go through
:func:`matmul_rows`, which accumulates over the inner index strictly in
ascending order, one column at a time. Every output element therefore sees the
same sequence of float32 multiply/add operations no matter how many rows are
batched together, which is what makes batched and per-sample execution
bitwise comparable.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class Rng:
    """SplitMix64 generator.

    The recurrence, with all arithmetic modulo 2**64::

        state_k = seed + k * 0x9E3779B97F4A7C15          (k = 1, 2, ...)
        z = state_k
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        out_k = z ^ (z >> 31)

    Because ``state_k`` is an affine function of ``k`` a block of outputs is
    computed in one vectorized pass. Uniform floats take the top 53 bits:
    ``(out >> 11) * 2**-53``. Integer outputs are identical on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + ks * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def symmetric(self, shape, scale: float = 1.0) -> np.ndarray:
        """Zero-mean, unit-variance uniform draws times ``scale`` as float32.

        Uses only IEEE-exact operations, so the values are platform independent.
        """
        n = int(np.prod(shape))
        u = self.uniform(n, -math.sqrt(3.0), math.sqrt(3.0))
        return (u * scale).astype(DTYPE).reshape(shape)

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller; relies on libm log/cos so only same-platform reproducible.
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the stream so the order is platform independent.
        perm = np.arange(n)
        draws = self.next_u64(max(n - 1, 0))
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[idx] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(root: int, *names: str | int) -> int:
    """Child seed for a named stage: fold FNV-1a hashes of ``names`` into ``root``."""
    s = int(root) & _MASK64
    for name in names:
        h = 0xCBF29CE484222325
        for byte in str(name).encode():
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
        s = splitmix64(s ^ h)
    return s


def as_vec(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dim {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul_rows(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Row-batched ``x @ m.T`` with a fixed ascending reduction order.

    ``x`` has shape (batch, cols) and ``m`` (rows, cols); the result is
    (batch, rows) with ``out[b, i] = sum_j m[i, j] * x[b, j]`` accumulated
    for j = 0, 1, ... in float32.
    """
    x = np.asarray(x, dtype=DTYPE)
    m = np.asarray(m, dtype=DTYPE)
    if x.ndim != 2 or m.ndim != 2:
        raise ValueError("matmul_rows expects 2-D operands")
    if x.shape[1] != m.shape[1]:
        raise ValueError(f"dimension mismatch: x has {x.shape[1]} columns, matrix has {m.shape[1]}")
    mt = np.ascontiguousarray(m.T)
    acc = np.zeros((x.shape[0], m.shape[0]), dtype=DTYPE)
    for j in range(m.shape[1]):
        acc += x[:, j : j + 1] * mt[j]
    return acc


def matvec(m, x) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    x = as_vec(x)
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {m.shape[0]}x{m.shape[1]}, vector has {x.shape[0]}")
    return matmul_rows(x[None, :], m)[0]


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU, evaluated in float32."""
    x = np.asarray(x, dtype=DTYPE)
    c = DTYPE(math.sqrt(2.0 / math.pi))
    inner = c * (x + DTYPE(0.044715) * x * x * x)
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))


def l2_normalize(x) -> np.ndarray:
    """Normalize along the last axis; zero rows are returned unchanged."""
    x = np.asarray(x, dtype=DTYPE)
    sq = np.zeros(x.shape[:-1], dtype=DTYPE)
    for j in range(x.shape[-1]):
        sq += x[..., j] * x[..., j]
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, DTYPE(1.0))
    return np.where((norm > 0)[..., None], x / safe[..., None], x).astype(DTYPE)


def cosine(x, y) -> float:
    """Cosine similarity in [-1, 1]; 0 when either vector is zero."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(cosine_matrix(x[None, :], y[None, :])[0, 0])


def cosine_matrix(queries, keys) -> np.ndarray:
    """Pairwise cosine similarities, shape (n_q, n_k), in float64.

    Dot products and norms accumulate in ascending index order, so a score
    depends only on the two vectors involved. Zero vectors score 0.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {k.shape[1]}")
    dots = np.zeros((q.shape[0], k.shape[0]))
    qn = np.zeros(q.shape[0])
    kn = np.zeros(k.shape[0])
    for j in range(q.shape[1]):
        dots += q[:, j : j + 1] * k[:, j]
        qn += q[:, j] * q[:, j]
        kn += k[:, j] * k[:, j]
    denom = np.sqrt(qn)[:, None] * np.sqrt(kn)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# INT4
# ---------------------------------------------------------------------------

INT4_MAX = 7


@dataclass(frozen=True)
class QuantBlock:
    scale: float
    packed: bytes
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if len(self.packed) != (self.count + 1) // 2:
            raise ValueError(
                f"packed length {len(self.packed)} does not match count {self.count}"
            )
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def codes(self) -> np.ndarray:
        return unpack_int4(self.packed, self.count)

    def to_bytes(self) -> bytes:
        return struct.pack("<If", self.count, self.scale) + self.packed

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["QuantBlock", int]:
        """Parse one block; returns it and the offset just past it."""
        if len(buf) - offset < 8:
            raise ValueError("truncated QuantBlock header")
        count, scale = struct.unpack_from("<If", buf, offset)
        n = (count + 1) // 2
        start = offset + 8
        if len(buf) - start < n:
            raise ValueError("truncated QuantBlock payload")
        return cls(scale=scale, packed=bytes(buf[start : start + n]), count=count), start + n

    @staticmethod
    def nbytes(count: int) -> int:
        return 8 + (count + 1) // 2


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pack_int4(codes: np.ndarray) -> bytes:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < -8 or codes.max() > 7):
        raise ValueError("int4 codes must lie in [-8, 7]")
    nib = (codes & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(packed: bytes, count: int) -> np.ndarray:
    if len(packed) != (count + 1) // 2:
        raise ValueError(f"packed length {len(packed)} does not match count {count}")
    raw = np.frombuffer(packed, dtype=np.uint8)
    nib = np.empty(raw.size * 2, dtype=np.int64)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count]
    return np.where(nib >= 8, nib - 16, nib)


def quantize_int4(x) -> QuantBlock:
    """Symmetric per-tensor INT4 with codes in [-7, 7]."""
    x = np.asarray(x, dtype=DTYPE).ravel()
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / INT4_MAX if peak > 0 else 1.0
    # float32 rounding can make peak/7 underflow for subnormal inputs
    scale = float(np.float32(scale)) or 1.0
    codes = round_half_away(x.astype(np.float64) / scale)
    codes = np.clip(codes, -INT4_MAX, INT4_MAX).astype(np.int64)
    return QuantBlock(scale=scale, packed=pack_int4(codes), count=x.size)


def dequantize_int4(q: QuantBlock) -> np.ndarray:
    codes = q.codes
    if codes.size and (codes.min() < -INT4_MAX):
        raise ValueError("malformed INT4 block: code -8 is not produced by this scheme")
    return (codes.astype(np.float64) * q.scale).astype(DTYPE)
