"""Core numerics: binary16 conversion, counter-based RNG, tensor checks.

Everything here is a pure function; no hidden state anywhere (the thread
pool below configures parallelism but never changes results).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

MAX_RANK = 4

_U64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


# ---------------------------------------------------------------------------
# binary16 <-> binary32, bit level
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Half:
    """An IEEE 754 binary16 value held as its raw 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"half bits out of range: {self.bits:#x}")


def b32_to_b16(x: float) -> Half:
    """Round a binary32 value to the nearest binary16 (ties to even).

    Overflow past 65504 becomes a signed infinity; NaN stays NaN. Total
    function: every finite/inf/NaN input maps to some half pattern.
    """
    f = struct.unpack("<I", struct.pack("<f", np.float32(x)))[0]
    sign = (f >> 16) & 0x8000
    exp = (f >> 23) & 0xFF
    frac = f & 0x7FFFFF

    if exp == 0xFF:  # inf or nan
        if frac == 0:
            return Half(sign | 0x7C00)
        mant = frac >> 13
        if mant == 0:
            mant = 1  # keep it a NaN after truncation
        return Half(sign | 0x7C00 | mant)

    # Unbiased exponent of the binary32 value.
    e = exp - 127
    if e >= 16:
        # Half exponent 15 tops out at 65504; RNE sends >= 65520 to inf.
        # e == 15 handled below via mantissa rounding (may still overflow).
        return Half(sign | 0x7C00)
    if e >= -14:
        # Normal half range; 13 mantissa bits are dropped with RNE.
        mant = frac
        half = sign | ((e + 15) << 10) | (mant >> 13)
        rest = mant & 0x1FFF
        if rest > 0x1000 or (rest == 0x1000 and (mant >> 13) & 1):
            half += 1  # may carry into exponent, including into inf: correct
        return Half(half)
    if e >= -25:
        # Subnormal half: implicit leading 1 becomes explicit, then shift.
        mant = frac | 0x800000
        shift = -e - 14 + 13  # 14..24
        kept = mant >> shift
        rest = mant & ((1 << shift) - 1)
        tie = 1 << (shift - 1)
        if rest > tie or (rest == tie and kept & 1):
            kept += 1
        return Half(sign | kept)
    # Too small for even the largest shift: rounds to signed zero, except
    # exactly half of the smallest subnormal (2^-25) which ties to even 0.
    return Half(sign)


def b16_to_b32(h: Half) -> float:
    """Widen a binary16 pattern to binary32. Exact: no rounding ever occurs."""
    bits = h.bits
    sign = (bits >> 15) & 1
    exp = (bits >> 10) & 0x1F
    frac = bits & 0x3FF
    if exp == 0x1F:
        if frac:
            f = (sign << 31) | 0x7F800000 | (frac << 13)
        else:
            f = (sign << 31) | 0x7F800000
    elif exp == 0:
        if frac == 0:
            f = sign << 31
        else:
            # Normalize the subnormal significand (value = frac/2^10 * 2^-14).
            e = -14
            while not frac & 0x400:
                frac <<= 1
                e -= 1
            frac &= 0x3FF
            f = (sign << 31) | ((e + 127) << 23) | (frac << 13)
    else:
        f = (sign << 31) | ((exp - 15 + 127) << 23) | (frac << 13)
    return float(struct.unpack("<f", struct.pack("<I", f))[0])


def narrow_f32(x: np.ndarray) -> np.ndarray:
    """Vectorized binary32 -> binary16 with RNE (hardware semantics).

    Values past the widest half round to signed infinity, silently.
    """
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16)


def widen_f16(x: np.ndarray) -> np.ndarray:
    """Vectorized binary16 -> binary32 (exact)."""
    return np.asarray(x, dtype=np.float16).astype(np.float32)


# ---------------------------------------------------------------------------
# Counter-based RNG (splitmix64 over (seed, index))
# ---------------------------------------------------------------------------

def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _U64
    z = ((z ^ (z >> 27)) * _MIX2) & _U64
    return z ^ (z >> 31)


def rand_uniform(seed: int, index: int) -> float:
    """Deterministic draw in [0, 1) as a pure function of (seed, index)."""
    z = (seed + index * _GOLDEN) & _U64
    return (_mix64(z) >> 11) / float(1 << 53)


def rand_uniform_array(seed: int, start: int, count: int) -> np.ndarray:
    """rand_uniform for indices start..start+count-1, vectorized, float64.

    Bit-identical to calling rand_uniform per index.
    """
    idx = np.arange(start, start + count, dtype=np.uint64)
    z = np.uint64(seed & _U64) + idx * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def derive_seed(base: int, *tags: int) -> int:
    """Fold integer tags into a fresh 64-bit seed (for per-site dropout streams)."""
    h = base & _U64
    for t in tags:
        h = _mix64((h + _GOLDEN + (t & _U64)) & _U64)
    return h


# ---------------------------------------------------------------------------
# Tensor checks
# ---------------------------------------------------------------------------

TENSOR_DTYPES = (np.float16, np.float32, np.float64)


def check_tensor(x: np.ndarray, *, max_rank: int = MAX_RANK) -> np.ndarray:
    """Validate the tensor contract: rank <= 4, all dims >= 1, float dtype.

    Row-major flat storage of length prod(dims) is what ndarray gives us;
    the check guards the construction-site invariants.
    """
    x = np.asarray(x)
    if x.dtype.type not in TENSOR_DTYPES:
        raise ShapeMismatch(f"unsupported tensor dtype {x.dtype}")
    if x.ndim > max_rank:
        raise ShapeMismatch(f"rank {x.ndim} exceeds maximum {max_rank}")
    if any(d < 1 for d in x.shape):
        raise ShapeMismatch(f"non-positive dim in shape {x.shape}")
    return x


def make_tensor(data, shape, dtype=np.float32) -> np.ndarray:
    flat = np.asarray(data, dtype=dtype).reshape(-1)
    n = int(np.prod(shape))
    if flat.size != n:
        raise ShapeMismatch(f"data length {flat.size} != prod(shape) {n}")
    return check_tensor(flat.reshape(shape))


# ---------------------------------------------------------------------------
# Worker pool for row-parallel kernels
# ---------------------------------------------------------------------------
#
# Results never depend on the pool size: work is split by contiguous row
# ranges, every range is computed by the same per-row code, and outputs
# land in disjoint slices of preallocated buffers.

_num_threads = 1
_pool: ThreadPoolExecutor | None = None

# Below this many rows the dispatch overhead outweighs any gain.
PARALLEL_MIN_ROWS = 2048


def set_num_threads(n: int) -> None:
    global _num_threads, _pool
    n = max(1, int(n))
    if n != _num_threads and _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _num_threads = n


def get_num_threads() -> int:
    return _num_threads


def run_row_chunks(fn, n_rows: int) -> None:
    """Run fn(start, stop) over a partition of range(n_rows).

    fn must write only to rows [start, stop) of its outputs.
    """
    if _num_threads == 1 or n_rows < PARALLEL_MIN_ROWS:
        fn(0, n_rows)
        return
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=_num_threads)
    step = -(-n_rows // _num_threads)
    futures = [
        _pool.submit(fn, s, min(s + step, n_rows))
        for s in range(0, n_rows, step)
    ]
    for f in futures:
        f.result()
