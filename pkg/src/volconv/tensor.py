"""Dense array helpers and the seeded random source.

Arrays are plain ``numpy.ndarray`` values in row-major order. Network
activations use the channel-last layout ``(N, X, Y, Z, C)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

_TWO_POW_M53 = 1.0 / (1 << 53)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (last axis has stride 1)."""
    out = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        out[d] = out[d + 1] * int(shape[d + 1])
    return tuple(out)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} != shape rank {len(shape)}")
    flat = 0
    for i, n, s in zip(index, shape, strides_of(shape)):
        if not 0 <= i < n:
            raise ShapeError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        flat += int(i) * s
    return flat


def unravel_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    total = int(np.prod(shape, dtype=np.int64))
    if not 0 <= flat < total:
        raise ShapeError(f"flat index {flat} out of range for {tuple(shape)}")
    out = []
    for s in strides_of(shape):
        q, flat = divmod(flat, s)
        out.append(q)
    return tuple(out)


def zero_pad(t: np.ndarray, pad: Sequence[tuple[int, int]]) -> np.ndarray:
    if len(pad) != t.ndim:
        raise ShapeError(f"pad has {len(pad)} entries for a rank-{t.ndim} tensor")
    for before, after in pad:
        if before < 0 or after < 0:
            raise ValueError("padding must be non-negative")
    out = np.zeros(
        tuple(n + b + a for n, (b, a) in zip(t.shape, pad)), dtype=t.dtype
    )
    out[tuple(slice(b, b + n) for n, (b, _) in zip(t.shape, pad))] = t
    return out


def slice_box(
    t: np.ndarray, origin: Sequence[int], extent: Sequence[int]
) -> np.ndarray:
    if len(origin) != t.ndim or len(extent) != t.ndim:
        raise ShapeError("origin/extent rank does not match tensor rank")
    for o, e, n in zip(origin, extent, t.shape):
        if o < 0 or e < 0 or o + e > n:
            raise ShapeError(
                f"box origin={tuple(origin)} extent={tuple(extent)} "
                f"exceeds shape {t.shape}"
            )
    return t[tuple(slice(o, o + e) for o, e in zip(origin, extent))].copy()


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Stack tensors along their last (channel) axis."""
    if len(parts) == 0:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0]
    for p in parts[1:]:
        if p.ndim != ref.ndim or p.shape[:-1] != ref.shape[:-1]:
            raise ShapeError(
                f"cannot concatenate {p.shape} with {ref.shape} on channels"
            )
    return np.concatenate(parts, axis=-1)


class Rng:
    """Deterministic random source.

    The bit stream is PCG64 (128-bit LCG state with an XSL-RR output
    permutation) seeded through ``numpy.random.SeedSequence`` from
    ``(seed, *stream)``. Floating-point values are derived from the raw
    64-bit words by this class alone:

    * uniform: ``(word >> 11) * 2**-53`` in ``[0, 1)``
    * normal: Box-Muller on two uniforms
    * bounded integers: ``((word >> 32) * bound) >> 32``

    so a given seed produces the same values on every platform.
    """

    def __init__(self, seed: int, *stream: int):
        if seed < 0 or any(s < 0 for s in stream):
            raise ValueError("seeds must be non-negative")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._bits = np.random.PCG64(np.random.SeedSequence([self.seed, *self.stream]))

    def spawn(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def _unit(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0, dtype=np.float64):
        if not lo < hi:
            raise ValueError("uniform requires lo < hi")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        vals = (lo + (hi - lo) * self._unit(n)).astype(dtype)
        # rounding to a narrower dtype can land exactly on hi
        top = np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype))
        np.minimum(vals, top, out=vals)
        return vals.reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float64):
        if std < 0:
            raise ValueError("std must be non-negative")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self._unit(n)  # (0, 1]
        u2 = self._unit(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).astype(dtype).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` integers in ``[0, bound)``, bound < 2**32."""
        if not 0 < bound < (1 << 32):
            raise ValueError("bound must be in (0, 2**32)")
        hi = self.raw(n) >> np.uint64(32)
        return ((hi * np.uint64(bound)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.raw(n - 1) >> np.uint64(32)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int((int(draws[step]) * (i + 1)) >> 32)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def rng_uniform(rng: Rng, shape, lo: float, hi: float, dtype=np.float64) -> np.ndarray:
    return rng.uniform(shape, lo, hi, dtype)


def rng_normal(rng: Rng, shape, mean: float, std: float, dtype=np.float64) -> np.ndarray:
    return rng.normal(shape, mean, std, dtype)
