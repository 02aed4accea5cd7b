"""3D convolution lowered to a single matrix product.

Convolutions use stride 1 and "same" zero padding with an odd cubic kernel
of side ``l``. For an input of shape ``(N, X, Y, Z, C)`` and a filter of
shape ``(C, l, l, l, M)`` the forward pass is

    out(M x NXYZ) = F(M x C*l^3) @ cols(C*l^3 x NXYZ) + bias

where ``cols`` is the im2col matrix: row ``(c, dx, dy, dz)`` (row-major)
holds channel ``c`` of the padded input shifted by ``(dx, dy, dz)``, and
column ``j`` is output voxel ``(n, x, y, z)`` in row-major order.

The product runs either through the cache-blocked loop in this module
(``kernel="blocked"``) or through numpy's BLAS (``kernel="blas"``). The
im2col buffer is materialised; when it would exceed ``budget_bytes`` the
columns are processed in slabs of ``(n, x)`` lines.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .errors import ShapeError
from .tensor import Rng

DEFAULT_BUDGET_BYTES = 512 * 2**20

# Block sizes for the in-repo GEMM. With float32 a row segment of C is
# nc*4 = 8 KiB (L1) and a B block is kc*nc*4 = 1 MiB (L2).
BLOCK_MC = 64
BLOCK_KC = 128
BLOCK_NC = 2048


@dataclass
class ConvFilter:
    weights: np.ndarray  # (C, l, l, l, M)
    bias: np.ndarray  # (M,)

    def __post_init__(self):
        w = self.weights
        if w.ndim != 5 or not (w.shape[1] == w.shape[2] == w.shape[3]):
            raise ShapeError(f"filter must be (C, l, l, l, M), got {w.shape}")
        if w.shape[1] % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {w.shape[1]}")
        if min(w.shape) < 1:
            raise ShapeError(f"filter extents must be positive, got {w.shape}")
        if self.bias.shape != (w.shape[4],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({w.shape[4]},)")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def side(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[4]

    def matrix(self) -> np.ndarray:
        """Filter matrix of shape (M, C*l^3), columns ordered (c, dx, dy, dz)."""
        C, l, M = self.in_channels, self.side, self.out_channels
        return np.ascontiguousarray(self.weights.reshape(C * l**3, M).T)


@dataclass(frozen=True)
class GemmShape:
    m: int
    k: int
    n: int

    @property
    def macs(self) -> int:
        return self.m * self.k * self.n

    @property
    def flops(self) -> int:
        return 2 * self.macs


def gemm_shape(input_shape, filter_shape) -> GemmShape:
    N, X, Y, Z, C = input_shape
    Cf, l, _, _, M = filter_shape
    if Cf != C:
        raise ShapeError(f"filter expects {Cf} channels, input has {C}")
    return GemmShape(m=int(M), k=int(C) * int(l) ** 3, n=int(N * X * Y * Z))


# --------------------------------------------------------------------------
# kernels

@njit(cache=True, parallel=True)
def _im2col_cf(xp, l, X, line0, line1, out):
    C = xp.shape[0]
    Y = xp.shape[3] - l + 1
    Z = xp.shape[4] - l + 1
    taps = l * l * l
    for r in prange(C * taps):
        c = r // taps
        t = r - c * taps
        dx = t // (l * l)
        dy = (t // l) % l
        dz = t % l
        col = 0
        for line in range(line0, line1):
            n = line // X
            x = line - n * X
            for y in range(Y):
                for z in range(Z):
                    out[r, col] = xp[c, n, x + dx, y + dy, z + dz]
                    col += 1


@njit(cache=True, parallel=True)
def _col2im_cf(cols, l, X, line0, line1, gp):
    C = gp.shape[0]
    Y = gp.shape[3] - l + 1
    Z = gp.shape[4] - l + 1
    taps = l * l * l
    # taps of one channel overlap in gp, so parallelise over channels only
    for c in prange(C):
        for t in range(taps):
            r = c * taps + t
            dx = t // (l * l)
            dy = (t // l) % l
            dz = t % l
            col = 0
            for line in range(line0, line1):
                n = line // X
                x = line - n * X
                for y in range(Y):
                    for z in range(Z):
                        gp[c, n, x + dx, y + dy, z + dz] += cols[r, col]
                        col += 1


@njit(cache=True, parallel=True, fastmath=True)
def _gemm_blocked(a, b, c, mc, kc, nc):
    M, K = a.shape
    n = b.shape[1]
    nblocks = (n + nc - 1) // nc
    for jb in prange(nblocks):
        j0 = jb * nc
        j1 = min(j0 + nc, n)
        for i in range(M):
            for j in range(j0, j1):
                c[i, j] = 0
        width = j1 - j0
        for p0 in range(0, K, kc):
            p1 = min(p0 + kc, K)
            for i0 in range(0, M, mc):
                i1 = min(i0 + mc, M)
                for i in range(i0, i1):
                    # row views let the inner loop vectorise
                    crow = c[i, j0:j1]
                    for p in range(p0, p1):
                        av = a[i, p]
                        brow = b[p, j0:j1]
                        for j in range(width):
                            crow[j] += av * brow[j]


@njit(cache=True)
def _conv_naive(x, w, bias, out):
    N, X, Y, Z, C = x.shape
    l = w.shape[1]
    M = w.shape[4]
    h = l // 2
    for n in range(N):
        for i in range(X):
            for j in range(Y):
                for k in range(Z):
                    for m in range(M):
                        s = np.float64(bias[m])
                        for dx in range(l):
                            xi = i + dx - h
                            if xi < 0 or xi >= X:
                                continue
                            for dy in range(l):
                                yi = j + dy - h
                                if yi < 0 or yi >= Y:
                                    continue
                                for dz in range(l):
                                    zi = k + dz - h
                                    if zi < 0 or zi >= Z:
                                        continue
                                    for c in range(C):
                                        s += np.float64(x[n, xi, yi, zi, c]) * np.float64(
                                            w[c, dx, dy, dz, m]
                                        )
                        out[n, i, j, k, m] = s


# --------------------------------------------------------------------------

class Workspace:
    """Reusable scratch buffers keyed by name; reallocated only on shape change."""

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, name: str, shape, dtype) -> np.ndarray:
        buf = self._bufs.get(name)
        if buf is None or buf.shape != tuple(shape) or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._bufs[name] = buf
        return buf


def gemm(a: np.ndarray, b: np.ndarray, kernel: str = "blocked",
         out: np.ndarray | None = None,
         blocks: tuple[int, int, int] | None = None) -> np.ndarray:
    """Matrix product ``a @ b`` through the selected kernel."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if kernel == "blas":
        return np.matmul(a, b, out=out)
    if kernel != "blocked":
        raise ValueError(f"unknown gemm kernel {kernel!r}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    if out is None:
        out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    mc, kc, nc = blocks or (BLOCK_MC, BLOCK_KC, BLOCK_NC)
    _gemm_blocked(a, b, out, mc, kc, nc)
    return out


def _check_side(l: int):
    if l < 1 or l % 2 == 0:
        raise ValueError(f"kernel side must be odd and positive, got {l}")


def _check_input(x: np.ndarray):
    if x.ndim != 5:
        raise ShapeError(f"expected (N, X, Y, Z, C) input, got shape {x.shape}")


def _pad_channel_first(x: np.ndarray, l: int) -> np.ndarray:
    h = l // 2
    N, X, Y, Z, C = x.shape
    xp = np.zeros((C, N, X + 2 * h, Y + 2 * h, Z + 2 * h), dtype=x.dtype)
    xp[:, :, h:h + X, h:h + Y, h:h + Z] = np.moveaxis(x, 4, 0)
    return xp


def _line_chunks(x_shape, K: int, itemsize: int, budget_bytes: int):
    N, X, Y, Z, _ = x_shape
    per_line = K * Y * Z * itemsize
    step = max(1, budget_bytes // max(per_line, 1))
    total = N * X
    for s in range(0, total, step):
        yield s, min(s + step, total)


def im2col(x: np.ndarray, l: int) -> np.ndarray:
    """im2col matrix of shape (C*l^3, N*X*Y*Z) with same zero padding."""
    _check_input(x)
    _check_side(l)
    N, X, Y, Z, C = x.shape
    xp = _pad_channel_first(x, l)
    out = np.empty((C * l**3, N * X * Y * Z), dtype=x.dtype)
    _im2col_cf(xp, l, X, 0, N * X, out)
    return out


def col2im(cols: np.ndarray, x_shape, l: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    _check_side(l)
    N, X, Y, Z, C = x_shape
    if cols.shape != (C * l**3, N * X * Y * Z):
        raise ShapeError(f"cols shape {cols.shape} does not match input {tuple(x_shape)}")
    h = l // 2
    gp = np.zeros((C, N, X + 2 * h, Y + 2 * h, Z + 2 * h), dtype=cols.dtype)
    _col2im_cf(np.ascontiguousarray(cols), l, X, 0, N * X, gp)
    return np.ascontiguousarray(np.moveaxis(gp[:, :, h:h + X, h:h + Y, h:h + Z], 0, 4))


def conv3d_forward(x: np.ndarray, f: ConvFilter, mode: str = "gemm",
                   kernel: str = "blocked",
                   budget_bytes: int = DEFAULT_BUDGET_BYTES,
                   workspace: Workspace | None = None) -> np.ndarray:
    _check_input(x)
    if x.shape[4] != f.in_channels:
        raise ShapeError(
            f"input has {x.shape[4]} channels, filter expects {f.in_channels}"
        )
    N, X, Y, Z, _ = x.shape
    M = f.out_channels
    if mode == "naive":
        out = np.empty((N, X, Y, Z, M), dtype=np.float64)
        _conv_naive(x, f.weights, f.bias, out)
        return out.astype(x.dtype)
    if mode != "gemm":
        raise ValueError(f"unknown conv mode {mode!r}")

    l = f.side
    K = f.in_channels * l**3
    fm = f.matrix().astype(x.dtype, copy=False)
    xp = _pad_channel_first(x, l)
    out = np.empty((N * X * Y * Z, M), dtype=x.dtype)
    YZ = Y * Z
    ws = workspace or Workspace()
    for s, e in _line_chunks(x.shape, K, x.itemsize, budget_bytes):
        cols = ws.get("cols", (K, (e - s) * YZ), x.dtype)
        _im2col_cf(xp, l, X, s, e, cols)
        prod = ws.get("prod", (M, (e - s) * YZ), x.dtype)
        gemm(fm, cols, kernel, out=prod)
        out[s * YZ:e * YZ] = prod.T
    out += f.bias.astype(x.dtype, copy=False)
    return out.reshape(N, X, Y, Z, M)


def conv3d_backward(x: np.ndarray, f: ConvFilter, grad_out: np.ndarray,
                    kernel: str = "blas",
                    budget_bytes: int = DEFAULT_BUDGET_BYTES,
                    need_input_grad: bool = True):
    """Gradients of ``sum(grad_out * conv3d_forward(x, f))``.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false (first layer of a network).
    """
    _check_input(x)
    N, X, Y, Z, C = x.shape
    M = f.out_channels
    if C != f.in_channels or grad_out.shape != (N, X, Y, Z, M):
        raise ShapeError(
            f"grad_out {grad_out.shape} / input {x.shape} inconsistent with "
            f"filter {f.weights.shape}"
        )
    l = f.side
    K = C * l**3
    h = l // 2
    dt = x.dtype
    fm = f.matrix().astype(dt, copy=False)
    g2 = grad_out.reshape(N * X * Y * Z, M)
    xp = _pad_channel_first(x, l)
    gp = np.zeros_like(xp) if need_input_grad else None
    gw = np.zeros((M, K), dtype=dt)
    YZ = Y * Z
    for s, e in _line_chunks(x.shape, K, x.itemsize, budget_bytes):
        cols = np.empty((K, (e - s) * YZ), dtype=dt)
        _im2col_cf(xp, l, X, s, e, cols)
        gT = np.ascontiguousarray(g2[s * YZ:e * YZ].T)  # (M, cols)
        gw += gemm(gT, cols.T, kernel)
        if need_input_grad:
            gcols = gemm(fm.T, gT, kernel)
            _col2im_cf(gcols, l, X, s, e, gp)
    grad_w = np.ascontiguousarray(gw.T).reshape(C, l, l, l, M)
    grad_b = g2.sum(axis=0)
    grad_x = None
    if need_input_grad:
        grad_x = np.ascontiguousarray(np.moveaxis(gp[:, :, h:h + X, h:h + Y, h:h + Z], 0, 4))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# timing

@dataclass
class BenchRecord:
    k: int
    shape: GemmShape
    reps: int
    threads: int
    samples_ms: list[float] = field(default_factory=list)

    @property
    def total_ms(self) -> float:
        return float(sum(self.samples_ms))

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.reps

    @property
    def std_ms(self) -> float:
        if len(self.samples_ms) < 2:
            return 0.0
        return float(np.std(self.samples_ms, ddof=1))

    @property
    def flop_count(self) -> int:
        return self.shape.flops

    CSV_HEADER = "k,m,kdim,n,reps,threads,total_ms,mean_ms,std_ms,flop_count"

    def csv_row(self) -> str:
        return (
            f"{self.k},{self.shape.m},{self.shape.k},{self.shape.n},{self.reps},"
            f"{self.threads},{self.total_ms:.6f},{self.mean_ms:.6f},{self.std_ms:.6f},"
            f"{self.flop_count}"
        )

    def as_dict(self) -> dict:
        return {
            "k": self.k, "m": self.shape.m, "kdim": self.shape.k, "n": self.shape.n,
            "reps": self.reps, "threads": self.threads, "total_ms": self.total_ms,
            "mean_ms": self.mean_ms, "std_ms": self.std_ms,
            "flop_count": self.flop_count,
        }


def set_threads(threads: int):
    available = numba.config.NUMBA_NUM_THREADS
    if not 1 <= threads <= available:
        raise ValueError(f"requested {threads} threads, {available} available")
    numba.set_num_threads(threads)


def timed_conv(input_shape, filter_shape, reps: int, threads: int = 1,
               seed: int = 0, k: int = 1, dtype=np.float32,
               kernel: str = "blocked") -> BenchRecord:
    """Time ``reps`` forward convolutions (im2col + GEMM + bias) on random data.

    One warm-up pass (JIT compilation, page faults) is run and discarded.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    shape = gemm_shape(input_shape, filter_shape)
    rng = Rng(seed)
    x = rng.uniform(input_shape, -1.0, 1.0, dtype)
    f = ConvFilter(rng.uniform(filter_shape, -1.0, 1.0, dtype),
                   rng.uniform(filter_shape[4], -1.0, 1.0, dtype))
    previous = numba.get_num_threads()
    set_threads(threads)
    ws = Workspace()
    try:
        conv3d_forward(x, f, kernel=kernel, workspace=ws)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            conv3d_forward(x, f, kernel=kernel, workspace=ws)
            samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        numba.set_num_threads(previous)
    return BenchRecord(k=k, shape=shape, reps=reps, threads=threads, samples_ms=samples)


__all__ = [
    "BenchRecord", "ConvFilter", "GemmShape", "col2im", "conv3d_backward",
    "conv3d_forward", "gemm", "gemm_shape", "im2col", "set_threads",
    "timed_conv", "Workspace",
]
