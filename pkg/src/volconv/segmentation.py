"""Regional segmentation: cut an aligned volume into k^3 blocks and stack
them along the channel axis so that first-layer filters differ per block.

Along each axis the volume is cut into ``k`` cores of ``n // k`` voxels,
anchored at index 0 (residual voxels past ``k * (n // k)`` are dropped).
For ``k >= 2`` every region is widened by ``boundary`` voxels toward the
volume interior: the first region grows on its high side, the last on its
low side, and interior regions split the boundary ``ceil(b/2)`` low /
``floor(b/2)`` high. Parts of a widened box that fall outside the volume
are zero-filled. Each region may be mirrored along any subset of axes
before stacking.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError

FLIPS = tuple(itertools.product((False, True), repeat=3))  # identity first


@dataclass(frozen=True)
class Region:
    grid: tuple[int, int, int]
    box_lo: tuple[int, int, int]  # unclipped box start in volume coordinates
    src_lo: tuple[int, int, int]
    src_hi: tuple[int, int, int]
    core_offset: tuple[int, int, int]  # where the core starts inside the region
    flip: tuple[bool, bool, bool] = (False, False, False)

    @property
    def dst_lo(self) -> tuple[int, int, int]:
        return tuple(s - b for s, b in zip(self.src_lo, self.box_lo))


@dataclass(frozen=True)
class SegmentationPlan:
    k: int
    input_shape: tuple[int, int, int]
    core: tuple[int, int, int]
    boundary: int
    region_shape: tuple[int, int, int]
    regions: tuple[Region, ...]

    @property
    def channels(self) -> int:
        return len(self.regions)

    @property
    def orientations(self) -> tuple[tuple[bool, bool, bool], ...]:
        return tuple(r.flip for r in self.regions)

    def with_orientations(self, flips) -> "SegmentationPlan":
        flips = list(flips)
        if len(flips) != self.channels:
            raise ValueError(f"need {self.channels} orientations, got {len(flips)}")
        regions = tuple(replace(r, flip=tuple(bool(v) for v in f))
                        for r, f in zip(self.regions, flips))
        return replace(self, regions=regions)


@dataclass
class SegmentedVolume:
    data: np.ndarray  # (N, X', Y', Z', k^3)
    plan: SegmentationPlan


def _axis_boxes(n: int, k: int, b: int):
    """Per-axis (box_lo, length, core_offset) for each of the k regions."""
    if k == 1:
        return [(0, n, 0)]
    core = n // k
    out = []
    for r in range(k):
        lo = r * core
        if r == 0:
            off = 0
        elif r == k - 1:
            off = b
        else:
            off = (b + 1) // 2
        out.append((lo - off, core + b, off))
    return out


def make_plan(input_shape, k: int, boundary: int = 3) -> SegmentationPlan:
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise ShapeError(f"expected (X, Y, Z), got {input_shape}")
    if k < 1:
        raise ValueError("segmentation rate k must be >= 1")
    if boundary < 0:
        raise ValueError("boundary must be non-negative")
    if any(n < k for n in input_shape):
        raise ValueError(f"k={k} exceeds an extent of {input_shape}")
    axes = [_axis_boxes(n, k, boundary) for n in input_shape]
    region_shape = tuple(a[0][1] for a in axes)
    regions = []
    for rx, ry, rz in itertools.product(range(k), repeat=3):
        picks = (axes[0][rx], axes[1][ry], axes[2][rz])
        lo = tuple(p[0] for p in picks)
        regions.append(Region(
            grid=(rx, ry, rz),
            box_lo=lo,
            src_lo=tuple(max(v, 0) for v in lo),
            src_hi=tuple(min(v + p[1], n) for v, p, n in zip(lo, picks, input_shape)),
            core_offset=tuple(p[2] for p in picks),
        ))
    core = tuple(n // k for n in input_shape) if k > 1 else input_shape
    return SegmentationPlan(k=k, input_shape=input_shape, core=core,
                            boundary=boundary if k > 1 else 0,
                            region_shape=region_shape, regions=tuple(regions))


def _as_batch(volume: np.ndarray) -> np.ndarray:
    if volume.ndim == 3:
        return volume[None]
    if volume.ndim == 5 and volume.shape[-1] == 1:
        return volume[..., 0]
    if volume.ndim == 4:
        return volume
    raise ShapeError(f"expected (X,Y,Z), (N,X,Y,Z) or (N,X,Y,Z,1), got {volume.shape}")


def _flip_slices(flip) -> tuple:
    return (slice(None),) + tuple(slice(None, None, -1) if f else slice(None) for f in flip)


def segment(volume: np.ndarray, plan: SegmentationPlan) -> SegmentedVolume:
    vol = _as_batch(volume)
    if vol.shape[1:] != plan.input_shape:
        raise ShapeError(f"volume {vol.shape[1:]} does not match plan {plan.input_shape}")
    N = vol.shape[0]
    out = np.zeros((N, *plan.region_shape, plan.channels), dtype=vol.dtype)
    for c, reg in enumerate(plan.regions):
        d = reg.dst_lo
        src = vol[(slice(None),) + tuple(slice(a, b) for a, b in zip(reg.src_lo, reg.src_hi))]
        block = np.zeros((N, *plan.region_shape), dtype=vol.dtype)
        block[(slice(None),) + tuple(slice(o, o + e) for o, e in zip(d, src.shape[1:]))] = src
        out[..., c] = block[_flip_slices(reg.flip)]
    return SegmentedVolume(data=out, plan=plan)


def reassemble_cores(seg: SegmentedVolume) -> np.ndarray:
    """Undo orientation, drop boundaries and tile the cores back together.

    Returns the core grid ``(N, k*cx, k*cy, k*cz)``.
    """
    plan = seg.plan
    N = seg.data.shape[0]
    core = plan.core
    out = np.zeros((N, *(plan.k * c for c in core)), dtype=seg.data.dtype)
    for c, reg in enumerate(plan.regions):
        block = seg.data[..., c][_flip_slices(reg.flip)]
        inner = block[(slice(None),) + tuple(slice(o, o + e) for o, e in zip(reg.core_offset, core))]
        dst = tuple(slice(g * e, (g + 1) * e) for g, e in zip(reg.grid, core))
        out[(slice(None),) + dst] = inner
    return out


def foreground(data: np.ndarray, tau: float = 0.0) -> np.ndarray:
    return np.abs(data) > tau


def overlap_score(seg, tau: float = 0.0) -> float:
    """Mean pairwise Jaccard agreement of the channels' foreground masks.

    Averaged over all channel pairs and over the batch. A single channel
    has nothing to disagree with and scores 1.
    """
    data = seg.data if isinstance(seg, SegmentedVolume) else np.asarray(seg)
    if data.ndim == 4:
        data = data[None]
    C = data.shape[-1]
    if C < 2:
        return 1.0
    iu = np.triu_indices(C, 1)
    scores = []
    for sample in data:
        m = foreground(sample, tau).reshape(-1, C).T.astype(np.float64)
        inter = m @ m.T
        size = m.sum(axis=1)
        union = size[:, None] + size[None, :] - inter
        scores.append(np.mean(inter[iu] / np.maximum(1.0, union[iu])))
    return float(np.mean(scores))


def _soft_jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.maximum(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.minimum(a, b).sum() / union)


def orient_regions(plan: SegmentationPlan, mode: str = "native",
                   reference: np.ndarray | None = None,
                   tau: float = 0.0) -> SegmentationPlan:
    """Choose a mirror orientation per region.

    ``min_overlap`` / ``max_overlap`` walk the channels in order and pick,
    among the 8 axis reflections, the one whose foreground mask has the
    lowest / highest soft Jaccard agreement with the mean mask of the
    channels already placed. Ties keep the earliest candidate (identity
    first). If the greedy result scores worse than the native layout under
    :func:`overlap_score`, the native layout is returned.
    """
    native = plan.with_orientations([FLIPS[0]] * plan.channels)
    if mode == "native":
        return native
    if mode not in ("min_overlap", "max_overlap"):
        raise ValueError(f"unknown orientation mode {mode!r}")
    if reference is None:
        raise ValueError(f"mode {mode!r} needs a reference volume")
    ref = np.asarray(reference)
    if ref.shape != plan.input_shape:
        raise ShapeError(f"reference {ref.shape} does not match plan {plan.input_shape}")
    base = segment(ref, native).data[0]
    sign = -1.0 if mode == "min_overlap" else 1.0
    running = np.zeros(plan.region_shape, dtype=np.float64)
    chosen = []
    for c in range(plan.channels):
        mask = foreground(base[..., c], tau).astype(np.float64)
        best, best_score = FLIPS[0], None
        if c > 0:
            mean = running / c
            for flip in FLIPS:
                s = sign * _soft_jaccard(mean, mask[_flip_slices(flip)[1:]])
                if best_score is None or s > best_score:
                    best, best_score = flip, s
        chosen.append(best)
        running += mask[_flip_slices(best)[1:]]
    greedy = plan.with_orientations(chosen)
    g = overlap_score(segment(ref, greedy), tau)
    n = overlap_score(segment(ref, native), tau)
    if sign * g < sign * n:
        return native
    return greedy
