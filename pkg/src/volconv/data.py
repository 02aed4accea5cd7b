"""Volume files, manifests, factor-3 pre-pooling and the synthetic cohort.

The generator produces aligned volumes (every subject shares one smooth
template) carrying Gaussian blobs at random positions. A blob contributes
to the subject's label with a weight that depends on which cell of an
``r x r x r`` grid its centre falls in, so the same local pattern means
different things in different places.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Rng

VOLUME_MAGIC = b"BVOL"
VOLUME_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MAX_VOLUME_BYTES = 1 << 34

SPLITS = ("train", "val", "test")


# --- volume files -----------------------------------------------------------

def write_volume(path, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {t.dtype}")
    if not 1 <= t.ndim <= 255:
        raise FormatError(f"unsupported rank {t.ndim}")
    header = VOLUME_MAGIC + struct.pack("<HBB", VOLUME_VERSION, _CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(t, dtype=_DTYPES[_CODES[t.dtype]]).tobytes())


def read_volume(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read volume {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a BVOL file")
    version, code, rank = struct.unpack("<HBB", blob[4:8])
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    end = 8 + 4 * rank
    if rank == 0 or len(blob) < end:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", blob[8:end])
    dt = _DTYPES[code]
    nbytes = math.prod(shape) * dt.itemsize
    if nbytes > MAX_VOLUME_BYTES:
        raise FormatError(f"{path}: extents {shape} overflow the size limit")
    if len(blob) - end != nbytes:
        raise FormatError(f"{path}: payload is {len(blob) - end} bytes, expected {nbytes}")
    return np.frombuffer(blob, dtype=dt, offset=end).reshape(shape).astype(dt.newbyteorder("="))


# --- manifests ----------------------------------------------------------------

@dataclass
class ManifestRow:
    path: str
    label: float
    split: str


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for r in rows:
            w.writerow([r.path, repr(float(r.label)), r.split])


def read_manifest(path) -> list[ManifestRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "label", "split"]:
                raise FormatError(f"{path}: header must be path,label,split")
            rows = []
            for line in reader:
                try:
                    label = float(line["label"])
                except (TypeError, ValueError):
                    raise FormatError(f"{path}: bad label {line['label']!r}") from None
                if not math.isfinite(label):
                    raise FormatError(f"{path}: non-finite label for {line['path']}")
                if line["split"] not in SPLITS:
                    raise FormatError(f"{path}: unknown split {line['split']!r}")
                rows.append(ManifestRow(line["path"], label, line["split"]))
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    seen = set()
    for r in rows:
        if r.path in seen:
            raise FormatError(f"{path}: duplicate path {r.path}")
        seen.add(r.path)
    return rows


# --- datasets in memory ---------------------------------------------------------

@dataclass
class Split:
    x: np.ndarray  # (n, X, Y, Z)
    y: np.ndarray  # (n,)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.x[idx], self.y[idx])


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.x.shape[1:])

    def map_volumes(self, fn) -> "Dataset":
        return Dataset(*(Split(np.stack([fn(v) for v in s.x]), s.y) for s in (self.train, self.val, self.test)))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    rows = read_manifest(directory / "manifest.csv")
    parts = {s: ([], []) for s in SPLITS}
    for r in rows:
        p = Path(r.path)
        vol = read_volume(p if p.is_absolute() else directory / p)
        parts[r.split][0].append(vol.astype(np.float32))
        parts[r.split][1].append(r.label)
    splits = []
    for s in SPLITS:
        xs, ys = parts[s]
        if not xs:
            splits.append(Split(np.zeros((0, 1, 1, 1), np.float32), np.zeros(0)))
            continue
        shapes = {v.shape for v in xs}
        if len(shapes) != 1:
            raise FormatError(f"{directory}: mixed volume shapes {sorted(shapes)}")
        splits.append(Split(np.stack(xs), np.asarray(ys, dtype=np.float64)))
    return Dataset(*splits)


# --- pre-pooling --------------------------------------------------------------

POOL_STRATEGIES = ("average", "max", "naive")


def prepool(volume: np.ndarray, factor: int = 3, strategy: str = "average") -> np.ndarray:
    """Downsample by ``factor`` along every axis.

    Blocks start at multiples of ``factor``; the trailing block of an axis
    may be partial, and then only its present voxels take part.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if strategy not in POOL_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    v = np.asarray(volume)
    if strategy == "naive":
        return np.ascontiguousarray(v[tuple(slice(None, None, factor) for _ in v.shape)])
    out_shape = tuple(-(-n // factor) for n in v.shape)
    fill = np.nan if strategy == "average" else -np.inf
    work = np.full(tuple(o * factor for o in out_shape), fill, dtype=np.float64)
    work[tuple(slice(0, n) for n in v.shape)] = v
    split = []
    for o in out_shape:
        split.extend((o, factor))
    blocks = work.reshape(split)
    axes = tuple(range(1, 2 * v.ndim, 2))
    red = np.nanmean(blocks, axis=axes) if strategy == "average" else blocks.max(axis=axes)
    return red.astype(v.dtype)


# --- synthetic cohort ---------------------------------------------------------------

def raw_shape(shape) -> tuple[int, ...]:
    """Pre-pooling extent that factor-3 pooling maps onto ``shape`` (41 -> 121)."""
    return tuple(3 * n - 2 for n in shape)


def default_region_weights(r: int) -> list[float]:
    """Checkerboard of +1 / -1 over the r^3 grid."""
    return [1.0 if (a + b + c) % 2 == 0 else -1.0
            for a, b, c in itertools.product(range(r), repeat=3)]


@dataclass
class GeneratorConfig:
    volume_shape: tuple[int, int, int] = (41, 49, 41)
    n_train: int = 524
    n_val: int = 100
    n_test: int = 100
    blobs_per_volume: int = 12
    blob_sigma: tuple[float, float] = (1.0, 2.5)
    blob_amplitude: tuple[float, float] = (0.5, 1.5)
    grid: int = 2
    region_weights: list[float] | None = None
    sigma_label: float = 0.1
    sigma_voxel: float = 0.05
    template_amplitude: float = 1.0
    template_seed: int = 1234
    label_range: tuple[float, float] = (8.0, 21.0)
    raw: bool = False
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.blob_sigma = tuple(float(v) for v in self.blob_sigma)
        self.blob_amplitude = tuple(float(v) for v in self.blob_amplitude)
        self.label_range = tuple(float(v) for v in self.label_range)
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if any(n < self.grid for n in self.volume_shape):
            raise ValueError("grid larger than the volume")
        if self.region_weights is None:
            self.region_weights = default_region_weights(self.grid)
        if len(self.region_weights) != self.grid ** 3:
            raise ValueError(f"need {self.grid ** 3} region weights, got {len(self.region_weights)}")
        for name in ("blob_sigma", "blob_amplitude", "label_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi")
        if self.blob_sigma[0] <= 0 or self.sigma_label < 0 or self.sigma_voxel < 0:
            raise ValueError("blob sigma must be positive and noise levels non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.blobs_per_volume < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read generator config {path}: {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise FormatError(f"{path}: unknown generator fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Extent of the generated volumes (before any pre-pooling)."""
        return raw_shape(self.volume_shape) if self.raw else self.volume_shape

    @property
    def scale(self) -> float:
        return 3.0 if self.raw else 1.0


@dataclass
class SubjectRecord:
    index: int
    split: str
    centres: np.ndarray  # (P, 3) voxel coordinates
    sigmas: np.ndarray
    amplitudes: np.ndarray
    cells: np.ndarray
    raw_label: float
    label: float = float("nan")


def make_template(shape, seed: int, amplitude: float = 1.0, terms: int = 6) -> np.ndarray:
    """Smooth positive volume: a sum of low-frequency cosines inside an ellipsoid."""
    rng = Rng(seed)
    grids = np.meshgrid(*(np.arange(n) / n for n in shape), indexing="ij")
    freqs = rng.integers(terms * 3, 3).reshape(terms, 3) + 1
    phases = rng.uniform(terms, 0.0, 2 * np.pi)
    weights = rng.uniform(terms, 0.2, 1.0)
    field = np.zeros(shape)
    for f, p, w in zip(freqs, phases, weights):
        field += w * np.cos(2 * np.pi * sum(fi * g for fi, g in zip(f, grids)) + p)
    field /= np.abs(field).max()
    r2 = sum(((g - 0.5) / 0.45) ** 2 for g in grids)
    mask = np.clip(1.5 - r2, 0.0, 1.0)
    return (amplitude * mask * (1.0 + 0.3 * field)).astype(np.float32)


def blob_cell(centre, shape, r: int) -> int:
    """Row-major index of the r^3 grid cell containing ``centre``."""
    idx = []
    for c, n in zip(centre, shape):
        core = n // r
        idx.append(min(int(c // core), r - 1))
    return (idx[0] * r + idx[1]) * r + idx[2]


def render_blobs(shape, centres, sigmas, amplitudes) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    for c, s, a in zip(centres, sigmas, amplitudes):
        gx, gy, gz = (np.exp(-((ax - ci) ** 2) / (2 * s * s)) for ax, ci in zip(axes, c))
        out += a * gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    return out


def raw_label(cfg: GeneratorConfig, cells, amplitudes, noise: float) -> float:
    w = np.asarray(cfg.region_weights, dtype=np.float64)
    return float(np.sum(w[np.asarray(cells, dtype=np.int64)] * amplitudes) + noise)


def _draw_range(rng: Rng, n: int, bounds) -> np.ndarray:
    """Uniform on ``[lo, hi)``; a degenerate range gives the constant ``lo``."""
    lo, hi = bounds
    return lo + (hi - lo) * rng.uniform(n)


def _subject(cfg: GeneratorConfig, index: int, split: str, template: np.ndarray):
    rng = Rng(cfg.seed, 1, index)
    shape = cfg.shape
    P = cfg.blobs_per_volume
    centres = rng.uniform((P, 3), 0.0, 1.0) * np.asarray(shape, dtype=np.float64)
    sigmas = _draw_range(rng, P, cfg.blob_sigma) * cfg.scale
    amps = _draw_range(rng, P, cfg.blob_amplitude)
    cells = np.array([blob_cell(c, shape, cfg.grid) for c in centres], dtype=np.int64)
    noise = float(rng.normal(1, 0.0, cfg.sigma_label)[0]) if cfg.sigma_label > 0 else 0.0
    vol = template + render_blobs(shape, centres, sigmas, amps)
    if cfg.sigma_voxel > 0:
        vol = vol + rng.normal(shape, 0.0, cfg.sigma_voxel)
    rec = SubjectRecord(index, split, centres, sigmas, amps, cells, raw_label(cfg, cells, amps, noise))
    return vol.astype(np.float32), rec


def rescale_labels(raw: np.ndarray, label_range) -> np.ndarray:
    lo, hi = label_range
    rmin, rmax = float(np.min(raw)), float(np.max(raw))
    if rmax == rmin:
        return np.full(raw.shape, 0.5 * (lo + hi))
    return lo + (hi - lo) * (raw - rmin) / (rmax - rmin)


def generate_subjects(cfg: GeneratorConfig):
    """Yield ``(volume, SubjectRecord)`` for every subject (labels unscaled)."""
    template = make_template(cfg.shape, cfg.template_seed, cfg.template_amplitude)
    index = 0
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        for _ in range(n):
            yield _subject(cfg, index, split, template)
            index += 1


def generate_arrays(cfg: GeneratorConfig, pool_strategy: str = "average"):
    """In-memory cohort: ``(Dataset, records)``; raw volumes are pre-pooled."""
    vols, recs = [], []
    for vol, rec in generate_subjects(cfg):
        if cfg.raw:
            vol = prepool(vol, 3, pool_strategy)
        vols.append(vol)
        recs.append(rec)
    labels = rescale_labels(np.array([r.raw_label for r in recs]), cfg.label_range)
    for r, y in zip(recs, labels):
        r.label = float(y)
    splits = []
    for s in SPLITS:
        idx = [i for i, r in enumerate(recs) if r.split == s]
        x = np.stack([vols[i] for i in idx]) if idx else np.zeros((0, *cfg.volume_shape), np.float32)
        splits.append(Split(x, labels[idx] if idx else np.zeros(0)))
    return Dataset(*splits), recs


def generate_dataset(cfg: GeneratorConfig, out_dir) -> list[ManifestRow]:
    """Write one BVOL per subject plus ``manifest.csv`` and ``generator.json``.

    With ``cfg.raw`` the volumes are written at the pre-pooling extent.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    recs, paths = [], []
    for vol, rec in generate_subjects(cfg):
        rel = f"volumes/{rec.split}_{rec.index:05d}.bvol"
        write_volume(out / rel, vol)
        recs.append(rec)
        paths.append(rel)
    labels = rescale_labels(np.array([r.raw_label for r in recs]), cfg.label_range)
    rows = [ManifestRow(p, float(y), r.split) for p, y, r in zip(paths, labels, recs)]
    write_manifest(out / "manifest.csv", rows)
    (out / "generator.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return rows


def region_features(x: np.ndarray, template: np.ndarray, r: int) -> np.ndarray:
    """Per-cell summed intensity above the template, shape (n, r^3)."""
    resid = x - template[None]
    n = x.shape[0]
    shape = x.shape[1:]
    feats = np.zeros((n, r ** 3))
    for c, (a, b, d) in enumerate(itertools.product(range(r), repeat=3)):
        sl = []
        for g, e in zip((a, b, d), shape):
            core = e // r
            sl.append(slice(g * core, e if g == r - 1 else (g + 1) * core))
        feats[:, c] = resid[(slice(None), *sl)].reshape(n, -1).sum(axis=1)
    return feats
