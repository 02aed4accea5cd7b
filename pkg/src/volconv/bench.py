"""Convolution timing sweep, U-shape verdict and the desk-scale experiment."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .conv import BenchRecord, gemm_shape, timed_conv
from .data import GeneratorConfig, generate_arrays
from .model import ARCHITECTURES, REVERSED_FILTERS, ArchitectureSpec
from .training import RunResult, TrainConfig, sweep_k, train

DEFAULT_KS = (1, 2, 3, 4, 6, 8, 9, 12, 18, 24, 36)


def sweep_shapes(ks, base: int = 72, batch: int = 4, filters: int = 8, side: int = 3):
    """Input and filter shapes of the constant-work family, one per k."""
    out = []
    for k in ks:
        k = int(k)
        if k < 1 or base % k:
            raise ValueError(f"k={k} does not divide base extent {base}")
        n = base // k
        out.append((k, (batch, n, n, n, k ** 3), (k ** 3, side, side, side, filters)))
    return sorted(out)


def bench_conv_sweep(ks=DEFAULT_KS, base: int = 72, batch: int = 4, filters: int = 8,
                     reps: int = 500, threads: int = 1, seed: int = 0,
                     kernel: str = "blocked", progress=None) -> list[BenchRecord]:
    """Time forward convolutions of ``(batch, base/k, base/k, base/k, k^3)``
    inputs at equal arithmetic work. No boundary voxels are added."""
    shapes = sweep_shapes(ks, base, batch, filters)
    flops = {gemm_shape(x, f).flops for _, x, f in shapes}
    if len(flops) != 1:
        raise AssertionError(f"sweep is not constant-work: flop counts {sorted(flops)}")
    records = []
    for k, x_shape, f_shape in shapes:
        rec = timed_conv(x_shape, f_shape, reps=reps, threads=threads, seed=seed, k=k,
                         kernel=kernel)
        records.append(rec)
        if progress is not None:
            progress(rec)
    return records


@dataclass
class UShapeVerdict:
    passed: bool
    argmin_k: int
    min_ms: float
    first_ms: float
    last_ms: float
    reasons: list[str] = field(default_factory=list)

    @property
    def speedup(self) -> float:
        return self.first_ms / self.min_ms

    def as_dict(self) -> dict:
        return {"passed": self.passed, "argmin_k": self.argmin_k, "min_ms": self.min_ms,
                "first_ms": self.first_ms, "last_ms": self.last_ms,
                "speedup_vs_first": self.speedup, "reasons": list(self.reasons)}


def check_ushape(records) -> UShapeVerdict:
    """Pass iff the fastest k is interior, beats the first k by 10% or more,
    and the last k is slower than the fastest."""
    if len(records) < 3:
        raise ValueError("need at least 3 records")
    recs = sorted(records, key=lambda r: r.k)
    times = [r.mean_ms for r in recs]
    i = int(np.argmin(times))
    reasons = []
    if i in (0, len(recs) - 1):
        reasons.append(f"minimum at boundary k={recs[i].k}")
    if not times[i] < 0.9 * times[0]:
        reasons.append(f"k={recs[i].k} is not 10% faster than k={recs[0].k}")
    if not times[-1] > times[i]:
        reasons.append(f"k={recs[-1].k} is not slower than the minimum")
    return UShapeVerdict(not reasons, recs[i].k, times[i], times[0], times[-1], reasons)


# --- desk-scale experiment -----------------------------------------------------------

DESK_SHAPE = (12, 12, 12)
ORDER = ("segmentation-only", "proposed", "baseline", "reverse-only")


def desk_generator(seed: int, shape=DESK_SHAPE, n_train=200, n_val=50, n_test=50) -> GeneratorConfig:
    return GeneratorConfig(volume_shape=shape, n_train=n_train, n_val=n_val,
                           n_test=n_test, grid=2, seed=seed)


def measure_training_times(dataset, epochs: int = 2, seed: int = 0, names=ORDER,
                           kernel: str = "blas") -> dict[str, float]:
    """Wall-clock minutes per architecture for an identical epoch budget."""
    out = {}
    for name in names:
        spec = ArchitectureSpec.named(name, input_shape=dataset.volume_shape)
        cfg = TrainConfig(spec=spec, epochs=epochs, seeds=(seed,), kernel=kernel, name=name)
        out[name] = train(cfg, dataset)[0].minutes
    return out


def ordering_holds(times: dict[str, float], order=ORDER) -> bool:
    return all(times[a] < times[b] for a, b in zip(order, order[1:]))


@dataclass
class DeskReport:
    shape: tuple[int, int, int]
    epochs: int
    seeds: tuple[int, ...]
    comparison: dict[str, list[RunResult]]
    selected_k: list[int]
    sweep_means: list[dict[int, float]]
    minutes: float

    @property
    def median_test_mse(self) -> dict[str, float]:
        return {name: float(np.median([r.test_mse for r in res]))
                for name, res in self.comparison.items()}

    @property
    def proposed_wins(self) -> bool:
        m = self.median_test_mse
        return m["proposed"] < m["baseline"]

    @property
    def k2_selected(self) -> int:
        return sum(k == 2 for k in self.selected_k)

    def as_dict(self) -> dict:
        return {
            "shape": list(self.shape), "epochs": self.epochs, "seeds": list(self.seeds),
            "median_test_mse": self.median_test_mse, "proposed_wins": self.proposed_wins,
            "selected_k": self.selected_k, "k2_selected": self.k2_selected,
            "sweep_mean_val_mse": [{str(k): v for k, v in m.items()} for m in self.sweep_means],
            "runs": {name: [r.as_dict() for r in res] for name, res in self.comparison.items()},
            "minutes": self.minutes,
        }


def desk_experiment(shape=DESK_SHAPE, epochs: int = 100, seeds=(0, 1, 2, 3, 4),
                    repetitions: int = 5, ks=(1, 2, 3, 4), kernel: str = "blas",
                    progress=None) -> DeskReport:
    """Baseline vs proposed on region-dependent synthetic data, plus repeated
    k sweeps of the reversed-filter network. Repetition ``i`` uses a dataset
    generated with seed ``i``; repetition 0 is also the comparison dataset."""
    t0 = time.perf_counter()
    seeds = tuple(seeds)
    base = TrainConfig(epochs=epochs, seeds=seeds, kernel=kernel)
    ds0, _ = generate_arrays(desk_generator(0, shape))
    comparison = {}
    for name in ("baseline", "proposed"):
        spec = ArchitectureSpec.named(name, input_shape=shape)
        comparison[name] = train(replace(base, spec=spec, name=name), ds0, progress=progress)
    selected, means = [], []
    reversed_spec = ArchitectureSpec(block_filters=REVERSED_FILTERS, input_shape=shape)
    for rep in range(repetitions):
        ds = ds0 if rep == 0 else generate_arrays(desk_generator(rep, shape))[0]
        cfg = replace(base, spec=reversed_spec)
        rows, k = sweep_k(cfg, ds, ks=ks, progress=progress)
        selected.append(k)
        means.append({r.value: r.summary["val_mse"]["mean"] for r in rows})
    return DeskReport(tuple(shape), epochs, seeds, comparison, selected, means,
                      (time.perf_counter() - t0) / 60.0)


__all__ = [
    "ARCHITECTURES", "DEFAULT_KS", "DeskReport", "UShapeVerdict", "bench_conv_sweep",
    "check_ushape", "desk_experiment", "desk_generator", "measure_training_times",
    "ordering_holds", "sweep_shapes",
]
