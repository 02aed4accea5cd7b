"""Adam, the multi-seed training protocol and the experiment sweeps."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .data import Dataset, Split
from .model import ArchitectureSpec, Network, build, count_params
from .segmentation import make_plan, segment
from .tensor import Rng

# Rng stream tags, so seeds for different purposes never collide.
_SHUFFLE_STREAM = 7
_SUBSET_STREAM = 11


@dataclass
class TrainConfig:
    spec: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 700
    batch_size: int = 4
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_subset_size: int | None = None
    subset_seed: int = 0
    patience: int | None = None
    standardize_targets: bool = True
    kernel: str = "blas"
    dtype: str = "float32"
    name: str = ""

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError("alpha and epsilon must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @property
    def label(self) -> str:
        return self.name or "-".join(str(f) for f in self.spec.block_filters)


# --- Adam -------------------------------------------------------------------------

@dataclass
class Moments:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> "Moments":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, moments: Moments, t: int, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_moments)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = config.alpha * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        new_p.append((p - step).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_p, Moments(new_m, new_v)


class Adam:
    """In-place Adam over a network's parameter list."""

    def __init__(self, params: list[np.ndarray], config: TrainConfig):
        self.params = params
        self.config = config
        self.moments = Moments.zeros_like(params)
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        cfg = self.config
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.moments.m, self.moments.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p -= (cfg.alpha * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype)


# --- training -----------------------------------------------------------------------

@dataclass
class RunResult:
    arch: str
    k: int
    seed: int
    val_mse: float
    val_mae: float
    test_mse: float
    test_mae: float
    minutes: float
    best_epoch: int
    epochs_run: int
    final_val_mse: float
    train_size: int
    hidden_units: int
    history: list[float] = field(default_factory=list)

    CSV_FIELDS = ("spec", "k", "seed", "val_mse", "test_mse", "test_mae", "minutes", "best_epoch")

    def csv_row(self) -> str:
        return (f"{self.arch},{self.k},{self.seed},{self.val_mse:.10g},{self.test_mse:.10g},"
                f"{self.test_mae:.10g},{self.minutes:.6f},{self.best_epoch}")

    def as_dict(self, with_history: bool = False) -> dict:
        d = {
            "spec": self.arch, "k": self.k, "seed": self.seed,
            "val_mse": self.val_mse, "val_mae": self.val_mae,
            "test_mse": self.test_mse, "test_mae": self.test_mae,
            "minutes": self.minutes, "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run, "final_val_mse": self.final_val_mse,
            "train_size": self.train_size, "hidden_units": self.hidden_units,
        }
        if with_history:
            d["history"] = list(self.history)
        return d


def summarize(results: list[RunResult]) -> dict:
    out = {"runs": len(results)}
    for key in ("val_mse", "val_mae", "test_mse", "test_mae", "minutes"):
        vals = np.array([getattr(r, key) for r in results], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                    "median": float(np.median(vals))}
    return out


def prepare_inputs(split: Split, spec: ArchitectureSpec, dtype=np.float32) -> np.ndarray:
    """Segment volumes for ``spec`` into network inputs ``(n, X', Y', Z', k^3)``."""
    if len(split) == 0:
        return np.zeros((0, *spec.network_input_shape, spec.in_channels), dtype=dtype)
    plan = make_plan(split.x.shape[1:], spec.k, spec.boundary)
    return segment(split.x, plan).data.astype(dtype, copy=False)


def predict(net: Network, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = [net.forward(x[i:i + batch_size], train=False)[:, 0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def subsample_indices(n: int, size: int, seed: int) -> np.ndarray:
    """``size`` distinct indices of ``range(n)`` in ascending order."""
    if size > n:
        raise ValueError(f"requested {size} training examples, only {n} available")
    if size < 1:
        raise ValueError("subset size must be >= 1")
    if size == n:
        return np.arange(n)
    return np.sort(Rng(seed, _SUBSET_STREAM, size).permutation(n)[:size])


def fold_target_scaling(net: Network, mu: float, sigma: float):
    """Make the output layer predict ``mu + sigma * z`` so saved weights speak label units."""
    out = net.layers[-1].layer
    out.weights *= out.weights.dtype.type(sigma)
    out.bias[...] = out.bias * sigma + mu


def _check_dataset(ds: Dataset):
    for name in ("train", "val", "test"):
        if len(getattr(ds, name)) == 0:
            raise ValueError(f"dataset split {name!r} is empty")


def train_seed(config: TrainConfig, dataset: Dataset, seed: int, inputs=None,
               progress=None) -> tuple[RunResult, Network]:
    """Train one initialisation; restore the best-validation weights; score the test set."""
    _check_dataset(dataset)
    spec = config.spec
    if tuple(dataset.volume_shape) != tuple(spec.input_shape):
        spec = replace(spec, input_shape=tuple(dataset.volume_shape))
    dtype = np.dtype(config.dtype)
    train_split = dataset.train
    if config.train_subset_size is not None:
        train_split = train_split.subset(
            subsample_indices(len(train_split), config.train_subset_size, config.subset_seed))
        inputs = None
    if inputs is None:
        inputs = tuple(prepare_inputs(s, spec, dtype) for s in (train_split, dataset.val, dataset.test))
    x_tr, x_va, x_te = inputs
    y_tr, y_va, y_te = train_split.y, dataset.val.y, dataset.test.y

    mu, sigma = 0.0, 1.0
    if config.standardize_targets:
        mu = float(np.mean(y_tr))
        sigma = float(np.std(y_tr)) or 1.0
    z_tr = ((y_tr - mu) / sigma).astype(dtype)

    t0 = time.perf_counter()
    net = build(spec, seed=seed, dtype=dtype, kernel=config.kernel)
    params = [p for _, p in net.parameters()]
    opt = Adam(params, config)
    best, best_epoch, snap = np.inf, -1, net.snapshot()
    history = []
    n = len(x_tr)
    val_mse = np.inf
    epoch = 0
    for epoch in range(config.epochs):
        order = Rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            pred = net.forward(x_tr[idx], train=True)
            target = z_tr[idx].reshape(pred.shape)
            net.backward(L.mse_grad(pred, target))
            opt.step(net.gradients())
        val_pred = mu + sigma * predict(net, x_va)
        val_mse = L.mse(val_pred, y_va)
        history.append(val_mse)
        if val_mse < best:
            best, best_epoch, snap = val_mse, epoch, net.snapshot()
        if progress is not None:
            progress(seed, epoch, val_mse)
        if config.patience is not None and epoch - best_epoch >= config.patience:
            break
    net.restore(snap)
    fold_target_scaling(net, mu, sigma)
    val_pred = predict(net, x_va)
    test_pred = predict(net, x_te)
    minutes = (time.perf_counter() - t0) / 60.0
    result = RunResult(
        arch=config.label, k=spec.k, seed=seed,
        val_mse=L.mse(val_pred, y_va), val_mae=L.mae(val_pred, y_va),
        test_mse=L.mse(test_pred, y_te), test_mae=L.mae(test_pred, y_te),
        minutes=minutes, best_epoch=best_epoch, epochs_run=epoch + 1,
        final_val_mse=float(val_mse), train_size=n, hidden_units=spec.hidden_units,
        history=history,
    )
    return result, net


def _train_one(args):
    config, dataset, seed, inputs = args
    return train_seed(config, dataset, seed, inputs=inputs)[0]


def train(config: TrainConfig, dataset: Dataset, progress=None, workers: int = 1) -> list[RunResult]:
    """Train every seed of ``config``. ``workers > 1`` runs seeds in separate
    processes (``progress`` is then not called)."""
    _check_dataset(dataset)
    spec = config.spec
    if tuple(dataset.volume_shape) != tuple(spec.input_shape):
        config = replace(config, spec=replace(spec, input_shape=tuple(dataset.volume_shape)))
    inputs = None
    if config.train_subset_size is None:
        dtype = np.dtype(config.dtype)
        inputs = tuple(prepare_inputs(s, config.spec, dtype)
                       for s in (dataset.train, dataset.val, dataset.test))
    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_one, [(config, dataset, s, inputs) for s in config.seeds]))
    return [train_seed(config, dataset, s, inputs=inputs, progress=progress)[0]
            for s in config.seeds]


# --- sweeps --------------------------------------------------------------------------

@dataclass
class SweepRow:
    value: int
    results: list[RunResult]
    extra: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        return summarize(self.results)

    def as_dict(self) -> dict:
        return {"value": self.value, **self.extra, "summary": self.summary,
                "runs": [r.as_dict() for r in self.results]}


def select_k(rows: list[SweepRow]) -> int:
    """k with the lowest mean validation MSE (first on ties)."""
    best = min(rows, key=lambda r: r.summary["val_mse"]["mean"])
    return best.value


def sweep_k(config: TrainConfig, dataset: Dataset, ks=(1, 2, 3, 4), progress=None, workers: int = 1):
    """Train ``config.spec`` at every segmentation rate. Returns ``(rows, selected_k)``."""
    rows = []
    for k in ks:
        cfg = replace(config, spec=replace(config.spec, k=int(k)))
        rows.append(SweepRow(int(k), train(cfg, dataset, progress=progress, workers=workers)))
    return rows, select_k(rows)


def sweep_hidden_units(config: TrainConfig, dataset: Dataset, grid, progress=None, workers: int = 1):
    rows = []
    for h in grid:
        spec = replace(config.spec, hidden_units=int(h),
                       input_shape=tuple(dataset.volume_shape))
        cfg = replace(config, spec=spec)
        rows.append(SweepRow(int(h), train(cfg, dataset, progress=progress, workers=workers),
                             {"fc_weights": count_params(spec).fc_weights}))
    return rows


def sweep_train_size(configs, dataset: Dataset, sizes, progress=None, workers: int = 1):
    """Train each config on seeded subsamples of the training split.

    ``sizes`` may contain ``None`` for the full split. With two configs each
    row also carries the absolute difference of their mean test MSE.
    """
    if isinstance(configs, TrainConfig):
        configs = [configs]
    full = len(dataset.train)
    rows = []
    for size in sizes:
        size = full if size is None else int(size)
        if size > full:
            raise ValueError(f"requested {size} training examples, only {full} available")
        per_cfg = {}
        for cfg in configs:
            sub = replace(cfg, train_subset_size=None if size == full else size)
            per_cfg[cfg.label] = train(sub, dataset, progress=progress, workers=workers)
        extra = {"per_spec": {name: summarize(res) for name, res in per_cfg.items()}}
        if len(configs) == 2:
            a, b = (summarize(r)["test_mse"]["mean"] for r in per_cfg.values())
            extra["abs_diff_test_mse"] = abs(a - b)
        rows.append(SweepRow(size, [r for res in per_cfg.values() for r in res], extra))
    return rows
