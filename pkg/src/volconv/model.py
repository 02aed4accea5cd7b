"""Block-structured volumetric CNNs.

A network is ``n`` blocks of (conv+eLU, conv+eLU, batch norm, 2x max pool)
followed by flatten, a hidden dense layer with eLU, and a single output
unit. Both convolutions in a block use the block's filter count.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .conv import ConvFilter, conv3d_backward, conv3d_forward, DEFAULT_BUDGET_BYTES
from .errors import FormatError, ShapeError
from .segmentation import make_plan
from .tensor import Rng

BASELINE_FILTERS = (8, 16, 32, 64)
REVERSED_FILTERS = (64, 32, 16, 8)
DEFAULT_INPUT_SHAPE = (41, 49, 41)

ARCHITECTURES = {
    # name: (block filters, segmentation rate)
    "baseline": (BASELINE_FILTERS, 1),
    "proposed": (REVERSED_FILTERS, 2),
    "segmentation-only": (BASELINE_FILTERS, 2),
    "reverse-only": (REVERSED_FILTERS, 1),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    block_filters: tuple[int, ...] = BASELINE_FILTERS
    k: int = 1
    hidden_units: int = 256
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE
    boundary: int = 3
    kernel_side: int = 3
    output_units: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.block_filters or any(f < 1 for f in self.block_filters):
            raise ValueError(f"block filters must be positive, got {self.block_filters}")
        if self.k < 1 or self.hidden_units < 1:
            raise ValueError("k and hidden_units must be >= 1")
        if self.output_units != 1:
            raise ValueError("only a single output unit is supported")
        if self.kernel_side % 2 == 0:
            raise ValueError("kernel side must be odd")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (X, Y, Z), got {self.input_shape}")

    @classmethod
    def named(cls, name: str, **overrides) -> "ArchitectureSpec":
        try:
            filters, k = ARCHITECTURES[name]
        except KeyError:
            raise ValueError(
                f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}"
            ) from None
        kw = {"block_filters": filters, "k": k}
        kw.update({key: v for key, v in overrides.items() if v is not None})
        return cls(**kw)

    @property
    def in_channels(self) -> int:
        return self.k ** 3

    @property
    def network_input_shape(self) -> tuple[int, int, int]:
        return make_plan(self.input_shape, self.k, self.boundary).region_shape

    def spatial_chain(self) -> list[tuple[int, int, int]]:
        """Spatial extents at the network input and after each block."""
        shape = self.network_input_shape
        chain = [shape]
        for _ in self.block_filters:
            shape = tuple(L.pooled_extent(v) for v in shape)
            chain.append(shape)
        return chain

    @property
    def flatten_size(self) -> int:
        return int(np.prod(self.spatial_chain()[-1])) * self.block_filters[-1]

    def to_dict(self) -> dict:
        return asdict(self)


# --- layer objects ------------------------------------------------------------

class Layer:
    name: str = ""

    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []


class Conv(Layer):
    def __init__(self, name: str, filt: ConvFilter, kernel: str, budget: int):
        self.name = name
        self.filter = filt
        self.kernel = kernel
        self.budget = budget
        self.need_input_grad = True
        self._x = None
        self.grad_w = np.zeros_like(filt.weights)
        self.grad_b = np.zeros_like(filt.bias)

    def forward(self, x, train):
        self._x = x
        return conv3d_forward(x, self.filter, kernel=self.kernel, budget_bytes=self.budget)

    def backward(self, g):
        gx, self.grad_w, self.grad_b = conv3d_backward(
            self._x, self.filter, g, kernel=self.kernel, budget_bytes=self.budget,
            need_input_grad=self.need_input_grad)
        self._x = None
        return gx

    def params(self):
        return [(f"{self.name}.weight", self.filter.weights), (f"{self.name}.bias", self.filter.bias)]

    def grads(self):
        return [self.grad_w, self.grad_b]


class ELU(Layer):
    def __init__(self, name: str):
        self.name = name
        self._x = None

    def forward(self, x, train):
        self._x = x
        return L.elu_forward(x)

    def backward(self, g):
        gx = L.elu_backward(self._x, g)
        self._x = None
        return gx


class BatchNorm(Layer):
    def __init__(self, name: str, state: L.BatchNormState):
        self.name = name
        self.state = state
        self._cache = None
        self.grad_gamma = np.zeros_like(state.gamma)
        self.grad_beta = np.zeros_like(state.beta)

    def forward(self, x, train):
        y, self._cache = L.batchnorm_forward(x, self.state, "train" if train else "eval")
        return y

    def backward(self, g):
        gx, self.grad_gamma, self.grad_beta = L.batchnorm_backward(g, self._cache, self.state)
        self._cache = None
        return gx

    def params(self):
        return [(f"{self.name}.gamma", self.state.gamma), (f"{self.name}.beta", self.state.beta)]

    def grads(self):
        return [self.grad_gamma, self.grad_beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var)]


class MaxPool(Layer):
    def __init__(self, name: str):
        self.name = name
        self._shape = None
        self._idx = None

    def forward(self, x, train):
        self._shape = x.shape
        y, self._idx = L.maxpool3d_forward(x)
        return y

    def backward(self, g):
        gx = L.maxpool3d_backward(self._idx, g, self._shape)
        self._idx = None
        return gx


class Flatten(Layer):
    def __init__(self, name: str):
        self.name = name
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return L.flatten_forward(x)

    def backward(self, g):
        return L.flatten_backward(g, self._shape)


class Dense(Layer):
    def __init__(self, name: str, layer: L.DenseLayer):
        self.name = name
        self.layer = layer
        self._x = None
        self.grad_w = np.zeros_like(layer.weights)
        self.grad_b = np.zeros_like(layer.bias)

    def forward(self, x, train):
        self._x = x
        return L.dense_forward(x, self.layer)

    def backward(self, g):
        gx, self.grad_w, self.grad_b = L.dense_backward(self._x, self.layer, g)
        self._x = None
        return gx

    def params(self):
        return [(f"{self.name}.weight", self.layer.weights), (f"{self.name}.bias", self.layer.bias)]

    def grads(self):
        return [self.grad_w, self.grad_b]


# --- network --------------------------------------------------------------------

@dataclass
class ParamCounts:
    conv_weights: int
    fc_weights: int
    biases: int
    bn_params: int

    @property
    def total(self) -> int:
        return self.conv_weights + self.fc_weights + self.biases + self.bn_params

    def as_dict(self) -> dict:
        return {"conv_weights": self.conv_weights, "fc_weights": self.fc_weights,
                "biases": self.biases, "bn_params": self.bn_params, "total": self.total}


@dataclass
class Network:
    spec: ArchitectureSpec
    layers: list[Layer]
    dtype: np.dtype = field(default=np.dtype(np.float32))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (*self.spec.network_input_shape, self.spec.in_channels)

    @property
    def flatten_size(self) -> int:
        return self.spec.flatten_size

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [p for layer in self.layers for p in layer.params()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [b for layer in self.layers for b in layer.buffers()]

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        """Everything persisted by :func:`save_weights`, in file order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
            out.extend(layer.buffers())
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.state_entries()]

    def restore(self, snap: list[np.ndarray]):
        for (_, a), saved in zip(self.state_entries(), snap):
            a[...] = saved

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch {x.shape} does not match network input {self.input_shape}")
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            h = layer.forward(h, train)
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        g = grad_out.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def set_kernel(self, kernel: str):
        for layer in self.layers:
            if isinstance(layer, Conv):
                layer.kernel = kernel


def _xavier(rng: Rng, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -bound, bound, dtype)


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32,
          kernel: str = "blas", budget_bytes: int = DEFAULT_BUDGET_BYTES) -> Network:
    """Xavier-initialised network (uniform, fans over the full receptive field)."""
    dtype = np.dtype(dtype)
    rng = Rng(seed)
    l = spec.kernel_side
    layers: list[Layer] = []
    c_in = spec.in_channels
    draw = 0
    for b, filters in enumerate(spec.block_filters, start=1):
        for j in (1, 2):
            w = _xavier(rng.spawn(draw), (c_in, l, l, l, filters),
                        c_in * l**3, filters * l**3, dtype)
            draw += 1
            name = f"block{b}.conv{j}"
            layers.append(Conv(name, ConvFilter(w, np.zeros(filters, dtype)), kernel, budget_bytes))
            layers.append(ELU(f"{name}.elu"))
            c_in = filters
        layers.append(BatchNorm(f"block{b}.bn", L.BatchNormState.create(filters, dtype)))
        layers.append(MaxPool(f"block{b}.pool"))
    layers[0].need_input_grad = False
    layers.append(Flatten("flatten"))
    fan_in = spec.flatten_size
    for name, fan_out in (("hidden", spec.hidden_units), ("output", spec.output_units)):
        w = _xavier(rng.spawn(draw), (fan_in, fan_out), fan_in, fan_out, dtype)
        draw += 1
        layers.append(Dense(name, L.DenseLayer(w, np.zeros(fan_out, dtype))))
        if name == "hidden":
            layers.append(ELU("hidden.elu"))
        fan_in = fan_out
    return Network(spec=spec, layers=layers, dtype=dtype)


def count_params(net_or_spec) -> ParamCounts:
    """Weight counts exclude biases and batch-norm parameters; those are
    reported in their own fields."""
    spec = net_or_spec.spec if isinstance(net_or_spec, Network) else net_or_spec
    l3 = spec.kernel_side ** 3
    conv = bias = bn = 0
    c_in = spec.in_channels
    for f in spec.block_filters:
        conv += c_in * l3 * f + f * l3 * f
        bias += 2 * f
        bn += 2 * f
        c_in = f
    fc = spec.flatten_size * spec.hidden_units + spec.hidden_units * spec.output_units
    bias += spec.hidden_units + spec.output_units
    return ParamCounts(conv_weights=conv, fc_weights=fc, biases=bias, bn_params=bn)


def forward(net: Network, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    return net.forward(batch, train=(mode == "train"))


def backward(net: Network, batch: np.ndarray, targets: np.ndarray):
    """MSE loss and parameter gradients (train-mode forward)."""
    pred = net.forward(batch, train=True)
    targets = np.asarray(targets, dtype=pred.dtype).reshape(pred.shape)
    loss = L.mse(pred, targets)
    net.backward(L.mse_grad(pred, targets))
    return loss, net.gradients()


# --- weight files ----------------------------------------------------------------
# magic "RCNW", u16 version, u16 entry count, then per entry:
#   u16 name length, name (utf-8), u8 dtype code, u8 rank, u32 extents, raw LE data

WEIGHT_MAGIC = b"RCNW"
WEIGHT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_weights(net: Network, path) -> None:
    entries = net.state_entries()
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<HH", WEIGHT_VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_weight_entries(path) -> list[tuple[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    if blob[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HH", take(4))
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dt = _CODE_DTYPES[code]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
        out.append((name, arr))
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def load_weights(path, spec: ArchitectureSpec, kernel: str = "blas") -> Network:
    entries = read_weight_entries(path)
    dtype = entries[0][1].dtype if entries else np.dtype(np.float32)
    net = build(spec, dtype=dtype, kernel=kernel)
    expected = net.state_entries()
    for (ename, earr), (name, arr) in zip(expected, entries):
        if ename != name or earr.shape != arr.shape:
            raise FormatError(
                f"layer mismatch at {ename}: file has {name} {arr.shape}, "
                f"spec expects {earr.shape}"
            )
    if len(entries) != len(expected):
        missing = expected[len(entries)][0] if len(entries) < len(expected) else entries[len(expected)][0]
        raise FormatError(f"layer mismatch at {missing}: entry count {len(entries)} != {len(expected)}")
    for (_, earr), (_, arr) in zip(expected, entries):
        earr[...] = arr
    return net
