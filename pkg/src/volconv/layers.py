"""Non-convolutional network operations with hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

ELU_ALPHA = 1.0
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


# --- activation -------------------------------------------------------------

def elu_forward(x: np.ndarray, alpha: float = ELU_ALPHA) -> np.ndarray:
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))


def elu_backward(x: np.ndarray, grad_y: np.ndarray, alpha: float = ELU_ALPHA) -> np.ndarray:
    return grad_y * np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0))).astype(x.dtype)


# --- pooling ----------------------------------------------------------------

def pooled_extent(n: int) -> int:
    """Output extent of 2x2x2/stride-2 pooling with clipped (ceil) boundaries."""
    return -(-n // 2)


def maxpool3d_forward(x: np.ndarray):
    """2x2x2 max pooling, stride 2, ceil extents.

    Returns ``(y, argmax)`` where ``argmax`` holds, per output cell, the
    window offset ``dx*4 + dy*2 + dz`` of the selected input voxel. Ties go
    to the first offset in that order. Windows hanging over the edge only
    see in-bounds voxels.
    """
    if x.ndim != 5:
        raise ShapeError(f"expected (N, X, Y, Z, C), got {x.shape}")
    N, X, Y, Z, C = x.shape
    X2, Y2, Z2 = pooled_extent(X), pooled_extent(Y), pooled_extent(Z)
    xp = np.full((N, 2 * X2, 2 * Y2, 2 * Z2, C), -np.inf, dtype=x.dtype)
    xp[:, :X, :Y, :Z] = x
    win = xp.reshape(N, X2, 2, Y2, 2, Z2, 2, C).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    win = win.reshape(N, X2, Y2, Z2, C, 8)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool3d_backward(argmax: np.ndarray, grad_y: np.ndarray, x_shape) -> np.ndarray:
    N, X, Y, Z, C = x_shape
    X2, Y2, Z2 = pooled_extent(X), pooled_extent(Y), pooled_extent(Z)
    if grad_y.shape != (N, X2, Y2, Z2, C) or argmax.shape != grad_y.shape:
        raise ShapeError(f"grad {grad_y.shape} does not match pooled {x_shape}")
    win = np.zeros((N, X2, Y2, Z2, C, 8), dtype=grad_y.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad_y[..., None], axis=-1)
    g = win.reshape(N, X2, Y2, Z2, C, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    g = g.reshape(N, 2 * X2, 2 * Y2, 2 * Z2, C)
    return np.ascontiguousarray(g[:, :X, :Y, :Z])


# --- batch normalisation ----------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    train: bool = True


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Per-channel normalisation over all non-channel axes.

    In train mode the running statistics of ``state`` are updated in place
    (``running = momentum * running + (1 - momentum) * batch``; biased
    batch variance). Returns ``(y, cache)``.
    """
    if x.shape[-1] != state.channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, state has {state.channels}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1 - mom) * var
    elif mode == "eval":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    x_hat = (x - mean.astype(x.dtype)) * inv_std
    y = x_hat * state.gamma.astype(x.dtype) + state.beta.astype(x.dtype)
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, train=(mode == "train"))


def batchnorm_backward(grad_y: np.ndarray, cache: BatchNormCache, state: BatchNormState):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    axes = tuple(range(grad_y.ndim - 1))
    x_hat = cache.x_hat
    grad_beta = grad_y.sum(axis=axes)
    grad_gamma = (grad_y * x_hat).sum(axis=axes)
    g_hat = grad_y * state.gamma.astype(grad_y.dtype)
    if not cache.train:
        return g_hat * cache.inv_std, grad_gamma, grad_beta
    count = grad_y.size // grad_y.shape[-1]
    grad_x = (cache.inv_std / count) * (
        count * g_hat - g_hat.sum(axis=axes) - x_hat * (g_hat * x_hat).sum(axis=axes)
    )
    return grad_x, grad_gamma, grad_beta


# --- dense ------------------------------------------------------------------

@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"dense weights must be 2-D and non-empty, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weights {self.weights.shape}")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.fan_in:
        raise ShapeError(f"input {x.shape} does not match fan_in {layer.fan_in}")
    return x @ layer.weights + layer.bias


def dense_backward(x: np.ndarray, layer: DenseLayer, grad_y: np.ndarray):
    """Returns ``(grad_x, grad_weights, grad_bias)``."""
    if grad_y.shape != (x.shape[0], layer.fan_out):
        raise ShapeError(f"grad {grad_y.shape} does not match output ({x.shape[0]}, {layer.fan_out})")
    return grad_y @ layer.weights.T, x.T @ grad_y, grad_y.sum(axis=0)


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(grad_y: np.ndarray, x_shape) -> np.ndarray:
    return grad_y.reshape(x_shape)


# --- losses -----------------------------------------------------------------

def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    _check_pair(pred, target)
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    _check_pair(pred, target)
    return float(np.mean(np.abs(pred.astype(np.float64) - target)))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_pair(pred, target)
    return (2.0 * (pred - target) / pred.size).astype(pred.dtype)
