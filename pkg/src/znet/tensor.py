"""Rank-4 (n, c, h, w) numerical kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects of rank 4. Every backward kernel
takes the cache produced by its forward counterpart; parameter gradients are
accumulated in place into the gradient arrays held by the parameter objects.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def check_tensor4(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got shape {np.shape(x)}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass
class ConvParams:
    """3x3 (or 1x1 head) convolution weights with paired gradient buffers."""

    weight: np.ndarray
    bias: np.ndarray
    dweight: np.ndarray = None
    dbias: np.ndarray = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"bad conv weight shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        if self.dweight is None:
            self.dweight = np.zeros_like(self.weight)
        if self.dbias is None:
            self.dbias = np.zeros_like(self.bias)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.99
    dgamma: np.ndarray = None
    dbeta: np.ndarray = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError("batch norm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ContractError("batch norm momentum must lie in (0, 1)")
        if self.dgamma is None:
            self.dgamma = np.zeros_like(self.gamma)
        if self.dbeta is None:
            self.dbeta = np.zeros_like(self.beta)

    @classmethod
    def create(cls, channels: int, dtype=np.float64, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding k//2 (same-size output)."""
    check_tensor4(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"conv input shape {x.shape} does not match weight shape {p.weight.shape}"
        )
    n, _, h, w = x.shape
    k = p.weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((p.out_channels, n, h, w), dtype=np.result_type(x, p.weight))
    for di in range(k):
        for dj in range(k):
            out += np.tensordot(
                p.weight[:, :, di, dj], xp[:, :, di:di + h, dj:dj + w], axes=([1], [1])
            )
    out += p.bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray) -> np.ndarray:
    n, _, h, w = x.shape
    if grad_out.shape != (n, p.out_channels, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, p.out_channels, h, w)}"
        )
    k = p.weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros(xp.shape, dtype=np.result_type(x, grad_out))
    for di in range(k):
        for dj in range(k):
            win = xp[:, :, di:di + h, dj:dj + w]
            p.dweight[:, :, di, dj] += np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
            # (n, h, w, c) -> (n, c, h, w)
            dxp[:, :, di:di + h, dj:dj + w] += np.tensordot(
                grad_out, p.weight[:, :, di, dj], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    p.dbias += grad_out.sum(axis=(0, 2, 3))
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray = None
    inv_std: np.ndarray = None


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    """Per-channel batch norm. Returns ``(out, cache)``.

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``
    using the biased batch variance.
    """
    check_tensor4(x)
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batch norm input shape {x.shape} has {x.shape[1]} channels, params have {p.gamma.shape[0]}")
    g = p.gamma[None, :, None, None]
    b = p.beta[None, :, None, None]
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return g * xhat + b, BatchNormCache("eval")
    if mode != "train":
        raise ContractError(f"unknown mode {mode!r}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    m = p.momentum
    p.running_mean[...] = m * p.running_mean + (1 - m) * mean
    p.running_var[...] = m * p.running_var + (1 - m) * var
    return g * xhat + b, BatchNormCache("train", xhat, inv_std)


def batchnorm_backward(cache: BatchNormCache, p: BatchNormParams, grad_out: np.ndarray) -> np.ndarray:
    if cache.mode != "train":
        raise ContractError("batch norm backward needs a train-mode forward cache")
    xhat = cache.xhat
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {xhat.shape}")
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    axes = (0, 2, 3)
    dbeta = grad_out.sum(axis=axes)
    dgamma = (grad_out * xhat).sum(axis=axes)
    p.dbeta += dbeta
    p.dgamma += dgamma
    scale = (p.gamma * cache.inv_std / m)[None, :, None, None]
    return scale * (m * grad_out - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])


# --------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class PoolCache:
    argmax: np.ndarray  # (n, c, h/2, w/2) values in 0..3, row-major window order
    in_shape: tuple


def maxpool2x2_forward(x: np.ndarray):
    check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # np.argmax returns the first maximum: ties go to the earliest window cell
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, PoolCache(idx.astype(np.int8), x.shape)


def maxpool2x2_backward(cache: PoolCache, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache.in_shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape")
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, cache.argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(g: np.ndarray, ca: int):
    """Backward of :func:`concat_channels`: the first ``ca`` channels go to ``a``."""
    return g[:, :ca], g[:, ca:]


def center_crop(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    check_tensor4(x)
    h, w = x.shape[2:]
    if h2 > h or w2 > w or h2 < 1 or w2 < 1:
        raise ShapeError(f"cannot crop {x.shape} to {h2}x{w2}")
    oy, ox = (h - h2) // 2, (w - w2) // 2
    return x[:, :, oy:oy + h2, ox:ox + w2]


def center_crop_backward(grad_out: np.ndarray, in_shape: tuple) -> np.ndarray:
    h, w = in_shape[2:]
    h2, w2 = grad_out.shape[2:]
    oy, ox = (h - h2) // 2, (w - w2) // 2
    g = np.zeros(in_shape, dtype=grad_out.dtype)
    g[:, :, oy:oy + h2, ox:ox + w2] = grad_out
    return g


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_nearest_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --------------------------------------------------------------------------
# finite-difference harness


def grad_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic ``grads`` with central differences of ``f``.

    ``f`` is re-evaluated after each in-place perturbation of ``params``.
    Returns the max over coordinates of ``|a - b| / max(1, |a|, |b|)``.
    When ``max_coords`` is given, only that many randomly chosen coordinates
    per array are probed.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        if p.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ContractError("parameter arrays must be contiguous")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        gflat = np.asarray(g).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ContractError(f"non-finite function value near coordinate {i}")
            num = (fp - fm) / (2 * step)
            a = gflat[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# --------------------------------------------------------------------------
# debug dump: 4 little-endian uint32 dims then float32 payload


def save_tensor(path, x: np.ndarray) -> None:
    check_tensor4(x)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    shape = struct.unpack("<4I", raw[:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"tensor dump {path} has {data.size} values for shape {shape}")
    return data.reshape(shape).astype(np.float32)
