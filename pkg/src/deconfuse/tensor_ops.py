"""Numerical kernels on batched 1D signals.

Tensors are plain ``numpy`` arrays of shape ``(samples, channels, length)``.
Convolution is cross-correlation (no kernel flip).  Every kernel has a
matching ``*_backward`` used by the reverse-mode tape in
:mod:`deconfuse.autodiff`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateTransformError, GeometryError, NumericOverflowError, ShapeError

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

#: Floor applied to singular values inside log-det and its gradient.
SV_FLOOR = 1e-4


def _finite(out: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(name)
    return out


def as_tensor3(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, None, :]
    elif arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3:
        raise ShapeError(f"expected (samples, channels, length), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FilterBank:
    """Convolutional transforms of one layer: ``weights`` is (out, in, kernel)."""

    weights: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, None, :]
        if w.ndim != 3:
            raise ShapeError(f"filter weights must be (out, in, kernel), got {w.shape}")
        if w.shape[2] < 1 or self.stride < 1 or self.padding < 0:
            raise GeometryError(
                f"invalid filter geometry kernel={w.shape[2]} stride={self.stride} padding={self.padding}"
            )
        if not np.all(np.isfinite(w)):
            raise NumericOverflowError("FilterBank", "weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_length(self, length: int) -> int:
        return conv_output_length(length, self.kernel_size, self.stride, self.padding)

    def matrix(self) -> np.ndarray:
        """Filters as columns: shape (in*kernel, out)."""
        return filter_matrix(self.weights)


def filter_matrix(weights: np.ndarray) -> np.ndarray:
    return weights.reshape(weights.shape[0], -1).T


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    # (K, C, D_out, P)
    return sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def _check_conv(x: np.ndarray, weights: np.ndarray, stride: int, padding: int) -> int:
    if x.ndim != 3 or weights.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but filters expect {weights.shape[1]}"
        )
    d_out = conv_output_length(x.shape[2], weights.shape[2], stride, padding)
    if d_out < 1:
        raise GeometryError(
            f"kernel {weights.shape[2]} does not fit length {x.shape[2]} with padding {padding}"
        )
    return d_out


def conv1d_raw(x: np.ndarray, weights: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    _check_conv(x, weights, stride, padding)
    win = _windows(x, weights.shape[2], stride, padding)
    out = np.einsum("kcjp,mcp->kmj", win, weights, optimize=True)
    return _finite(out, "conv1d")


def conv1d(x, bank: FilterBank) -> np.ndarray:
    """Sliding cross-correlation of every sample with every filter."""
    return conv1d_raw(as_tensor3(x), bank.weights, bank.stride, bank.padding)


def conv1d_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of ``conv1d_raw`` with respect to input and weights."""
    kernel = weights.shape[2]
    win = _windows(x, kernel, stride, padding)
    grad_w = np.einsum("kmj,kcjp->mcp", grad_out, win, optimize=True)
    d_out = grad_out.shape[2]
    padded_len = x.shape[2] + 2 * padding
    grad_xp = np.zeros((x.shape[0], x.shape[1], padded_len))
    # contribution of kernel tap p lands at positions j*stride + p
    contrib = np.einsum("kmj,mcp->kcpj", grad_out, weights, optimize=True)
    stop = (d_out - 1) * stride + 1
    for p in range(kernel):
        grad_xp[:, :, p : p + stop : stride] += contrib[:, :, p, :]
    grad_x = grad_xp[:, :, padding : padding + x.shape[2]]
    return grad_x, grad_w


def maxpool1d(x, kernel: int, stride: int) -> np.ndarray:
    """Window maximum per channel; output length floor((D - kernel)/stride) + 1."""
    out, _ = maxpool1d_with_argmax(as_tensor3(x), kernel, stride)
    return out


def maxpool1d_with_argmax(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    if kernel < 1 or stride < 1:
        raise GeometryError(f"invalid pooling kernel={kernel} stride={stride}")
    if kernel > x.shape[2]:
        raise GeometryError(f"pooling kernel {kernel} exceeds length {x.shape[2]}")
    win = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    # np.argmax returns the first index on ties
    arg = np.argmax(win, axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, arg


def maxpool1d_backward(grad_out: np.ndarray, argmax: np.ndarray, length: int, stride: int) -> np.ndarray:
    k, c, d_out = grad_out.shape
    grad_x = np.zeros((k, c, length))
    pos = np.arange(d_out) * stride + argmax
    kk, cc, _ = np.indices(grad_out.shape)
    np.add.at(grad_x, (kk, cc, pos), grad_out)
    return grad_x


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    neg = SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, SELU_SCALE * x, neg)
    return out if out.ndim else float(out)


def selu_derivative(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def relu(x):
    """max(x, 0), which is also the proximity operator of the nonnegative-orthant indicator."""
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return out if out.ndim else float(out)


def flatten(features) -> np.ndarray:
    """(K, M, D) -> (K, M*D), channel-major then position."""
    f = as_tensor3(features)
    return f.reshape(f.shape[0], -1)


class SvdResult(NamedTuple):
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray


def svd(T) -> SvdResult:
    """Thin SVD; ``right_vectors`` has the right singular vectors as columns."""
    u, s, vt = np.linalg.svd(np.asarray(T, dtype=np.float64), full_matrices=False)
    return SvdResult(s, u, vt.T)


def _check_nonzero(T: np.ndarray) -> None:
    if not np.any(T):
        raise DegenerateTransformError("log-det of an all-zero transform is undefined")


def singular_values(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    _check_nonzero(T)
    return np.linalg.svd(T, compute_uv=False)


def logdet_rect(T, floor: float = SV_FLOOR) -> float:
    """Sum of logs of the singular values of a (possibly rectangular) matrix."""
    return float(np.sum(np.log(np.maximum(singular_values(T), floor))))


def logdet_gradient(T, floor: float = SV_FLOOR) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    _check_nonzero(T)
    s, u, v = svd(T)
    return (u / np.maximum(s, floor)) @ v.T


def logdet_value_and_gradient(T: np.ndarray, floor: float = SV_FLOOR) -> tuple[float, np.ndarray]:
    _check_nonzero(T)
    s, u, v = svd(T)
    clipped = np.maximum(s, floor)
    return float(np.sum(np.log(clipped))), (u / clipped) @ v.T


def frobenius_sq(T) -> float:
    T = np.asarray(T, dtype=np.float64)
    return float(np.sum(T * T))
