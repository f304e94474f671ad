"""Differentiable primitives for the two LeNet-style networks.

Tensors are plain numpy arrays in C (row-major) order. Everything is
computed in the dtype of the inputs, so the same functions serve as the
float32 training path and as a float64 reference in tests.

Only the layer set the architectures need is provided: valid
cross-correlation with stride 1, 2x2 max pooling, affine maps, ReLU and
softmax cross-entropy.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape (N*Ho*Wo, Cin*k*k) for a stride-1 valid correlation."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h - k + 1) * (w - k + 1), c * k * k)


def _check_conv(x: np.ndarray, kernel: np.ndarray) -> None:
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {kernel.shape} must be 4-D, square kernel")
    if kernel.shape[1] != x.shape[1] or kernel.shape[2] > x.shape[2] or kernel.shape[3] > x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, cols: np.ndarray | None = None
) -> np.ndarray:
    """Valid 2-D cross-correlation, stride 1, plus per-channel bias.

    ``x`` is (N, Cin, H, W), ``kernel`` is (Cout, Cin, K, K) and ``bias``
    is (Cout,). The result is (N, Cout, H-K+1, W-K+1). ``cols`` may carry a
    precomputed ``im2col(x, K)``.
    """
    _check_conv(x, kernel)
    cout, _, k, _ = kernel.shape
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    n, _, h, w = x.shape
    if cols is None:
        cols = im2col(x, k)
    out = cols @ kernel.reshape(cout, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(n, h - k + 1, w - k + 1, cout).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, upstream: np.ndarray, cols: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    _check_conv(x, kernel)
    n, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    expected = (n, cout, h - k + 1, w - k + 1)
    if upstream.shape != expected:
        raise ShapeError(f"conv2d_backward: upstream {upstream.shape} != forward output {expected}")
    if cols is None:
        cols = im2col(x, k)
    up = upstream.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_kernel = (up.T @ cols).reshape(kernel.shape)
    grad_bias = up.sum(axis=0)
    return conv2d_input_grad(kernel, upstream), grad_kernel, grad_bias


def conv2d_input_grad(kernel: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Input gradient alone (col2im of the patch-matrix gradient)."""
    cout, cin, k, _ = kernel.shape
    n, _, ho, wo = upstream.shape
    up = upstream.transpose(0, 2, 3, 1).reshape(-1, cout)
    dcols = (up @ kernel.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    grad = np.zeros((n, cin, ho + k - 1, wo + k - 1), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            grad[:, :, i:i + ho, j:j + wo] += dcols[i, j]
    return grad


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output cell, the index 0..3 of the
    winning element inside its window in row-major order. Ties go to the
    lowest index.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    out = x[:, :, 0::2, 0::2]
    idx = np.zeros(out.shape, dtype=np.uint8)
    for i, corner in enumerate((x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]), start=1):
        better = corner > out  # strict, so the earlier position keeps ties
        idx = np.where(better, np.uint8(i), idx)
        out = np.maximum(out, corner)
    return out, idx


def maxpool2x2_backward(indices: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Route ``upstream`` to the argmax positions recorded by the forward pass."""
    if indices.shape != upstream.shape:
        raise ShapeError(f"maxpool2x2_backward: indices {indices.shape} do not match upstream {upstream.shape}")
    n, c, ho, wo = upstream.shape
    grad = np.zeros((n, c, 2 * ho, 2 * wo), dtype=upstream.dtype)
    zero = np.zeros((), dtype=upstream.dtype)
    grad[:, :, 0::2, 0::2] = np.where(indices == 0, upstream, zero)
    grad[:, :, 0::2, 1::2] = np.where(indices == 1, upstream, zero)
    grad[:, :, 1::2, 0::2] = np.where(indices == 2, upstream, zero)
    grad[:, :, 1::2, 1::2] = np.where(indices == 3, upstream, zero)
    return grad


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, Din)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias


def linear_backward(
    x: np.ndarray, weight: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if upstream.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear_backward: upstream {upstream.shape} != forward output {(x.shape[0], weight.shape[0])}")
    return upstream @ weight, upstream.T @ x, upstream.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass ``upstream`` where ``x > 0``; the derivative at exactly 0 is 0."""
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward: input {x.shape} does not match upstream {upstream.shape}")
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross-entropy: labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.intp, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    The gradient is ``(softmax - onehot) / N``.
    """
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad


def norm(delta: np.ndarray, p: int | float) -> float:
    """l0 (nonzero count), l2 or l-infinity norm of a perturbation."""
    flat = np.asarray(delta, dtype=np.float64).ravel()
    if p == 0:
        return float(np.count_nonzero(flat))
    if p == 2:
        return float(np.sqrt(np.dot(flat, flat)))
    if p == np.inf or p == "inf":
        return float(np.abs(flat).max()) if flat.size else 0.0
    raise ValueError(f"unsupported norm order {p!r}; expected 0, 2 or inf")
