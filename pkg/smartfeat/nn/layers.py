"""Forward and backward passes of the individual layers.

Every forward function takes a batch with the sample axis first and returns ``(output, cache)``; the matching backward
function takes the upstream gradient and that cache and returns the gradients of its inputs.
"""
from typing import Tuple

from numpy.lib.stride_tricks import sliding_window_view
import numpy as np

__all__ = (
    "PROB_FLOOR",
    "conv1d_forward",
    "conv1d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
    "dense_forward",
    "dense_backward",
    "softmax",
    "cross_entropy",
    "cross_entropy_grad",
)

PROB_FLOOR = 1e-12


def conv1d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation along time, summed over input channels.

    :param x: ``N x C x L`` (or a single ``C x L`` sample).
    :param weight: ``O x C x K``.
    :param bias: ``O``.
    :return: ``N x O x (L - K + 1)`` and the cache for `conv1d_backward`.
    """
    single = x.ndim == 2
    if single:
        x = x[None]
    n_out, n_in, width = weight.shape
    if x.shape[1] != n_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernels expect {n_in}")
    if x.shape[2] < width:
        raise ValueError(f"input length {x.shape[2]} is shorter than the kernel width {width}")
    windows = sliding_window_view(x, width, axis=2)  # N x C x L' x K
    out = np.tensordot(windows, weight, axes=([1, 3], [1, 2])).transpose(0, 2, 1) + bias[None, :, None]
    return (out[0] if single else out), x


def conv1d_backward(
    dout: np.ndarray, cache: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """:return: ``(dx, dweight, dbias)``."""
    x = cache
    width = weight.shape[2]
    out_len = dout.shape[2]
    windows = sliding_window_view(x, width, axis=2)
    dweight = np.tensordot(dout, windows, axes=([0, 2], [0, 2]))
    dbias = dout.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    for k in range(width):
        dx[:, :, k : k + out_len] += np.tensordot(dout, weight[:, :, k], axes=([1], [0])).transpose(0, 2, 1)
    return dx, dweight, dbias


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return dout * (cache > 0)


def maxpool1d_forward(x: np.ndarray, width: int) -> Tuple[np.ndarray, Tuple[np.ndarray, Tuple[int, ...]]]:
    """Non-overlapping max pooling along the last axis; a trailing remainder shorter than ``width`` is dropped."""
    if width < 1:
        raise ValueError(f"pool width must be positive, got {width}")
    length = x.shape[-1]
    if length < width:
        raise ValueError(f"input length {length} is shorter than the pool width {width}")
    pooled = length // width
    blocks = x[..., : pooled * width].reshape(x.shape[:-1] + (pooled, width))
    index = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]
    return out, (index, x.shape)


def maxpool1d_backward(dout: np.ndarray, cache: Tuple[np.ndarray, Tuple[int, ...]]) -> np.ndarray:
    index, shape = cache
    width = shape[-1] // index.shape[-1]
    blocks = np.zeros(index.shape + (width,))
    np.put_along_axis(blocks, index[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[..., : index.shape[-1] * width] = blocks.reshape(index.shape[:-1] + (-1,))
    return dx


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``x @ weight + bias`` for ``N x D`` inputs and a ``D x M`` weight."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} features, dense layer expects {weight.shape[0]}")
    return x @ weight + bias, x


def dense_backward(
    dout: np.ndarray, cache: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row maximum so any finite logits are safe."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log of the true-class probability, with probabilities floored at `PROB_FLOOR`.

    Accepts a single probability vector with a scalar label, or a batch.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(probs):
        raise ValueError(f"{len(probs)} probability rows but {len(labels)} labels")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of `cross_entropy` of ``softmax(logits)`` with respect to the logits."""
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)
