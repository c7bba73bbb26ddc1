"""Dense tensors, seeded random streams, im2col and matmul.

Tensors are plain row-major ``numpy.ndarray`` objects.  Training runs in
float32; oracles and gradient checks promote to float64.

Random streams use numpy's PCG64 bit generator (128-bit LCG state with the
XSL-RR output permutation; multiplier 0x2360ed051fc65da44385df649fccf645).
Its output sequence for a given seed is fixed by numpy across platforms and
releases, and its state serializes to plain integers for checkpoints.
"""

from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def make_rng(seed):
    """Return a PCG64 generator seeded with a 64-bit unsigned integer."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"shape must be non-empty with all dims >= 1, got {shape}")
    return shape


def tensor_create(shape, init="zero", *, value=0.0, low=0.0, high=1.0, rng=None, dtype=DTYPE):
    """Allocate a tensor filled with zeros, a constant, or uniform draws.

    ``init="uniform"`` consumes exactly ``prod(shape)`` float64 draws from
    ``rng`` before rounding to ``dtype``.
    """
    shape = _check_shape(shape)
    if init == "zero":
        return np.zeros(shape, dtype=dtype)
    if init == "constant":
        return np.full(shape, value, dtype=dtype)
    if init == "uniform":
        if rng is None:
            raise ValueError("uniform init needs an rng")
        return rng.uniform(low, high, size=prod(shape)).astype(dtype).reshape(shape)
    raise ValueError(f"unknown init {init!r}")


def matmul(a, b):
    """Matrix product of a ``[m, k]`` and a ``[k, n]`` tensor."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size, k, pad, stride):
    span = size + 2 * pad - k
    if span < 0 or stride < 1 or span % stride:
        raise ShapeError(
            f"size {size} with kernel {k}, pad {pad}, stride {stride} "
            "does not give an integral output size"
        )
    return span // stride + 1


def im2col(x, k, pad=0, stride=1):
    """Unfold one ``[C, H, W]`` image into a ``[C*k*k, H'*W']`` matrix.

    Column ``j`` holds the receptive field of output position ``j`` (row-major
    over the output grid), ordered channel first, then kernel row, then kernel
    column.  Reads outside the image are zero.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"im2col expects [C, H, W], got {x.shape}")
    return im2col_batch(x[None], k, pad, stride)


def im2col_batch(x, k, pad=0, stride=1):
    """Batched :func:`im2col`: ``[B, C, H, W]`` to ``[C*k*k, B*H'*W']``.

    Columns are ordered batch-major, so column ``b*H'*W' + j`` is output
    position ``j`` of image ``b``.
    """
    B, C, H, W = x.shape
    oh = conv_output_size(H, k, pad, stride)
    ow = conv_output_size(W, k, pad, stride)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (B, C, oh, ow, k, k) -> (C, k, k, B, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * k * k, B * oh * ow)


def col2im_batch(cols, x_shape, k, pad=0, stride=1):
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to images."""
    B, C, H, W = x_shape
    oh = conv_output_size(H, k, pad, stride)
    ow = conv_output_size(W, k, pad, stride)
    cols = cols.reshape(C, k, k, B, oh, ow)
    # accumulate channel-major so every add reads contiguous columns
    out = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))
