"""Forward and hand-written backward passes for every network layer.

The functional ops (``conv2d_forward``, ``nptn_forward`` ...) are pure.  The
classes at the bottom wrap them with parameters and a forward cache so that
a network is just a list of layers, and so the gradient checker can drive any
layer through the same ``forward``/``backward`` interface.

Computation follows the dtype of the input: float32 in training, float64
inside gradient checks.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import col2im_batch, conv_output_size, im2col_batch, tensor_create

AGGREGATES = ("sum", "mean")


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# standard convolution


def _conv_out_hw(x_shape, k, pad, stride):
    return (conv_output_size(x_shape[2], k, pad, stride),
            conv_output_size(x_shape[3], k, pad, stride))


def conv2d_forward(x, w, bias=None, pad=0, stride=1, cols=None):
    """Cross-correlation ``y[b,o] = sum_c x[b,c] * w[o,c] + bias[o]``.

    ``x`` is ``[B, C, H, W]`` and ``w`` is ``[O, C, k, k]``.  ``cols`` may
    carry a precomputed ``im2col_batch(x, ...)``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} for {w.shape[0]} outputs")
    B = x.shape[0]
    O, _, k, _ = w.shape
    oh, ow = _conv_out_hw(x.shape, k, pad, stride)
    if cols is None:
        cols = im2col_batch(x, k, pad, stride)
    # the transposed product runs faster in BLAS for these skinny kernels
    y = (cols.T @ w.reshape(O, -1).T).T
    if bias is not None:
        y += bias[:, None]
    # downstream pointwise layers are fastest on one contiguous layout
    return np.ascontiguousarray(y.reshape(O, B, oh, ow).transpose(1, 0, 2, 3))


def conv2d_backward(dy, x, w, pad=0, stride=1, with_bias=False, cols=None, input_grad=True):
    """Gradients of :func:`conv2d_forward`; ``d_input`` is None when not requested."""
    O, _, k, _ = w.shape
    if dy.shape[:2] != (x.shape[0], O):
        raise ShapeError(f"conv2d backward: dy {dy.shape} does not match forward")
    if cols is None:
        cols = im2col_batch(x, k, pad, stride)
    dyt = dy.transpose(1, 0, 2, 3).reshape(O, -1)
    d_params = {"w": (dyt @ cols.T).reshape(w.shape)}
    if with_bias:
        d_params["bias"] = dyt.sum(axis=1)
    if not input_grad:
        return LayerGrads(None, d_params)
    if stride == 1 and pad <= k - 1:
        # full correlation with the flipped kernel; cheaper than scattering columns
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return LayerGrads(conv2d_forward(dy, w_flip, pad=k - 1 - pad), d_params)
    dcols = w.reshape(O, -1).T @ dyt
    return LayerGrads(col2im_batch(dcols, x.shape, k, pad, stride), d_params)


# ---------------------------------------------------------------------------
# NPTN layer


@dataclass(frozen=True)
class NptnLayerSpec:
    M: int
    N: int
    G: int
    k: int
    pad: int = 0
    stride: int = 1
    aggregate: str = "sum"

    def __post_init__(self):
        if min(self.M, self.N, self.G, self.k) < 1:
            raise ContractError(f"M, N, G, k must all be >= 1: {self}")
        if self.aggregate not in AGGREGATES:
            raise ContractError(f"aggregate must be one of {AGGREGATES}, got {self.aggregate!r}")

    @property
    def filter_count(self):
        return self.M * self.N * self.G

    @property
    def bank_shape(self):
        return (self.M, self.N, self.G, self.k, self.k)


@dataclass
class NptnWeights:
    """Filter bank ``w[m, n, g, :, :]``: input channel, output channel, member."""

    w: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 5 or self.w.shape[3] != self.w.shape[4]:
            raise ShapeError(f"NPTN bank must be [M, N, G, k, k], got {self.w.shape}")

    @classmethod
    def init(cls, spec, rng, dtype=np.float32):
        # fan-in counts the M summed paths only; one of G filters wins per location
        s = 1.0 / np.sqrt(spec.M * spec.k * spec.k)
        return cls(tensor_create(spec.bank_shape, "uniform", low=-s, high=s, rng=rng, dtype=dtype))

    @classmethod
    def from_conv(cls, conv_w):
        """Build a G=1 bank from a standard ``[N, M, k, k]`` kernel."""
        return cls(np.ascontiguousarray(conv_w.transpose(1, 0, 2, 3)[:, :, None]))

    def to_conv(self):
        if self.w.shape[2] != 1:
            raise ContractError("only a G=1 bank converts to a standard convolution")
        return np.ascontiguousarray(self.w[:, :, 0].transpose(1, 0, 2, 3))


@dataclass
class MaxRoute:
    """Index of the winning filter for every (b, m, n, y, x) location."""

    winner: np.ndarray


def _check_nptn(x, spec, wts):
    if x.ndim != 4 or x.shape[1] != spec.M:
        raise ShapeError(f"NPTN expects [B, {spec.M}, H, W], got {x.shape}")
    if wts.w.shape != spec.bank_shape:
        raise ShapeError(f"NPTN bank {wts.w.shape} does not match {spec.bank_shape}")


def nptn_forward(x, spec, wts, cols=None):
    """Transformation-pooled convolution.

    For each node (m, n) the input channel m is convolved with the node's G
    filters; the G maps are max-pooled elementwise, and the M pooled maps
    feeding output n are summed (or averaged).  Returns ``(y, route)``.
    """
    _check_nptn(x, spec, wts)
    B = x.shape[0]
    M, N, G, k = spec.M, spec.N, spec.G, spec.k
    oh, ow = _conv_out_hw(x.shape, k, spec.pad, spec.stride)
    if cols is None:
        cols = im2col_batch(x, k, spec.pad, spec.stride)
    # z: (M, N*G, B*P), one matmul per input channel
    z = np.matmul(wts.w.reshape(M, N * G, k * k), cols.reshape(M, k * k, -1))
    z = z.reshape(M, N, G, -1)
    u = z[:, :, 0].copy()
    winner = np.zeros(u.shape, dtype=np.uint8)
    for g in range(1, G):
        # strict comparison: the first maximum wins ties
        better = z[:, :, g] > u
        winner *= ~better
        winner += better * np.uint8(g)
        np.maximum(u, z[:, :, g], out=u)
    y = u.sum(axis=0)
    if spec.aggregate == "mean":
        y /= M
    y = np.ascontiguousarray(y.reshape(N, B, oh, ow).transpose(1, 0, 2, 3))
    route = winner.reshape(M, N, B, oh, ow).transpose(2, 0, 1, 3, 4)
    return y, MaxRoute(route)


def nptn_backward(dy, x, spec, wts, route, cols=None, input_grad=True):
    """Winner-take-all backward pass of :func:`nptn_forward`."""
    _check_nptn(x, spec, wts)
    B = x.shape[0]
    M, N, G, k = spec.M, spec.N, spec.G, spec.k
    oh, ow = _conv_out_hw(x.shape, k, spec.pad, spec.stride)
    if dy.shape != (B, N, oh, ow) or route.winner.shape != (B, M, N, oh, ow):
        raise ContractError(
            f"NPTN backward: dy {dy.shape} / route {route.winner.shape} do not match the forward pass"
        )
    if cols is None:
        cols = im2col_batch(x, k, spec.pad, spec.stride)
    dyt = dy.transpose(1, 0, 2, 3).reshape(N, -1)
    if spec.aggregate == "mean":
        dyt = dyt / M
    winner = route.winner.transpose(1, 2, 0, 3, 4).reshape(M, N, 1, -1)
    if G == 1:
        dz = np.broadcast_to(dyt[None, :, None], (M, N, 1, dyt.shape[1]))
    else:
        dz = np.empty((M, N, G, dyt.shape[1]), dtype=dyt.dtype)
        for g in range(G):
            np.multiply(winner[:, :, 0] == g, dyt[None], out=dz[:, :, g])
    dz = dz.reshape(M, N * G, -1)
    cols = cols.reshape(M, k * k, -1)
    dw = np.matmul(dz, cols.transpose(0, 2, 1)).reshape(spec.bank_shape)
    if not input_grad:
        return LayerGrads(None, {"w": dw})
    dcols = np.matmul(wts.w.reshape(M, N * G, k * k).transpose(0, 2, 1), dz)
    dx = col2im_batch(dcols.reshape(M * k * k, -1), x.shape, k, spec.pad, spec.stride)
    return LayerGrads(dx, {"w": dw})


# ---------------------------------------------------------------------------
# pointwise and pooling layers


def spatial_maxpool(x, window=2, stride=2):
    """Max over ``window x window`` patches.  Trailing rows/columns that do not
    fill a window are dropped.  Returns ``(y, argmax)`` where ``argmax`` is the
    row-major index inside the window (first maximum wins)."""
    B, C, H, W = x.shape
    oh = (H - window) // stride + 1
    ow = (W - window) // stride + 1
    if window < 1 or oh < 1 or ow < 1:
        raise ShapeError(f"maxpool window {window} does not fit input {x.shape}")
    y = arg = None
    for i in range(window):
        for j in range(window):
            v = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            if y is None:
                y, arg = v.copy(), np.zeros(v.shape, dtype=np.uint8)
                continue
            better = v > y
            arg *= ~better
            arg += better * np.uint8(i * window + j)
            np.maximum(y, v, out=y)
    return y, arg


def spatial_maxpool_backward(dy, arg, x_shape, window=2, stride=2):
    oh, ow = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dy * hit
    return dx


def prelu_forward(x, a):
    # max/min arithmetic rather than a select, which is much slower on float32
    return np.maximum(x, 0) + a.reshape(1, -1, *([1] * (x.ndim - 2))) * np.minimum(x, 0)


def prelu_backward(dy, x, a):
    a_b = a.reshape(1, -1, *([1] * (x.ndim - 2)))
    x_neg = np.minimum(x, 0)
    # slope is 1 on the positive side and a elsewhere
    slope = (x <= 0) * (a_b - 1)
    slope += 1
    dx = dy * slope
    B, C = x.shape[:2]
    da = np.einsum("bcp,bcp->c", x_neg.reshape(B, C, -1), dy.reshape(B, C, -1))
    return LayerGrads(dx, {"a": da})


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train=True, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over (B, H, W).

    In train mode the running statistics are updated in place (unbiased
    variance, as is conventional) and a cache for the backward pass is
    returned; in eval mode the cache is ``None``.
    """
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        mean = x.sum(axis=(0, 2, 3)) / n
        xc = x - mean[None, :, None, None]
        var = np.einsum("bchw,bchw->c", xc, xc) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        xc = x - running_mean[None, :, None, None]
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None]
    y += beta[None, :, None, None]
    return y, ((xhat, inv_std) if train else None)


def batchnorm2d_backward(dy, gamma, cache):
    if cache is None:
        raise ContractError("batch norm backward needs a train-mode forward cache")
    xhat, inv_std = cache
    axes = (0, 2, 3)
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=axes)
    dgamma = np.einsum("bchw,bchw->c", dy, xhat)
    # gamma factors out of both reductions of d(xhat) = gamma * dy
    scale = (gamma * inv_std / n)[None, :, None, None]
    dx = xhat * (-dgamma[None, :, None, None])
    dx += n * dy
    dx -= dbeta[None, :, None, None]
    dx *= scale
    return LayerGrads(dx, {"gamma": dgamma, "beta": dbeta})


def linear_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {w.shape}, b {b.shape} do not conform")
    return x @ w + b


def linear_backward(dy, x, w):
    return LayerGrads(dy @ w.T, {"w": x.T @ dy, "b": dy.sum(axis=0)})


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ContractError(f"labels must be {B} integers in [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    d_logits = np.exp(shifted - logsum[:, None])
    d_logits[rows, labels] -= 1
    d_logits /= B
    return loss, d_logits


# ---------------------------------------------------------------------------
# stateful layer objects


class Layer:
    """A layer owns ``params`` (trainable), ``buffers`` (state) and ``grads``."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        # a network's first layer can skip its input gradient
        self.input_grad = True

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def tie_margin(self, x):
        """Smallest gap between a max and the runner-up; inf if no max is taken."""
        return np.inf


def _top2_gap(values, axis):
    if values.shape[axis] < 2:
        return np.inf
    part = -np.partition(-values, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    return float((top - second).min())


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, k, pad=0, stride=1, bias=False, rng=None):
        super().__init__()
        self.pad, self.stride = pad, stride
        s = 1.0 / np.sqrt(in_channels * k * k)
        shape = (out_channels, in_channels, k, k)
        self.params["w"] = (tensor_create(shape, "uniform", low=-s, high=s, rng=rng)
                            if rng is not None else tensor_create(shape))
        if bias:
            self.params["bias"] = tensor_create((out_channels,))

    def forward(self, x, train=True):
        w = self.params["w"]
        self._x = x
        self._cols = im2col_batch(x, w.shape[2], self.pad, self.stride)
        return conv2d_forward(x, w, self.params.get("bias"), self.pad, self.stride, cols=self._cols)

    def backward(self, dy):
        g = conv2d_backward(dy, self._x, self.params["w"], self.pad, self.stride,
                            with_bias="bias" in self.params, cols=self._cols, input_grad=self.input_grad)
        self.grads = g.d_params
        return g.d_input


class Nptn(Layer):
    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        self.params["w"] = (NptnWeights.init(spec, rng).w if rng is not None
                            else tensor_create(spec.bank_shape))

    @property
    def weights(self):
        return NptnWeights(self.params["w"])

    def forward(self, x, train=True):
        self._x = x
        self._cols = im2col_batch(x, self.spec.k, self.spec.pad, self.spec.stride)
        y, self._route = nptn_forward(x, self.spec, self.weights, cols=self._cols)
        return y

    def backward(self, dy):
        g = nptn_backward(dy, self._x, self.spec, self.weights, self._route, cols=self._cols,
                          input_grad=self.input_grad)
        self.grads = g.d_params
        return g.d_input

    def tie_margin(self, x):
        cols = im2col_batch(x, self.spec.k, self.spec.pad, self.spec.stride)
        M, N, G, k = self.spec.M, self.spec.N, self.spec.G, self.spec.k
        z = np.matmul(self.params["w"].reshape(M, N * G, k * k), cols.reshape(M, k * k, -1))
        return _top2_gap(z.reshape(M, N, G, -1), axis=2)


class MaxPool2d(Layer):
    def __init__(self, window=2, stride=2):
        super().__init__()
        self.window, self.stride = window, stride

    def forward(self, x, train=True):
        self._shape = x.shape
        y, self._arg = spatial_maxpool(x, self.window, self.stride)
        return y

    def backward(self, dy):
        return spatial_maxpool_backward(dy, self._arg, self._shape, self.window, self.stride)

    def tie_margin(self, x):
        B, C, H, W = x.shape
        win = np.lib.stride_tricks.sliding_window_view(x, (self.window, self.window), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride]
        return _top2_gap(win.reshape(*win.shape[:4], -1), axis=-1)


class PReLU(Layer):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.params["a"] = tensor_create((channels,), "constant", value=init)

    def forward(self, x, train=True):
        self._x = x
        return prelu_forward(x, self.params["a"])

    def backward(self, dy):
        g = prelu_backward(dy, self._x, self.params["a"])
        self.grads = g.d_params
        return g.d_input

    def tie_margin(self, x):
        # the kink at 0 plays the role of a tie
        return 2 * float(np.abs(x).min())


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = tensor_create((channels,), "constant", value=1.0)
        self.params["beta"] = tensor_create((channels,))
        self.buffers["running_mean"] = tensor_create((channels,))
        self.buffers["running_var"] = tensor_create((channels,), "constant", value=1.0)

    def forward(self, x, train=True):
        y, self._cache = batchnorm2d_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, eps=self.eps, momentum=self.momentum,
        )
        return y

    def backward(self, dy):
        g = batchnorm2d_backward(dy, self.params["gamma"], self._cache)
        self.grads = g.d_params
        return g.d_input


class Flatten(Layer):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        s = 1.0 / np.sqrt(in_features)
        shape = (in_features, out_features)
        self.params["w"] = (tensor_create(shape, "uniform", low=-s, high=s, rng=rng)
                            if rng is not None else tensor_create(shape))
        self.params["b"] = tensor_create((out_features,))

    def forward(self, x, train=True):
        self._x = x
        return linear_forward(x, self.params["w"], self.params["b"])

    def backward(self, dy):
        g = linear_backward(dy, self._x, self.params["w"])
        self.grads = g.d_params
        return g.d_input


class SoftmaxCrossEntropy(Layer):
    """Loss head with fixed labels; the output is the scalar mean loss."""

    def __init__(self, labels):
        super().__init__()
        self.labels = np.asarray(labels)

    def forward(self, x, train=True):
        loss, self._d = softmax_xent(x, self.labels)
        return np.asarray(loss, dtype=x.dtype)

    def backward(self, dy):
        return self._d * dy
