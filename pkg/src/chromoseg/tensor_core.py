"""Forward and backward kernels for the segmentation network.

Every tensor is a plain ``numpy.ndarray`` of rank 4 laid out as
``(batch, channel, height, width)``.  The functions here are pure: they never
mutate their arguments, and the backward kernels take exactly what they need
from the forward pass as explicit arguments.  Computation happens in the dtype
of the inputs, so the same code runs in float32 for training and float64 for
gradient checks.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, StructuralError

NUM_CLASSES = 4


def check_tensor4(x, name="input", finite=False):
    """Return ``x`` as an ndarray after checking it is rank 4.

    With ``finite=True`` a NaN or infinity anywhere raises NumericalError.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise StructuralError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if finite and not np.isfinite(x).all():
        raise NumericalError(f"{name} contains non-finite values")
    return x


@dataclass
class ConvKernel:
    """Convolution weights ``(out, in, kh, kw)`` and per-output-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise StructuralError(f"kernel weights must be rank 4, got {self.weights.shape}")
        o, _, kh, kw = self.weights.shape
        if kh != kw or kh % 2 == 0:
            raise StructuralError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (o,):
            raise StructuralError(f"bias must have shape ({o},), got {self.bias.shape}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def size(self):
        return self.weights.shape[2]

    @property
    def fan_in(self):
        return self.in_channels * self.size * self.size

    def astype(self, dtype):
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))


def _im2col(x, k):
    """Patch matrix of shape ``(c*k*k, n*h*w)``.

    Rows are (c, ky, kx) taps and columns are output pixels in (n, h, w)
    order; channel-major so each copy moves contiguous image rows.
    """
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def conv2d_forward(x, kernel):
    """Stride-1 convolution with 'same' zero padding.

    Output shape is ``(n, kernel.out_channels, h, w)``; taps falling outside the
    input read zero.  Like most deep-learning "convolutions" this is a
    cross-correlation (the kernel is not flipped).
    """
    x = check_tensor4(x, finite=True)
    n, c, h, w = x.shape
    if c != kernel.in_channels:
        raise StructuralError(
            f"input has {c} channels but kernel expects {kernel.in_channels}")
    k = kernel.size
    wmat = kernel.weights.reshape(kernel.out_channels, -1).astype(x.dtype, copy=False)
    out = wmat @ _im2col(x, k)
    out += kernel.bias.astype(x.dtype, copy=False)[:, None]
    return np.ascontiguousarray(out.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def conv2d_backward(x, kernel, upstream):
    """Gradients of ``sum(upstream * conv2d_forward(x, kernel))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x = check_tensor4(x)
    upstream = check_tensor4(upstream, "upstream")
    n, c, h, w = x.shape
    o, k = kernel.out_channels, kernel.size
    if c != kernel.in_channels:
        raise StructuralError(
            f"input has {c} channels but kernel expects {kernel.in_channels}")
    if upstream.shape != (n, o, h, w):
        raise StructuralError(
            f"upstream shape {upstream.shape} does not match forward output {(n, o, h, w)}")

    dy = upstream.transpose(1, 0, 2, 3).reshape(o, n * h * w)
    grad_w = (dy @ _im2col(x, k).T).reshape(kernel.weights.shape)
    grad_b = dy.sum(axis=1)

    wmat = kernel.weights.reshape(o, -1).astype(x.dtype, copy=False)
    dcols = wmat.T @ dy
    if k == 1:
        grad_x = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(grad_x), grad_w, grad_b

    p = k // 2
    dcols = dcols.reshape(c, k, k, n, h, w)
    grad_xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
    grad_x = grad_xp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2.

    Returns ``(output, argmax)`` where ``argmax`` holds the winning position
    inside each window as an index 0..3 in row-major order.  Ties go to the
    first position in that order.
    """
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise StructuralError(f"max pooling needs even spatial dims, got {h}x{w}")
    windows = (x.reshape(n, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h // 2, w // 2, 4))
    argmax = windows.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(windows, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(upstream, argmax):
    """Route each upstream value to its recorded window position."""
    upstream = check_tensor4(upstream, "upstream")
    argmax = np.asarray(argmax)
    if argmax.shape != upstream.shape:
        raise StructuralError(
            f"argmax shape {argmax.shape} does not match upstream {upstream.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() > 3):
        raise StructuralError("argmax indices must lie in 0..3")
    n, c, h2, w2 = upstream.shape
    onehot = argmax[..., None] == np.arange(4)
    grad = np.where(onehot, upstream[..., None], 0).astype(upstream.dtype, copy=False)
    grad = grad.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad.reshape(n, c, 2 * h2, 2 * w2))


def upsample2x_nearest(x):
    x = check_tensor4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(upstream):
    upstream = check_tensor4(upstream, "upstream")
    n, c, h, w = upstream.shape
    if h % 2 or w % 2:
        raise StructuralError(f"upsample gradient needs even spatial dims, got {h}x{w}")
    return upstream.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def concat_channels(a, b):
    """Stack ``a`` then ``b`` along the channel axis."""
    a, b = check_tensor4(a, "a"), check_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise StructuralError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(upstream, a_channels):
    """Split a concatenation gradient back into the ``a`` and ``b`` parts."""
    return upstream[:, :a_channels], upstream[:, a_channels:]


def softmax(logits, axis=1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_labels(labels, shape):
    labels = np.asarray(labels)
    if labels.shape != shape:
        raise StructuralError(f"labels shape {labels.shape} does not match logits {shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise StructuralError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    return labels.astype(np.intp, copy=False)


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Pixel-mean weighted cross-entropy and its gradient.

    ``loss = mean_p(-w[y_p] * log softmax(logits)_p[y_p])`` with the mean taken
    over every pixel of every image (the weights do not renormalise it).

    Args:
        logits: ``(n, 4, h, w)`` raw scores.
        labels: ``(n, h, w)`` integer classes in 0..3.
        class_weights: four positive multipliers, or None for all ones.

    Returns:
        ``(loss, grad_logits)``; loss is a Python float.
    """
    logits = check_tensor4(logits, "logits", finite=True)
    n, c, h, w = logits.shape
    if c != NUM_CLASSES:
        raise StructuralError(f"logits must have {NUM_CLASSES} channels, got {c}")
    y = _check_labels(labels, (n, h, w))

    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    prob = e / denom
    log_p = np.take_along_axis(shifted - np.log(denom), y[:, None], axis=1)[:, 0]

    count = n * h * w
    onehot = (y[:, None] == np.arange(c)[None, :, None, None])
    if class_weights is None:
        pix_w = np.ones((n, h, w), dtype=logits.dtype)
    else:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        if cw.shape != (NUM_CLASSES,):
            raise StructuralError(f"class_weights must have {NUM_CLASSES} entries")
        pix_w = cw[y]
    loss = float(-(pix_w.astype(np.float64) * log_p).sum() / count)
    grad = (prob - onehot) * (pix_w[:, None] / count)
    return loss, grad.astype(logits.dtype, copy=False)
