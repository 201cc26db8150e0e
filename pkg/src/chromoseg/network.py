"""A small U-Net style segmentation network trained with plain numpy.

Layout for ``depth`` encoder levels and ``f = base_filters``::

    encoder level i    conv3x3 -> relu -> conv3x3 -> relu  (f*2^i channels), maxpool
    bottleneck         conv3x3 -> relu -> conv3x3 -> relu  (f*2^depth channels)
    decoder level i    upsample2x -> conv3x3 -> relu (f*2^i),
                       concat [skip_i, upsampled] -> conv3x3 -> relu -> conv3x3 -> relu
    head               conv1x1 to 4 class logits

Parameter order, which the checkpoint format depends on, is the order above:
encoder levels 0..depth-1 (two kernels each), bottleneck (two), decoder levels
depth-1..0 (up-conv, first and second post-concat conv), head.  Within a
kernel the weights ``(out, in, kh, kw)`` come first in C order, then the bias.
With the defaults (depth 2, 16 base filters) there are 13 kernels and
``DEFAULT_PARAM_COUNT`` = 129,604 scalars.
"""

import copy
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, FormatError, NumericalDivergenceError, NumericalError, StructuralError
from .evaluation import confusion_matrix, iou_from_confusion

NUM_CLASSES = tc.NUM_CLASSES
CKPT_MAGIC = b"CHRCKPT1"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<8sIBHBBQ")


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_filters: int = 16
    num_classes: int = NUM_CLASSES
    # expected image size; not stored in checkpoints and not part of equality
    input_size: tuple = field(default=(88, 88), compare=False)

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be at least 1")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")
        step = 2 ** self.depth
        if any(s % step for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} not divisible by 2^depth = {step}")

    def layer_shapes(self):
        """(name, out, in, k) for every kernel, in parameter order."""
        f, d = self.base_filters, self.depth
        shapes, c_in = [], 1
        for i in range(d):
            c = f * 2 ** i
            shapes += [(f"enc{i}.conv1", c, c_in, 3), (f"enc{i}.conv2", c, c, 3)]
            c_in = c
        c = f * 2 ** d
        shapes += [("bottleneck.conv1", c, c_in, 3), ("bottleneck.conv2", c, c, 3)]
        c_in = c
        for i in reversed(range(d)):
            c = f * 2 ** i
            shapes += [(f"dec{i}.up", c, c_in, 3),
                       (f"dec{i}.conv1", c, 2 * c, 3),
                       (f"dec{i}.conv2", c, c, 3)]
            c_in = c
        shapes.append(("head", self.num_classes, c_in, 1))
        return shapes

    def param_count(self):
        return sum(o * i * k * k + o for _, o, i, k in self.layer_shapes())


DEFAULT_PARAM_COUNT = NetConfig().param_count()


@dataclass
class ModelParams:
    config: NetConfig
    kernels: list = field(default_factory=list)
    # (m, v) flat Adam moments when the parameters come out of training
    optimizer_state: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.kernels) != len(shapes):
            raise StructuralError(f"expected {len(shapes)} kernels, got {len(self.kernels)}")
        for kern, (name, o, i, k) in zip(self.kernels, shapes):
            if kern.weights.shape != (o, i, k, k):
                raise StructuralError(f"{name}: expected weights {(o, i, k, k)}, got {kern.weights.shape}")

    def arrays(self):
        """Flat list [w0, b0, w1, b1, ...] in parameter order."""
        out = []
        for k in self.kernels:
            out += [k.weights, k.bias]
        return out

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def astype(self, dtype):
        return ModelParams(self.config, [k.astype(dtype) for k in self.kernels])

    def copy(self):
        return copy.deepcopy(self)

    @classmethod
    def from_flat(cls, config, flat, dtype=np.float32):
        flat = np.asarray(flat)
        if flat.size != config.param_count():
            raise StructuralError(f"expected {config.param_count()} values, got {flat.size}")
        kernels, pos = [], 0
        for _, o, i, k in config.layer_shapes():
            n = o * i * k * k
            w = flat[pos:pos + n].reshape(o, i, k, k).astype(dtype)
            b = flat[pos + n:pos + n + o].astype(dtype)
            pos += n + o
            kernels.append(tc.ConvKernel(w, b))
        return cls(config, kernels)


def init_params(config, rng, dtype=np.float32):
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    kernels = []
    for _, o, i, k in config.layer_shapes():
        std = np.sqrt(2.0 / (i * k * k))
        w = (rng.standard_normal((o, i, k, k)) * std).astype(dtype)
        kernels.append(tc.ConvKernel(w, np.zeros(o, dtype)))
    return ModelParams(config, kernels)


def zero_params(config, dtype=np.float32):
    return ModelParams.from_flat(config, np.zeros(config.param_count()), dtype)


def _check_batch(params, batch):
    batch = tc.check_tensor4(batch, "batch")
    step = 2 ** params.config.depth
    if batch.shape[1] != 1:
        raise StructuralError(f"batch must have 1 channel, got {batch.shape[1]}")
    if batch.shape[2] % step or batch.shape[3] % step:
        raise StructuralError(
            f"spatial dims {batch.shape[2:]} not divisible by 2^depth = {step}")
    return batch


def _forward(params, batch):
    """Logits plus the tape of intermediate values needed by backward."""
    k = params.kernels
    d = params.config.depth
    tape = {"conv_in": [None] * len(k), "pre": [None] * len(k), "pool": [], "skip_ch": []}

    def conv_relu(idx, x):
        tape["conv_in"][idx] = x
        z = tc.conv2d_forward(x, k[idx])
        tape["pre"][idx] = z
        return tc.relu_forward(z)

    h = batch
    skips = []
    for i in range(d):
        h = conv_relu(2 * i + 1, conv_relu(2 * i, h))
        skips.append(h)
        h, arg = tc.maxpool2x2_forward(h)
        tape["pool"].append(arg)
    h = conv_relu(2 * d + 1, conv_relu(2 * d, h))
    for j, i in enumerate(reversed(range(d))):
        base = 2 * d + 2 + 3 * j
        up = conv_relu(base, tc.upsample2x_nearest(h))
        cat = tc.concat_channels(skips[i], up)
        tape["skip_ch"].append(skips[i].shape[1])
        h = conv_relu(base + 2, conv_relu(base + 1, cat))
    tape["conv_in"][-1] = h
    logits = tc.conv2d_forward(h, k[-1])
    return logits, tape


def forward(params, batch):
    """Class logits ``(n, 4, h, w)`` for a ``(n, 1, h, w)`` batch."""
    batch = _check_batch(params, batch)
    return _forward(params, batch)[0]


def backward(params, batch, labels, class_weights=None):
    """Loss and gradients ``[(grad_w, grad_b), ...]`` in parameter order."""
    batch = _check_batch(params, batch)
    k = params.kernels
    d = params.config.depth
    logits, tape = _forward(params, batch)
    loss, g = tc.softmax_cross_entropy(logits, labels, class_weights)
    grads = [None] * len(k)

    def conv_back(idx, upstream, relu=True):
        if relu:
            upstream = tc.relu_backward(tape["pre"][idx], upstream)
        gx, gw, gb = tc.conv2d_backward(tape["conv_in"][idx], k[idx], upstream)
        grads[idx] = (gw, gb)
        return gx

    g = conv_back(len(k) - 1, g, relu=False)
    skip_grads = [None] * d
    # decoder levels in reverse order of the forward pass
    for j in reversed(range(d)):
        i = d - 1 - j
        base = 2 * d + 2 + 3 * j
        g = conv_back(base + 2, g)
        g = conv_back(base + 1, g)
        g_skip, g_up = tc.concat_backward(g, tape["skip_ch"][j])
        skip_grads[i] = g_skip
        g = tc.upsample2x_backward(conv_back(base, g_up))
    g = conv_back(2 * d + 1, g)
    g = conv_back(2 * d, g)
    for i in reversed(range(d)):
        g = tc.maxpool2x2_backward(g, tape["pool"][i]) + skip_grads[i]
        g = conv_back(2 * i + 1, g)
        g = conv_back(2 * i, g)
    return loss, grads


def predict(params, images, batch_size=16):
    """Argmax class map ``(n, h, w)`` uint8 for ``(n, h, w)`` images."""
    images = np.asarray(images)
    dtype = params.kernels[0].weights.dtype
    out = np.empty(images.shape, np.uint8)
    for s in range(0, len(images), batch_size):
        x = images[s:s + batch_size, None].astype(dtype)
        out[s:s + batch_size] = forward(params, x).argmax(axis=1)
    return out


def inverse_frequency_weights(labels):
    """Per-class weights proportional to 1 / pixel frequency, mean 1.

    A class with no pixels is counted as one pixel so its weight stays finite.
    """
    counts = np.bincount(np.asarray(labels).ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    inv = 1.0 / np.maximum(counts, 1).astype(np.float64)
    return inv / inv.mean()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # "auto": inverse frequency on the training split; None: unweighted
    class_weights: object = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        cw = self.class_weights
        if cw is not None and not (isinstance(cw, str) and cw == "auto"):
            cw = np.asarray(cw, dtype=np.float64)
            if cw.shape != (NUM_CLASSES,) or not (cw > 0).all():
                raise ConfigError("class_weights must be four positive numbers")

    def resolve_weights(self, labels):
        if self.class_weights is None:
            return None
        if isinstance(self.class_weights, str):
            return inverse_frequency_weights(labels)
        return np.asarray(self.class_weights, dtype=np.float64)


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.lr * g

    def state(self):
        return None


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(a.dtype, copy=False)

    def state(self):
        return np.concatenate([x.ravel() for x in self.m]), np.concatenate([x.ravel() for x in self.v])


def _flat_grads(grads):
    out = []
    for gw, gb in grads:
        out += [gw, gb]
    return out


def evaluate_loss_iou(params, ds, class_weights=None, batch_size=16):
    """Mean loss and per-class global IOU (None when undefined) over a dataset."""
    if len(ds) == 0:
        return float("nan"), [None] * NUM_CLASSES
    dtype = params.kernels[0].weights.dtype
    total, conf = 0.0, np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64)
    for s in range(0, len(ds), batch_size):
        x = ds.images[s:s + batch_size, None].astype(dtype)
        y = ds.labels[s:s + batch_size]
        logits = forward(params, x)
        loss, _ = tc.softmax_cross_entropy(logits, y, class_weights)
        total += loss * len(x)
        conf += confusion_matrix(logits.argmax(axis=1), y)
    return total / len(ds), iou_from_confusion(conf)


def train(params, train_set, val_set, tcfg, log=None):
    """Mini-batch training; returns the parameters with the best validation loss.

    The history holds one dict per epoch with ``epoch``, ``train_loss``,
    ``val_loss`` and ``val_iou`` (four per-class global IOUs).  Without a
    validation set the last epoch is returned.

    Raises:
        NumericalDivergenceError: a batch produced a non-finite loss.
    """
    params = params.copy()
    history = []
    if tcfg.epochs == 0:
        return params, history
    weights = tcfg.resolve_weights(train_set.labels)
    rng = np.random.default_rng(tcfg.seed)
    if tcfg.optimizer == "adam":
        opt = Adam(params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps)
    else:
        opt = SGD(params, tcfg.learning_rate)
    dtype = params.kernels[0].weights.dtype
    n = len(train_set)
    best, best_loss = params.copy(), np.inf

    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, tcfg.batch_size)):
            idx = np.sort(order[s:s + tcfg.batch_size])
            x = train_set.images[idx, None].astype(dtype)
            try:
                # overflow is caught below as a non-finite loss or activation
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = backward(params, x, train_set.labels[idx], weights)
            except NumericalError:
                raise NumericalDivergenceError(epoch, b, float("nan")) from None
            if not np.isfinite(loss):
                raise NumericalDivergenceError(epoch, b, loss)
            opt.step(params.arrays(), _flat_grads(grads))
            total += loss * len(idx)
        train_loss = total / n
        val_loss, val_iou = evaluate_loss_iou(params, val_set, weights)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "val_iou": val_iou})
        if log:
            log(history[-1])
        score = val_loss if len(val_set) else -epoch
        if score < best_loss:
            best_loss, best = score, params.copy()
            best.optimizer_state = opt.state()
    return best, history


def history_csv(history):
    lines = ["epoch,train_loss,val_loss,iou_0,iou_1,iou_2,iou_3"]
    for row in history:
        ious = ["" if v is None else f"{v:.6f}" for v in row["val_iou"]]
        lines.append(f"{row['epoch']},{row['train_loss']:.6f},{row['val_loss']:.6f}," + ",".join(ious))
    return "\n".join(lines) + "\n"


def encode_checkpoint(params, optimizer_state=None):
    cfg = params.config
    flat = params.flatten().astype("<f4")
    parts = [CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, cfg.depth, cfg.base_filters,
                              cfg.num_classes, optimizer_state is not None, flat.size),
             flat.tobytes()]
    if optimizer_state is not None:
        m, v = optimizer_state
        if m.size != flat.size or v.size != flat.size:
            raise StructuralError("optimizer state does not match parameter count")
        parts += [np.asarray(m, "<f4").tobytes(), np.asarray(v, "<f4").tobytes()]
    return b"".join(parts)


def decode_checkpoint(buf):
    """Returns ``(params, optimizer_state)``; the state is None when absent."""
    if len(buf) < CKPT_HEADER.size:
        raise FormatError(f"checkpoint too short for header ({len(buf)} bytes)")
    magic, version, depth, base, ncls, has_opt, count = CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if has_opt not in (0, 1):
        raise FormatError("optimizer-state flag must be 0 or 1")
    try:
        cfg = NetConfig(depth=depth, base_filters=base, num_classes=ncls, input_size=(2 ** depth,) * 2)
        if 88 % 2 ** depth == 0:
            cfg = replace(cfg, input_size=(88, 88))
    except ConfigError as exc:
        raise FormatError(f"invalid network header: {exc}") from None
    if count != cfg.param_count():
        raise FormatError(f"header says {count} parameters, architecture needs {cfg.param_count()}")
    expected = CKPT_HEADER.size + 4 * count * (3 if has_opt else 1)
    if len(buf) != expected:
        raise FormatError(f"checkpoint has {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, "<f4", offset=CKPT_HEADER.size)
    params = ModelParams.from_flat(cfg, data[:count])
    state = (data[count:2 * count].copy(), data[2 * count:].copy()) if has_opt else None
    return params, state


def save_checkpoint(params, path, optimizer_state=None):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, optimizer_state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
