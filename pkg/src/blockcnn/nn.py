"""A small numpy neural-network kernel.

Layers operate on NCHW arrays. Parameters live in a flat ordered dict owned
by :class:`Sequential`; each layer looks its tensors up by name. Forward
passes record what backward needs on the layer object, so one model
instance must not be trained from several threads at once. Inference with
``record=False`` leaves no state behind and may run concurrently.

Everything runs in the dtype of the parameters (float32 normally, float64
for gradient checks).
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, DimensionError, StateError, TrainingError

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise TrainingError(f"non-finite values produced by {where}")
    return x


# ---------------------------------------------------------------------------
# functional kernels


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (c, k, k, n, ho, wo) so a weight row (c*k*k) multiplies straight in
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of NCHW input with an (out, in, k, k) kernel, plus bias."""
    out, _ = _conv2d_forward(x, weight, bias, stride, pad)
    return out


def _conv2d_forward(x, weight, bias, stride, pad):
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    if weight.shape[2] != weight.shape[3] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bad kernel {weight.shape} / bias {bias.shape}")
    k = weight.shape[2]
    n = x.shape[0]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel")
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = weight.reshape(weight.shape[0], -1) @ cols
    y += bias[:, None]
    y = y.reshape(weight.shape[0], n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), (cols, x.shape, ho, wo)


def _conv2d_backward(gy, weight, stride, pad, cache):
    cols, xshape, ho, wo = cache
    n, c, h, w = xshape
    co, _, k, _ = weight.shape
    g = gy.transpose(1, 0, 2, 3).reshape(co, -1)
    gw = (g @ cols.T).reshape(weight.shape)
    gb = g.sum(axis=1)
    gcols = (weight.reshape(co, -1).T @ g).reshape(c, k, k, n, ho, wo)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + span_h : stride, j : j + span_w : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx), gw, gb


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> np.ndarray:
    """Per-channel batch normalization.

    In train mode the running statistics are updated in place.
    """
    out, _ = _batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum, eps)
    return out


def _batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum, eps):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if train:
        if x.shape[0] < 2:
            raise DimensionError("batchnorm needs a batch of at least 2 in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, train)


def _batchnorm_backward(gy, gamma, cache):
    xhat, inv_std, train = cache
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma[None, :, None, None]
    if not train:
        return gxhat * inv_std[None, :, None, None], ggamma, gbeta
    m = gy.size // gy.shape[1]
    gx = (
        inv_std[None, :, None, None]
        / m
        * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    )
    return gx, ggamma, gbeta


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_grad(x: np.ndarray, gy: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, gy, gy * gy.dtype.type(slope))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, diff * pred.dtype.type(2.0 / diff.size)


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    kind = "conv"

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int | None = None):
        self.name = name
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.pad = (kernel // 2 if stride == 1 else 0) if pad is None else pad
        self._cache = None

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_ch, self.in_ch, self.kernel, self.kernel),
            f"{self.name}.bias": (self.out_ch,),
        }

    def buffer_shapes(self):
        return {}

    def init(self, params, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = rng.standard_normal((self.out_ch, self.in_ch, self.kernel, self.kernel)) * np.sqrt(2.0 / fan_in)
        params[f"{self.name}.weight"] = w.astype(np.float32)
        params[f"{self.name}.bias"] = np.zeros(self.out_ch, dtype=np.float32)

    def forward(self, params, x, train, record):
        y, cache = _conv2d_forward(
            x, params[f"{self.name}.weight"], params[f"{self.name}.bias"], self.stride, self.pad
        )
        self._cache = cache if record else None
        return y

    def backward(self, params, grads, gy):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before a recorded forward")
        gx, gw, gb = _conv2d_backward(gy, params[f"{self.name}.weight"], self.stride, self.pad, self._cache)
        grads[f"{self.name}.weight"] = gw
        grads[f"{self.name}.bias"] = gb
        return gx


class BatchNorm2d:
    kind = "batchnorm"

    def __init__(self, name: str, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.name, self.channels, self.momentum, self.eps = name, channels, momentum, eps
        self._cache = None

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def buffer_shapes(self):
        return {f"{self.name}.running_mean": (self.channels,), f"{self.name}.running_var": (self.channels,)}

    def init(self, params, rng):
        c = self.channels
        params[f"{self.name}.gamma"] = np.ones(c, dtype=np.float32)
        params[f"{self.name}.beta"] = np.zeros(c, dtype=np.float32)
        params[f"{self.name}.running_mean"] = np.zeros(c, dtype=np.float32)
        params[f"{self.name}.running_var"] = np.ones(c, dtype=np.float32)

    def forward(self, params, x, train, record):
        p = self.name
        y, cache = _batchnorm_forward(
            x,
            params[f"{p}.gamma"],
            params[f"{p}.beta"],
            params[f"{p}.running_mean"],
            params[f"{p}.running_var"],
            train,
            self.momentum,
            self.eps,
        )
        self._cache = cache if record else None
        return y

    def backward(self, params, grads, gy):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before a recorded forward")
        gx, gg, gb = _batchnorm_backward(gy, params[f"{self.name}.gamma"], self._cache)
        grads[f"{self.name}.gamma"] = gg
        grads[f"{self.name}.beta"] = gb
        return gx


class LeakyReLU:
    kind = "leakyrelu"

    def __init__(self, name: str, slope: float = LEAKY_SLOPE):
        self.name, self.slope = name, slope
        self._x = None

    def param_shapes(self):
        return {}

    def buffer_shapes(self):
        return {}

    def init(self, params, rng):
        pass

    def forward(self, params, x, train, record):
        self._x = x if record else None
        return leaky_relu(x, self.slope)

    def backward(self, params, grads, gy):
        if self._x is None:
            raise StateError(f"{self.name}: backward called before a recorded forward")
        return leaky_relu_grad(self._x, gy, self.slope)


class ResidualBlock:
    """x + BN(conv(LReLU(BN(conv(x))))), no activation after the sum."""

    kind = "resblock"

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels
        self.layers = [
            Conv2d(f"{name}.conv1", channels, channels),
            BatchNorm2d(f"{name}.bn1", channels),
            LeakyReLU(f"{name}.act"),
            Conv2d(f"{name}.conv2", channels, channels),
            BatchNorm2d(f"{name}.bn2", channels),
        ]

    def param_shapes(self):
        return {k: v for layer in self.layers for k, v in layer.param_shapes().items()}

    def buffer_shapes(self):
        return {k: v for layer in self.layers for k, v in layer.buffer_shapes().items()}

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def forward(self, params, x, train, record):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        h = x
        for layer in self.layers:
            h = layer.forward(params, h, train, record)
        return h + x

    def backward(self, params, grads, gy):
        g = gy
        for layer in reversed(self.layers):
            g = layer.backward(params, grads, g)
        return g + gy


def residual_block_apply(x: np.ndarray, params: dict, name: str = "res", train: bool = False) -> np.ndarray:
    """Functional form of :class:`ResidualBlock` over a parameter dict."""
    channels = params[f"{name}.conv1.weight"].shape[0]
    return ResidualBlock(name, channels).forward(params, x, train, record=False)


class Sequential:
    """Ordered layer chain with a flat parameter dict and reverse-mode gradients."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self._recorded = False

    def trainable_names(self) -> list[str]:
        return [k for layer in self.layers for k in layer.param_shapes()]

    def buffer_names(self) -> list[str]:
        return [k for layer in self.layers for k in layer.buffer_shapes()]

    def tensor_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                for sub in layer.layers:
                    names += list(sub.param_shapes()) + list(sub.buffer_shapes())
            else:
                names += list(layer.param_shapes()) + list(layer.buffer_shapes())
        return names

    def initialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            layer.init(params, rng)
        self.params = OrderedDict((k, params[k]) for k in self.tensor_names())

    def astype(self, dtype) -> None:
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)

    def forward(self, x: np.ndarray, train: bool = False, record: bool = True) -> np.ndarray:
        h = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            h = layer.forward(self.params, h, train, record)
        self._recorded = record
        return _check_finite(h, "forward pass")

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Fill :attr:`grads` for every trainable tensor; return d(loss)/d(input)."""
        if not self._recorded:
            raise StateError("backward called before a recorded forward pass")
        self.grads = {}
        g = np.asarray(grad_out, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(self.params, self.grads, g)
        _check_finite(g, "backward pass")
        return g

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self, include_buffers: bool = False) -> int:
        names = self.tensor_names() if include_buffers else self.trainable_names()
        return sum(self.params[k].size for k in names)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise DimensionError(f"adam: grad {g.shape} vs param {p.shape} for {name}")
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= p.dtype.type(b1)
            m += p.dtype.type(1 - b1) * g
            v *= p.dtype.type(b2)
            v += p.dtype.type(1 - b2) * (g * g)
            m_hat = m / p.dtype.type(corr1)
            v_hat = v / p.dtype.type(corr2)
            p -= p.dtype.type(self.lr) * m_hat / (np.sqrt(v_hat) + p.dtype.type(self.eps))


def adam_step(params: dict, grads: dict, state: Adam) -> None:
    state.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"BCKP"
VERSION = 1


class ArchConfig(NamedTuple):
    variant: int
    colorspace: int
    channels: int
    n_res_blocks: int


def save_checkpoint(tensors: dict, arch: ArchConfig) -> bytes:
    """Serialize named float32 tensors behind a fixed little-endian header."""
    out = bytearray(MAGIC)
    out += struct.pack("<BBBII", VERSION, arch.variant, arch.colorspace, arch.channels, arch.n_res_blocks)
    out += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        arr = np.ascontiguousarray(t, dtype="<f4")
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def load_checkpoint(data: bytes) -> tuple[ArchConfig, OrderedDict]:
    data = memoryview(bytes(data))
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, variant, cs, channels, nres = struct.unpack("<BBBII", take(11))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad tensor name before byte {pos}") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 4:
            raise CheckpointError(f"tensor {name!r} has rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after tensors")
    return ArchConfig(variant, cs, channels, nres), tensors
