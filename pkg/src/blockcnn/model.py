"""The BlockCNN network in its two roles: artifact removal and causal prediction."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, CheckpointError, DimensionError, ModelError, ParameterError, StateError
from .image import BLOCK, Colorspace, Context24, block_grid_shape, extract_context, pad_bytes
from .jpeg import jpeg_roundtrip
from .nn import ArchConfig, Conv2d, LeakyReLU, ResidualBlock, Sequential, load_checkpoint, save_checkpoint


class Variant(enum.Enum):
    AR = 0
    PRED = 1


_CS_CODES = {Colorspace.YCBCR: 0, Colorspace.LAB: 1}
_CS_FROM_CODE = {v: k for k, v in _CS_CODES.items()}

# Block offsets (dx, dy) from the centre that the predictor may see.
CAUSAL_OFFSETS = ((-1, -1), (0, -1), (1, -1), (-1, 0))
MASKED_OFFSETS = ((0, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
MASK_FILL = 128


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.AR
    channels: int = 64
    n_res_blocks: int = 9
    colorspace: Colorspace = Colorspace.YCBCR
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.channels < 8:
            raise ParameterError(f"channels must be >= 8, got {self.channels}")
        if self.n_res_blocks < 1:
            raise ParameterError(f"n_res_blocks must be >= 1, got {self.n_res_blocks}")
        if self.colorspace not in _CS_CODES:
            raise ParameterError(f"model colorspace must be YCBCR or LAB, got {self.colorspace}")


class AlignedDownsample:
    """Stride-3 conv from the 24x24 context grid to 8x8, plus the centre crop.

    The strided conv alone maps output pixel (i, j) onto context cells
    3i..3i+2, far from the centre-block pixel (8+i, 8+j) it must restore.
    Adding the centre 8x8 of the input features keeps that alignment; the
    conv then only has to contribute context.
    """

    kind = "downsample"

    def __init__(self, name: str, channels: int):
        self.name = name
        self.conv = Conv2d(name, channels, channels, kernel=3, stride=3, pad=0)
        self._shape = None

    def param_shapes(self):
        return self.conv.param_shapes()

    def buffer_shapes(self):
        return {}

    def init(self, params, rng):
        self.conv.init(params, rng)

    def forward(self, params, x, train, record):
        if x.shape[2:] != (3 * BLOCK, 3 * BLOCK):
            raise DimensionError(f"{self.name}: expected a 24x24 feature map, got {x.shape}")
        self._shape = x.shape if record else None
        return self.conv.forward(params, x, train, record) + x[:, :, BLOCK : 2 * BLOCK, BLOCK : 2 * BLOCK]

    def backward(self, params, grads, gy):
        if self._shape is None:
            raise StateError(f"{self.name}: backward called before a recorded forward")
        gx = self.conv.backward(params, grads, gy)
        gx[:, :, BLOCK : 2 * BLOCK, BLOCK : 2 * BLOCK] += gy
        return gx


def _layers(config: ModelConfig):
    c = config.channels
    layers = [
        Conv2d("stem1", 3, 32),
        LeakyReLU("stem1.act"),
        Conv2d("stem2", 32, c),
        LeakyReLU("stem2.act"),
        AlignedDownsample("down", c),
    ]
    layers += [ResidualBlock(f"res{i}", c) for i in range(config.n_res_blocks)]
    layers.append(Conv2d("head", c, 3))
    return layers


class BlockCNN:
    """24x24x3 context in, 8x8x3 block out."""

    def __init__(self, config: ModelConfig, initialize: bool = True):
        self.config = config
        self.net = Sequential(_layers(config))
        if initialize:
            self.net.initialize(config.seed)
            # residual head starts at zero: AR begins as the identity,
            # PRED as the flat 128 predictor
            self.zero_head()

    @property
    def params(self):
        return self.net.params

    def forward(self, x: np.ndarray, train: bool = False, record: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1:] != (3, 3 * BLOCK, 3 * BLOCK):
            raise ModelError(f"expected (N, 3, 24, 24) input, got {x.shape}")
        return self.net.forward(x, train=train, record=record)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.net.backward(grad_out)

    def zero_head(self) -> None:
        self.params["head.weight"][...] = 0
        self.params["head.bias"][...] = 0

    def to_bytes(self) -> bytes:
        arch = ArchConfig(
            self.config.variant.value,
            _CS_CODES[self.config.colorspace],
            self.config.channels,
            self.config.n_res_blocks,
        )
        return save_checkpoint(self.params, arch)

    @property
    def model_id(self) -> bytes:
        """8-byte content hash of the checkpoint."""
        return hashlib.sha256(self.to_bytes()).digest()[:8]

    @classmethod
    def from_bytes(cls, data: bytes, expect: ModelConfig | None = None) -> BlockCNN:
        arch, tensors = load_checkpoint(data)
        try:
            config = ModelConfig(
                variant=Variant(arch.variant),
                channels=arch.channels,
                n_res_blocks=arch.n_res_blocks,
                colorspace=_CS_FROM_CODE[arch.colorspace],
            )
        except (ValueError, KeyError, ParameterError) as exc:
            raise CheckpointError(f"bad architecture header: {exc}") from exc
        if expect is not None and (
            expect.variant,
            expect.channels,
            expect.n_res_blocks,
            expect.colorspace,
        ) != (config.variant, config.channels, config.n_res_blocks, config.colorspace):
            raise CheckpointError(f"checkpoint architecture {config} does not match {expect}")
        model = cls(config, initialize=False)
        expected = {}
        for layer in model.net.layers:
            expected.update(layer.param_shapes())
            expected.update(layer.buffer_shapes())
        if set(tensors) != set(expected):
            raise CheckpointError("checkpoint tensor names do not match the architecture")
        for name, shape in expected.items():
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, want {shape}")
        model.net.params.update((k, tensors[k].copy()) for k in model.net.tensor_names())
        return model


def build_model(config: ModelConfig) -> BlockCNN:
    return BlockCNN(config)


def expected_parameter_count(channels: int, n_res_blocks: int) -> int:
    """Trainable parameter count of the layer list, in closed form."""

    def conv(i, o, k=3):
        return o * i * k * k + o

    res = 2 * conv(channels, channels) + 2 * (2 * channels)
    return conv(3, 32) + conv(32, channels) + conv(channels, channels) + n_res_blocks * res + conv(channels, 3)


# ---------------------------------------------------------------------------
# value mapping


def to_network_domain(samples: np.ndarray) -> np.ndarray:
    """Bytes 0..255 -> float32 in [-1, 1]."""
    return (np.asarray(samples, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def from_network_domain(t: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1], map back to 0..255 and round half away from zero."""
    v = (np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# masking and inference


def _block_slice(dx: int, dy: int):
    y0, x0 = (dy + 1) * BLOCK, (dx + 1) * BLOCK
    return slice(y0, y0 + BLOCK), slice(x0, x0 + BLOCK)


def mask_contexts(samples: np.ndarray) -> np.ndarray:
    """Mask the non-causal blocks of context arrays shaped (..., 3, 24, 24)."""
    out = np.array(samples, dtype=np.uint8, copy=True)
    for dx, dy in MASKED_OFFSETS:
        ys, xs = _block_slice(dx, dy)
        out[..., ys, xs] = MASK_FILL
    return out


def apply_causal_mask(ctx: Context24) -> Context24:
    return Context24(mask_contexts(ctx.samples), ctx.bx, ctx.by)


def _require(model: BlockCNN, variant: Variant) -> None:
    if model.config.variant is not variant:
        raise ModelError(f"need a {variant.name} model, got {model.config.variant.name}")


def infer_ar_batch(model: BlockCNN, contexts: np.ndarray) -> np.ndarray:
    """(N, 3, 24, 24) degraded contexts -> (N, 3, 8, 8) restored blocks."""
    _require(model, Variant.AR)
    x = to_network_domain(contexts)
    residual = model.forward(x, train=False, record=False)
    center = x[:, :, BLOCK : 2 * BLOCK, BLOCK : 2 * BLOCK]
    return from_network_domain(residual + center)


def infer_pred_batch(model: BlockCNN, masked: np.ndarray) -> np.ndarray:
    """(N, 3, 24, 24) causally masked contexts -> (N, 3, 8, 8) predictions."""
    _require(model, Variant.PRED)
    return from_network_domain(model.forward(to_network_domain(masked), train=False, record=False))


def infer_ar(model: BlockCNN, ctx: Context24) -> np.ndarray:
    return infer_ar_batch(model, ctx.samples[None])[0]


def infer_pred(model: BlockCNN, ctx: Context24) -> np.ndarray:
    return infer_pred_batch(model, ctx.samples[None])[0]


# ---------------------------------------------------------------------------
# training pairs


def causal_context(pixels: np.ndarray, bx: int, by: int) -> np.ndarray:
    """Masked context of block (bx, by) from block-aligned uint8 planes.

    Neighbours outside the block grid read as the mask fill value, which is
    what the codec's predictor sees at image borders.
    """
    _, h, w = pixels.shape
    nbx, nby = w // BLOCK, h // BLOCK
    out = np.full((3, 3 * BLOCK, 3 * BLOCK), MASK_FILL, dtype=np.uint8)
    for dx, dy in CAUSAL_OFFSETS:
        x, y = bx + dx, by + dy
        if 0 <= x < nbx and 0 <= y < nby:
            ys, xs = _block_slice(dx, dy)
            out[:, ys, xs] = pixels[:, y * BLOCK : (y + 1) * BLOCK, x * BLOCK : (x + 1) * BLOCK]
    return out


def make_training_pair(
    clean: np.ndarray,
    quality: int,
    bx: int,
    by: int,
    variant: Variant,
    degraded: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Build (context (3,24,24), target (3,8,8)) from clean uint8 planes.

    ``degraded`` may carry a cached baseline-JPEG reconstruction of ``clean``
    at ``quality`` (both block-padded the same way).
    """
    clean = pad_bytes(clean)
    nbx, nby = block_grid_shape(clean.shape[2], clean.shape[1])
    if not (0 <= bx < nbx and 0 <= by < nby):
        raise BoundsError(f"block ({bx}, {by}) outside {nbx}x{nby} grid")
    if degraded is None:
        degraded = jpeg_roundtrip(clean, quality)
    target = clean[:, by * BLOCK : (by + 1) * BLOCK, bx * BLOCK : (bx + 1) * BLOCK].copy()
    if variant is Variant.AR:
        return extract_context(degraded, bx, by).samples, target
    return causal_context(degraded, bx, by), target
