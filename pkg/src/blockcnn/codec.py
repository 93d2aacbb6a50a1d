"""Predictive block codec and its container format.

Layout of an encoded file (all integers little-endian)::

    0   4  magic "BCN1"
    4   1  version (1)
    5   1  flags: bit0 predictor on, bits1-2 colorspace (0 YCbCr, 1 Lab)
    6   4  width  (original, before padding)
    10  4  height
    14  1  quality 1..100
    15  8  model id (first 8 bytes of SHA-256 of the checkpoint; zero if off)
    23  .. Huffman scan, blocks in raster order, channels 0,1,2 per block,
           one DC predictor per channel, last byte padded with 1-bits

Blocks are transform coded as residuals against a prediction. With the
predictor off the prediction is 128 everywhere, which is baseline JPEG.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import ContainerError, ModelError, ModelMissingError, ParameterError, SequencingError
from .image import (
    BLOCK,
    Colorspace,
    RasterImage,
    assemble_blocks,
    block_grid_shape,
    convert_colorspace,
    from_bytes,
    pad_bytes,
    split_blocks,
    to_bytes,
)
from .jpeg import BitReader, build_quant_tables, decode_scan, encode_blocks, encode_scan, quant_tables_for_channels, reconstruct_blocks
from .model import CAUSAL_OFFSETS, MASK_FILL, BlockCNN, Variant, infer_pred_batch, mask_contexts

MAGIC = b"BCN1"
VERSION = 1
HEADER = struct.Struct("<4sBBIIB8s")
HEADER_SIZE = HEADER.size  # 23
NO_MODEL = bytes(8)

_CS_BITS = {Colorspace.YCBCR: 0, Colorspace.LAB: 1}
_CS_FROM_BITS = {v: k for k, v in _CS_BITS.items()}

# Called as trace(bx, by, prediction, reconstruction) each time a block is
# written to the reconstruction buffer.
Trace = Callable[[int, int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    quality: int
    predictor: bool = False
    colorspace: Colorspace = Colorspace.YCBCR
    model_id: bytes = NO_MODEL

    def pack(self) -> bytes:
        if not 1 <= self.quality <= 100:
            raise ParameterError(f"quality {self.quality} out of range")
        if self.predictor == (self.model_id == NO_MODEL):
            raise ParameterError("model id must be set exactly when the predictor is on")
        flags = int(self.predictor) | (_CS_BITS[self.colorspace] << 1)
        return HEADER.pack(MAGIC, VERSION, flags, self.width, self.height, self.quality, self.model_id)

    @classmethod
    def unpack(cls, data: bytes) -> ContainerHeader:
        if len(data) < HEADER_SIZE:
            raise ContainerError(f"container shorter than its {HEADER_SIZE}-byte header")
        magic, version, flags, width, height, quality, model_id = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if flags & ~0b111 or (flags >> 1) not in _CS_FROM_BITS:
            raise ContainerError(f"bad flags 0x{flags:02x}")
        if not 1 <= quality <= 100:
            raise ContainerError(f"bad quality {quality}")
        if width < 1 or height < 1:
            raise ContainerError(f"bad dimensions {width}x{height}")
        predictor = bool(flags & 1)
        if predictor == (model_id == NO_MODEL):
            raise ContainerError("model id inconsistent with predictor flag")
        return cls(width, height, quality, predictor, _CS_FROM_BITS[flags >> 1], model_id)


class ReconBuffer:
    """Reconstructed blocks, written once each in causal order.

    The canvas has a one-block border of 128 so causal contexts at the image
    edge come for free.
    """

    def __init__(self, blocks_x: int, blocks_y: int):
        self.blocks_x, self.blocks_y = blocks_x, blocks_y
        self.canvas = np.full((3, (blocks_y + 2) * BLOCK, (blocks_x + 2) * BLOCK), MASK_FILL, dtype=np.uint8)
        self.written = np.zeros((blocks_y, blocks_x), dtype=bool)

    def _view(self, bx, by):
        y, x = (by + 1) * BLOCK, (bx + 1) * BLOCK
        return self.canvas[:, y : y + BLOCK, x : x + BLOCK]

    def write(self, bx: int, by: int, block: np.ndarray) -> None:
        if self.written[by, bx]:
            raise SequencingError(f"block ({bx}, {by}) written twice")
        self._view(bx, by)[...] = block
        self.written[by, bx] = True

    def read(self, bx: int, by: int) -> np.ndarray:
        if not self.written[by, bx]:
            raise SequencingError(f"block ({bx}, {by}) read before it was reconstructed")
        return self._view(bx, by).copy()

    def causal_context(self, bx: int, by: int) -> np.ndarray:
        """Masked 24x24 context; fails fast if a causal neighbour is missing."""
        for dx, dy in CAUSAL_OFFSETS:
            x, y = bx + dx, by + dy
            if 0 <= x < self.blocks_x and 0 <= y < self.blocks_y and not self.written[y, x]:
                raise SequencingError(f"block ({x}, {y}) needed by ({bx}, {by}) is not reconstructed yet")
        y, x = by * BLOCK, bx * BLOCK
        return mask_contexts(self.canvas[:, y : y + 3 * BLOCK, x : x + 3 * BLOCK])

    def pixels(self) -> np.ndarray:
        return self.canvas[:, BLOCK:-BLOCK, BLOCK:-BLOCK].copy()


def predict_block(recon: ReconBuffer, bx: int, by: int, model: BlockCNN | None) -> np.ndarray:
    if model is None:
        return np.full((3, BLOCK, BLOCK), MASK_FILL, dtype=np.uint8)
    return infer_pred_batch(model, recon.causal_context(bx, by)[None])[0]


def wavefronts(blocks_x: int, blocks_y: int) -> list[list[tuple[int, int]]]:
    """Group blocks so each group only depends on earlier groups.

    Block (bx, by) needs its left and three upper neighbours; all of them
    have a smaller bx + 2*by, so blocks sharing that value are independent.
    """
    waves: list[list[tuple[int, int]]] = [[] for _ in range(blocks_x + 2 * blocks_y - 2)]
    for by in range(blocks_y):
        for bx in range(blocks_x):
            waves[bx + 2 * by].append((bx, by))
    return waves


def _run_predictive(
    model: BlockCNN | None,
    blocks_x: int,
    blocks_y: int,
    step: Callable[[int, int, np.ndarray], np.ndarray],
    trace: Trace | None,
) -> ReconBuffer:
    """Drive the causal loop shared by encoder and decoder.

    ``step(bx, by, prediction)`` returns the reconstructed block.
    """
    recon = ReconBuffer(blocks_x, blocks_y)
    if model is None:
        waves = [[(bx, by) for by in range(blocks_y) for bx in range(blocks_x)]]
    else:
        waves = wavefronts(blocks_x, blocks_y)
    flat = np.full((3, BLOCK, BLOCK), MASK_FILL, dtype=np.uint8)
    for wave in waves:
        if model is None:
            preds = [flat] * len(wave)
        else:
            contexts = np.stack([recon.causal_context(bx, by) for bx, by in wave])
            preds = infer_pred_batch(model, contexts)
        for (bx, by), p in zip(wave, preds):
            block = step(bx, by, p)
            recon.write(bx, by, block)
            if trace is not None:
                trace(bx, by, p, block)
    return recon


def _check_model(model: BlockCNN | None, colorspace: Colorspace) -> None:
    if model is None:
        return
    if model.config.variant is not Variant.PRED:
        raise ModelError("the codec predictor needs a PRED model")
    if model.config.colorspace is not colorspace:
        raise ModelError(
            f"model works in {model.config.colorspace.name}, codec configured for {colorspace.name}"
        )


def encode_bytes(
    pixels: np.ndarray,
    quality: int,
    model: BlockCNN | None = None,
    colorspace: Colorspace = Colorspace.YCBCR,
    trace: Trace | None = None,
) -> bytes:
    """Encode uint8 planes (3, H, W) that are already in ``colorspace``."""
    _check_model(model, colorspace)
    build_quant_tables(quality)
    _, h, w = pixels.shape
    nbx, nby = block_grid_shape(w, h)
    grid = split_blocks(pad_bytes(pixels))
    tables = quant_tables_for_channels(quality)
    coeffs = np.empty((nby, nbx, 3, BLOCK, BLOCK), dtype=np.int32)

    def step(bx, by, prediction):
        pred = prediction.astype(np.float64)
        c = encode_blocks(grid[by, bx], pred, tables)
        coeffs[by, bx] = c
        return reconstruct_blocks(c, pred, tables)

    _run_predictive(model, nbx, nby, step, trace)
    header = ContainerHeader(
        w,
        h,
        quality,
        predictor=model is not None,
        colorspace=colorspace,
        model_id=model.model_id if model is not None else NO_MODEL,
    )
    scan = encode_scan(coeffs.reshape(nbx * nby, 3, BLOCK, BLOCK)).getvalue()
    return header.pack() + scan


def encode_image(
    img: RasterImage,
    quality: int,
    model: BlockCNN | None = None,
    colorspace: Colorspace | None = None,
    trace: Trace | None = None,
) -> bytes:
    if colorspace is None:
        colorspace = model.config.colorspace if model is not None else Colorspace.YCBCR
    pixels = to_bytes(convert_colorspace(img, colorspace))
    return encode_bytes(pixels, quality, model, colorspace, trace)


def _registry(models) -> dict[bytes, BlockCNN]:
    if models is None:
        return {}
    if isinstance(models, Mapping):
        return dict(models)
    if isinstance(models, BlockCNN):
        models = [models]
    return {m.model_id: m for m in models}


def decode_bytes(
    data: bytes,
    models: Mapping[bytes, BlockCNN] | Iterable[BlockCNN] | BlockCNN | None = None,
    trace: Trace | None = None,
) -> tuple[ContainerHeader, np.ndarray]:
    """Decode to uint8 planes in the container's colorspace (cropped)."""
    header = ContainerHeader.unpack(data)
    model = None
    if header.predictor:
        model = _registry(models).get(header.model_id)
        if model is None:
            raise ModelMissingError(f"no model with id {header.model_id.hex()}")
        _check_model(model, header.colorspace)
    nbx, nby = block_grid_shape(header.width, header.height)
    coeffs = decode_scan(BitReader(data[HEADER_SIZE:]), nbx * nby).reshape(nby, nbx, 3, BLOCK, BLOCK)
    tables = quant_tables_for_channels(header.quality)

    def step(bx, by, prediction):
        return reconstruct_blocks(coeffs[by, bx], prediction.astype(np.float64), tables)

    recon = _run_predictive(model, nbx, nby, step, trace)
    grid = split_blocks(recon.pixels())
    return header, assemble_blocks(grid, header.width, header.height)


def decode_image(data: bytes, models=None, trace: Trace | None = None) -> RasterImage:
    header, pixels = decode_bytes(data, models, trace)
    return convert_colorspace(from_bytes(pixels, header.colorspace), Colorspace.RGB)
