"""Post-decode artifact removal with an AR model."""

from __future__ import annotations

import numpy as np

from .errors import ModelError
from .image import RasterImage, all_contexts, assemble_blocks, from_bytes, pad_bytes, to_bytes
from .model import BlockCNN, Variant, infer_ar_batch

CHUNK = 256


def enhance_bytes(pixels: np.ndarray, model: BlockCNN, order: np.ndarray | None = None) -> np.ndarray:
    """Restore every block of uint8 planes (3, H, W).

    Contexts are cut from the input only, so blocks are independent;
    ``order`` (a permutation of block indices) just changes the schedule.
    """
    if model.config.variant is not Variant.AR:
        raise ModelError(f"enhancement needs an AR model, got {model.config.variant.name}")
    _, h, w = pixels.shape
    contexts = all_contexts(pad_bytes(pixels))
    nby, nbx = contexts.shape[:2]
    flat = contexts.reshape(nby * nbx, 3, 24, 24)
    out = np.empty((nby * nbx, 3, 8, 8), dtype=np.uint8)
    idx = np.arange(len(flat)) if order is None else np.asarray(order)
    for start in range(0, len(idx), CHUNK):
        sel = idx[start : start + CHUNK]
        out[sel] = infer_ar_batch(model, flat[sel])
    return assemble_blocks(out.reshape(nby, nbx, 3, 8, 8), w, h)


def enhance_image(img: RasterImage, model: BlockCNN) -> RasterImage:
    if model.config.variant is not Variant.AR:
        raise ModelError(f"enhancement needs an AR model, got {model.config.variant.name}")
    if img.colorspace is not model.config.colorspace:
        raise ModelError(
            f"image is {img.colorspace.name} but the model works in {model.config.colorspace.name}"
        )
    return from_bytes(enhance_bytes(to_bytes(img), model), img.colorspace)
