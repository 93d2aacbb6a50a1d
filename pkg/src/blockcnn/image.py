"""Planar float images, PPM I/O, colorspace transforms and block helpers."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np
from skimage import color as skcolor

from .errors import BoundsError, ColorspaceError, DimensionError, ParseError

BLOCK = 8


class Colorspace(enum.Enum):
    RGB = "rgb"
    YCBCR = "ycbcr"
    LAB = "lab"


@dataclass(frozen=True)
class RasterImage:
    """Three float32 planes of shape (3, height, width).

    RGB and YCbCr samples live in [0, 1]. Lab stores L/100 in plane 0 and
    a/128, b/128 in planes 1-2 (range [-1, 1]).
    """

    planes: np.ndarray
    colorspace: Colorspace = Colorspace.RGB

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float32)
        if p.ndim != 3 or p.shape[0] != 3 or p.shape[1] < 1 or p.shape[2] < 1:
            raise DimensionError(f"expected planes of shape (3, H, W), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("image samples must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "planes", p)

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# PPM

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_ppm(data: bytes) -> RasterImage:
    """Parse a binary P6 stream with maxval 255 into an RGB image."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise ParseError("not a binary PPM (expected magic P6)", offset=0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise ParseError(f"missing {name} in header", offset=pos)
        token = m.group(1)
        if not token.isdigit():
            raise ParseError(f"bad {name} {token!r}", offset=m.start(1))
        fields.append(int(token))
        pos = m.end(1)
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", offset=pos)
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", offset=pos)
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ParseError("expected single whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise ParseError(
            f"truncated payload: need {need} bytes, have {len(payload)}",
            offset=pos + len(payload),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return from_bytes(pixels.transpose(2, 0, 1), Colorspace.RGB)


def save_ppm(img: RasterImage) -> bytes:
    if img.colorspace is not Colorspace.RGB:
        raise ColorspaceError(f"PPM output needs RGB, got {img.colorspace.name}")
    pixels = to_bytes(img).transpose(1, 2, 0)
    header = b"P6\n%d %d\n255\n" % (img.width, img.height)
    return header + np.ascontiguousarray(pixels).tobytes()


# ---------------------------------------------------------------------------
# 8-bit interchange


def to_bytes(img: RasterImage) -> np.ndarray:
    """Quantize an image to uint8 planes (3, H, W)."""
    p = img.planes.astype(np.float64)
    if img.colorspace is Colorspace.LAB:
        out = np.empty_like(p)
        out[0] = round_half_away(p[0] * 255.0)
        out[1:] = round_half_away(p[1:] * 128.0) + 128.0
    else:
        out = round_half_away(p * 255.0)
    return np.clip(out, 0, 255).astype(np.uint8)


def from_bytes(planes: np.ndarray, colorspace: Colorspace) -> RasterImage:
    b = np.asarray(planes, dtype=np.float32)
    if colorspace is Colorspace.LAB:
        p = np.empty_like(b)
        p[0] = b[0] / np.float32(255.0)
        p[1:] = (b[1:] - np.float32(128.0)) / np.float32(128.0)
        return RasterImage(p, colorspace)
    return RasterImage(b / np.float32(255.0), colorspace)


# ---------------------------------------------------------------------------
# colorspaces

_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


def _rgb_to(planes: np.ndarray, target: Colorspace) -> np.ndarray:
    if target is Colorspace.RGB:
        return planes
    if target is Colorspace.YCBCR:
        out = np.tensordot(_RGB_TO_YCBCR, planes, axes=1) + _CHROMA_OFFSET[:, None, None]
        return np.clip(out, 0.0, 1.0)
    lab = skcolor.rgb2lab(np.clip(planes, 0.0, 1.0).transpose(1, 2, 0), illuminant="D65")
    out = lab.transpose(2, 0, 1) / np.array([100.0, 128.0, 128.0])[:, None, None]
    out[0] = np.clip(out[0], 0.0, 1.0)
    out[1:] = np.clip(out[1:], -1.0, 1.0)
    return out


def _to_rgb(planes: np.ndarray, source: Colorspace) -> np.ndarray:
    if source is Colorspace.RGB:
        return planes
    if source is Colorspace.YCBCR:
        out = np.tensordot(_YCBCR_TO_RGB, planes - _CHROMA_OFFSET[:, None, None], axes=1)
    else:
        lab = (planes * np.array([100.0, 128.0, 128.0])[:, None, None]).transpose(1, 2, 0)
        out = skcolor.lab2rgb(lab, illuminant="D65").transpose(2, 0, 1)
    return np.clip(out, 0.0, 1.0)


def convert_colorspace(img: RasterImage, target: Colorspace) -> RasterImage:
    if img.colorspace is target:
        return img
    planes = img.planes.astype(np.float64)
    rgb = _to_rgb(planes, img.colorspace)
    return RasterImage(_rgb_to(rgb, target).astype(np.float32), target)


# ---------------------------------------------------------------------------
# blocks and contexts


@dataclass(frozen=True)
class Context24:
    """24x24 uint8 window (3, 24, 24) centred on block (bx, by)."""

    samples: np.ndarray
    bx: int
    by: int

    @property
    def center(self) -> np.ndarray:
        return self.samples[:, BLOCK : 2 * BLOCK, BLOCK : 2 * BLOCK]


def block_grid_shape(width: int, height: int) -> tuple[int, int]:
    """(blocks_x, blocks_y) needed to cover width x height."""
    return -(-width // BLOCK), -(-height // BLOCK)


def extract_context(pixels: np.ndarray, bx: int, by: int) -> Context24:
    """Cut the 24x24 window around block (bx, by) of uint8 planes (3, H, W).

    Pixels outside the image are filled by edge replication.
    """
    _, h, w = pixels.shape
    nbx, nby = block_grid_shape(w, h)
    if not (0 <= bx < nbx and 0 <= by < nby):
        raise BoundsError(f"block ({bx}, {by}) outside {nbx}x{nby} grid")
    x0, y0 = bx * BLOCK - BLOCK, by * BLOCK - BLOCK
    ys = np.clip(np.arange(y0, y0 + 3 * BLOCK), 0, h - 1)
    xs = np.clip(np.arange(x0, x0 + 3 * BLOCK), 0, w - 1)
    return Context24(pixels[:, ys[:, None], xs[None, :]], bx, by)


def all_contexts(pixels: np.ndarray) -> np.ndarray:
    """Contexts for every block of a block-aligned uint8 image.

    Returns an array of shape (blocks_y, blocks_x, 3, 24, 24).
    """
    _, h, w = pixels.shape
    if h % BLOCK or w % BLOCK:
        raise DimensionError("image must be block aligned")
    padded = np.pad(pixels, ((0, 0), (BLOCK, BLOCK), (BLOCK, BLOCK)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3 * BLOCK, 3 * BLOCK), axis=(1, 2))
    win = win[:, ::BLOCK, ::BLOCK]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4))


def pad_to_block_multiple(img: RasterImage) -> RasterImage:
    nbx, nby = block_grid_shape(img.width, img.height)
    pad_w, pad_h = nbx * BLOCK - img.width, nby * BLOCK - img.height
    if pad_w == 0 and pad_h == 0:
        return img
    planes = np.pad(img.planes, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    return RasterImage(planes, img.colorspace)


def pad_bytes(pixels: np.ndarray) -> np.ndarray:
    _, h, w = pixels.shape
    nbx, nby = block_grid_shape(w, h)
    return np.pad(pixels, ((0, 0), (0, nby * BLOCK - h), (0, nbx * BLOCK - w)), mode="edge")


def split_blocks(pixels: np.ndarray) -> np.ndarray:
    """Block-aligned planes (3, H, W) -> grid (blocks_y, blocks_x, 3, 8, 8)."""
    c, h, w = pixels.shape
    if h % BLOCK or w % BLOCK:
        raise DimensionError("image must be block aligned")
    grid = pixels.reshape(c, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return np.ascontiguousarray(grid.transpose(1, 3, 0, 2, 4))


def assemble_blocks(blocks: np.ndarray, width: int, height: int) -> np.ndarray:
    """Inverse of :func:`split_blocks`, cropped to width x height."""
    blocks = np.asarray(blocks)
    nbx, nby = block_grid_shape(width, height)
    if blocks.ndim != 5 or blocks.shape[:2] != (nby, nbx) or blocks.shape[3:] != (BLOCK, BLOCK):
        raise DimensionError(
            f"block grid {blocks.shape[:2]} does not cover {width}x{height} (need {(nby, nbx)})"
        )
    c = blocks.shape[2]
    pixels = blocks.transpose(2, 0, 3, 1, 4).reshape(c, nby * BLOCK, nbx * BLOCK)
    return np.ascontiguousarray(pixels[:, :height, :width])
