"""Baseline JPEG block coding: DCT, quantization, zigzag scan and Huffman coding.

Only the pieces BlockCNN reuses are here. There are no markers, no byte
stuffing and no table segments; the Annex K tables are fixed on both sides.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import BitstreamError, ParameterError
from .image import (
    BLOCK,
    assemble_blocks,
    block_grid_shape,
    pad_bytes,
    round_half_away,
    split_blocks,
)

DC_LIMIT = 2047
AC_LIMIT = 1023


class ChannelClass(enum.Enum):
    LUMA = 0
    CHROMA = 1


def channel_class(channel: int) -> ChannelClass:
    return ChannelClass.LUMA if channel == 0 else ChannelClass.CHROMA


# ---------------------------------------------------------------------------
# DCT


def _dct_matrix() -> np.ndarray:
    m = np.empty((BLOCK, BLOCK))
    for u in range(BLOCK):
        cu = math.sqrt(0.5) if u == 0 else 1.0
        for x in range(BLOCK):
            m[u, x] = 0.5 * cu * math.cos((2 * x + 1) * u * math.pi / 16)
    return m


DCT_MATRIX = _dct_matrix()


def fdct_8x8(block: np.ndarray) -> np.ndarray:
    """Forward 2-D DCT with JPEG scaling (a constant block c gives DC = 8c).

    Works on any array whose last two axes are 8x8.
    """
    x = np.asarray(block, dtype=np.float64)
    return DCT_MATRIX @ x @ DCT_MATRIX.T


def idct_8x8(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    return DCT_MATRIX.T @ c @ DCT_MATRIX


# ---------------------------------------------------------------------------
# quantization

LUMA_BASE = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
).reshape(8, 8)  # fmt: skip

CHROMA_BASE = np.array(
    [
        17, 18, 24, 47, 99, 99, 99, 99,
        18, 21, 26, 66, 99, 99, 99, 99,
        24, 26, 56, 99, 99, 99, 99, 99,
        47, 66, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
    ],
    dtype=np.int64,
).reshape(8, 8)  # fmt: skip


def build_quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """IJG quality scaling of the Annex K tables -> (luma, chroma), 8x8 int."""
    if isinstance(quality, bool) or not isinstance(quality, (int, np.integer)):
        raise ParameterError(f"quality must be an integer, got {quality!r}")
    if not 1 <= quality <= 100:
        raise ParameterError(f"quality must be in 1..100, got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    tables = []
    for base in (LUMA_BASE, CHROMA_BASE):
        tables.append(np.clip((base * scale + 50) // 100, 1, 255))
    return tables[0], tables[1]


def quant_tables_for_channels(quality: int) -> np.ndarray:
    """Per-channel tables stacked as (3, 8, 8): luma then chroma twice."""
    luma, chroma = build_quant_tables(quality)
    return np.stack([luma, chroma, chroma])


def quantize_block(coeffs: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Divide, round half away from zero, clamp DC to +-2047 and AC to +-1023."""
    q = round_half_away(np.asarray(coeffs, dtype=np.float64) / table)
    out = np.clip(q, -AC_LIMIT, AC_LIMIT)
    out[..., 0, 0] = np.clip(q[..., 0, 0], -DC_LIMIT, DC_LIMIT)
    return out.astype(np.int32)


def dequantize_block(cb: np.ndarray, table: np.ndarray) -> np.ndarray:
    return np.asarray(cb, dtype=np.float64) * table


# ---------------------------------------------------------------------------
# zigzag


def _zigzag_order() -> np.ndarray:
    cells = [(r, c) for r in range(BLOCK) for c in range(BLOCK)]
    cells.sort(key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else rc[1]))
    return np.array([r * BLOCK + c for r, c in cells])


# ZIGZAG[k] is the natural (row-major) index scanned at zigzag position k.
ZIGZAG = _zigzag_order()
UNZIGZAG = np.argsort(ZIGZAG)


def zigzag(cb: np.ndarray) -> np.ndarray:
    """Natural-order 8x8 (or 64-vector) -> zigzag-ordered 64-vector."""
    cb = np.asarray(cb)
    if cb.shape[-2:] == (8, 8):
        cb = cb.reshape(*cb.shape[:-2], 64)
    return cb[..., ZIGZAG]


def unzigzag(seq: np.ndarray) -> np.ndarray:
    """Zigzag-ordered 64-vector -> natural-order 8x8."""
    seq = np.asarray(seq)
    return seq[..., UNZIGZAG].reshape(*seq.shape[:-1], 8, 8)


# ---------------------------------------------------------------------------
# Huffman tables (ITU-T T.81 Annex K.3)

_DC_LUMA_BITS = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
_DC_CHROMA_BITS = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
_DC_VALS = list(range(12))

_AC_LUMA_BITS = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D]
_AC_LUMA_VALS = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
]  # fmt: skip

_AC_CHROMA_BITS = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77]
_AC_CHROMA_VALS = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
]  # fmt: skip


def _with_extra_dc_category(bits: list[int], vals: list[int]) -> tuple[list[int], list[int]]:
    # Residual DC differences reach 4094 and need category 12, which Annex K
    # lacks. It gets the next canonical code one bit longer than the longest
    # existing one, so categories 0-11 keep their standard codes.
    longest = max(i for i, n in enumerate(bits) if n) + 1
    bits = list(bits)
    bits[longest] += 1
    return bits, vals + [12]


class HuffmanTable:
    """Canonical Huffman code built from JPEG BITS/HUFFVAL lists."""

    PEEK = 16

    def __init__(self, bits, vals):
        self.codes: dict[int, tuple[int, int]] = {}
        code = 0
        k = 0
        for length in range(1, 17):
            for _ in range(bits[length - 1]):
                self.codes[vals[k]] = (code, length)
                code += 1
                k += 1
            code <<= 1
        # Decoding: a 16-bit window maps to (symbol, length); -1 marks an
        # invalid prefix.
        self.lookup_sym = np.full(1 << self.PEEK, -1, dtype=np.int32)
        self.lookup_len = np.zeros(1 << self.PEEK, dtype=np.int32)
        for sym, (c, n) in self.codes.items():
            lo = c << (self.PEEK - n)
            hi = (c + 1) << (self.PEEK - n)
            self.lookup_sym[lo:hi] = sym
            self.lookup_len[lo:hi] = n
        self.lookup = list(zip(self.lookup_sym.tolist(), self.lookup_len.tolist()))


DC_TABLES = {
    ChannelClass.LUMA: HuffmanTable(*_with_extra_dc_category(_DC_LUMA_BITS, _DC_VALS)),
    ChannelClass.CHROMA: HuffmanTable(*_with_extra_dc_category(_DC_CHROMA_BITS, _DC_VALS)),
}
AC_TABLES = {
    ChannelClass.LUMA: HuffmanTable(_AC_LUMA_BITS, _AC_LUMA_VALS),
    ChannelClass.CHROMA: HuffmanTable(_AC_CHROMA_BITS, _AC_CHROMA_VALS),
}

ZRL = 0xF0
EOB = 0x00


# ---------------------------------------------------------------------------
# bit I/O


class BitWriter:
    """MSB-first bit sink; :meth:`getvalue` pads the last byte with 1-bits."""

    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0

    def write(self, value: int, length: int) -> None:
        if length == 0:
            return
        self._acc = (self._acc << length) | (value & ((1 << length) - 1))
        self._nacc += length
        if self._nacc >= 32:
            extra = self._nacc - 32
            self._buf += (self._acc >> extra).to_bytes(4, "big")
            self._acc &= (1 << extra) - 1
            self._nacc = extra

    @property
    def bit_length(self) -> int:
        return len(self._buf) * 8 + self._nacc

    def getvalue(self) -> bytes:
        out = bytearray(self._buf)
        acc, n = self._acc, self._nacc
        pad = (-n) % 8
        acc = (acc << pad) | ((1 << pad) - 1)
        n += pad
        out += acc.to_bytes(n // 8, "big") if n else b""
        return bytes(out)


class BitReader:
    """MSB-first bit source over a byte string; never reads past the end."""

    def __init__(self, data: bytes, start_bit: int = 0):
        self.data = bytes(data) + b"\x00\x00\x00\x00"
        self.nbits = len(data) * 8
        self.pos = start_bit

    def peek(self, n: int) -> int:
        """Next n (<= 25) bits, zero-filled past the end."""
        idx = self.pos >> 3
        chunk = int.from_bytes(self.data[idx : idx + 4], "big")
        return (chunk >> (32 - (self.pos & 7) - n)) & ((1 << n) - 1)

    def skip(self, n: int) -> None:
        if self.pos + n > self.nbits:
            raise BitstreamError("truncated stream", self.pos)
        self.pos += n

    def read(self, n: int) -> int:
        if n == 0:
            return 0
        v = self.peek(n)
        self.skip(n)
        return v

    def read_symbol(self, table: HuffmanTable) -> int:
        sym, n = table.lookup[self.peek(HuffmanTable.PEEK)]
        if sym < 0:
            raise BitstreamError("invalid Huffman code", self.pos)
        self.skip(n)
        return sym


# ---------------------------------------------------------------------------
# entropy coding


def _extend(bits: int, size: int) -> int:
    # T.81 F.2.2.1 EXTEND
    return bits if bits >= (1 << (size - 1)) else bits - (1 << size) + 1


def _encode_zigzag(zz: list[int], dc_pred: int, cls: ChannelClass, out: BitWriter) -> int:
    dc_codes = DC_TABLES[cls].codes
    ac_codes = AC_TABLES[cls].codes
    write = out.write
    dc = zz[0]
    diff = dc - dc_pred
    size = abs(diff).bit_length()
    code, n = dc_codes[size]
    write(code, n)
    if size:
        write(diff if diff > 0 else diff + (1 << size) - 1, size)
    run = 0
    for k in range(1, 64):
        v = zz[k]
        if v == 0:
            run += 1
            continue
        while run > 15:
            code, n = ac_codes[ZRL]
            write(code, n)
            run -= 16
        size = abs(v).bit_length()
        code, n = ac_codes[(run << 4) | size]
        write(code, n)
        write(v if v > 0 else v + (1 << size) - 1, size)
        run = 0
    if run:
        code, n = ac_codes[EOB]
        write(code, n)
    return dc


def entropy_encode_block(cb: np.ndarray, dc_pred: int, cls: ChannelClass, out: BitWriter) -> int:
    """Append one block (natural order, 8x8 or 64) and return the new DC predictor."""
    zz = np.asarray(cb, dtype=np.int64).reshape(64)[ZIGZAG].tolist()
    return _encode_zigzag(zz, int(dc_pred), cls, out)


def _decode_zigzag(reader: BitReader, dc_pred: int, cls: ChannelClass) -> list[int]:
    dc_table = DC_TABLES[cls]
    ac_table = AC_TABLES[cls]
    zz = [0] * 64
    size = reader.read_symbol(dc_table)
    diff = _extend(reader.read(size), size) if size else 0
    zz[0] = dc_pred + diff
    k = 1
    while k < 64:
        start = reader.pos
        rs = reader.read_symbol(ac_table)
        run, size = rs >> 4, rs & 15
        if size == 0:
            if run == 15:
                k += 16
                if k > 64:
                    raise BitstreamError("zero run past end of block", start)
                continue
            break  # EOB
        k += run
        if k > 63:
            raise BitstreamError("coefficient index past end of block", start)
        zz[k] = _extend(reader.read(size), size)
        k += 1
    return zz


def entropy_decode_block(reader: BitReader, dc_pred: int, cls: ChannelClass) -> tuple[np.ndarray, int]:
    zz = _decode_zigzag(reader, int(dc_pred), cls)
    block = np.asarray(zz, dtype=np.int32)[UNZIGZAG].reshape(8, 8)
    return block, zz[0]


def encode_scan(coeffs: np.ndarray, out: BitWriter | None = None) -> BitWriter:
    """Entropy-code a block sequence of shape (n_blocks, channels, 8, 8).

    Blocks go in the given order, channels interleaved inside each block,
    one DC predictor per channel starting at zero.
    """
    out = BitWriter() if out is None else out
    n, nch = coeffs.shape[:2]
    zz_all = coeffs.reshape(n, nch, 64)[..., ZIGZAG].astype(np.int64).tolist()
    classes = [channel_class(c) for c in range(nch)]
    preds = [0] * nch
    for blk in zz_all:
        for c in range(nch):
            preds[c] = _encode_zigzag(blk[c], preds[c], classes[c], out)
    return out


def decode_scan(reader: BitReader, n_blocks: int, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`encode_scan`; returns int32 (n_blocks, channels, 8, 8)."""
    classes = [channel_class(c) for c in range(channels)]
    preds = [0] * channels
    flat = []
    for _ in range(n_blocks):
        for c in range(channels):
            zz = _decode_zigzag(reader, preds[c], classes[c])
            preds[c] = zz[0]
            flat.append(zz)
    arr = np.asarray(flat, dtype=np.int32).reshape(n_blocks, channels, 64)
    return arr[..., UNZIGZAG].reshape(n_blocks, channels, 8, 8)


# ---------------------------------------------------------------------------
# standalone baseline path


def encode_blocks(blocks: np.ndarray, prediction: np.ndarray | float, tables: np.ndarray) -> np.ndarray:
    """Residual transform coding of uint8 blocks (..., 3, 8, 8) against a prediction.

    Returns quantized coefficients. The caller supplies the prediction; with
    a constant 128 this is ordinary level-shifted JPEG.
    """
    residual = np.asarray(blocks, dtype=np.float64) - prediction
    return quantize_block(fdct_8x8(residual), tables)


def reconstruct_blocks(coeffs: np.ndarray, prediction: np.ndarray | float, tables: np.ndarray) -> np.ndarray:
    """Dequantize, inverse transform, add the prediction, clamp and round to uint8."""
    pixels = idct_8x8(dequantize_block(coeffs, tables)) + prediction
    return round_half_away(np.clip(pixels, 0.0, 255.0)).astype(np.uint8)


def baseline_encode(pixels: np.ndarray, quality: int) -> bytes:
    """Baseline JPEG scan of uint8 planes (3, H, W), raster block order."""
    blocks = split_blocks(pad_bytes(pixels))
    nby, nbx = blocks.shape[:2]
    tables = quant_tables_for_channels(quality)
    coeffs = encode_blocks(blocks.reshape(nby * nbx, 3, 8, 8), 128.0, tables)
    return encode_scan(coeffs).getvalue()


def baseline_decode(scan: bytes, width: int, height: int, quality: int) -> np.ndarray:
    nbx, nby = block_grid_shape(width, height)
    coeffs = decode_scan(BitReader(scan), nbx * nby)
    tables = quant_tables_for_channels(quality)
    blocks = reconstruct_blocks(coeffs, 128.0, tables)
    return assemble_blocks(blocks.reshape(nby, nbx, 3, 8, 8), width, height)


def jpeg_roundtrip(pixels: np.ndarray, quality: int) -> np.ndarray:
    """Decoded uint8 planes after baseline coding at ``quality``.

    Skips the Huffman stage, which is lossless, so this equals
    ``baseline_decode(baseline_encode(...))`` at a fraction of the cost.
    """
    _, h, w = pixels.shape
    blocks = split_blocks(pad_bytes(pixels))
    tables = quant_tables_for_channels(quality)
    recon = reconstruct_blocks(encode_blocks(blocks, 128.0, tables), 128.0, tables)
    return assemble_blocks(recon, w, h)
