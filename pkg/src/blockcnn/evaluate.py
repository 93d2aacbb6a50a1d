"""Quality metrics, rate measurement and rate-distortion sweeps."""

from __future__ import annotations

import csv
import enum
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.metrics import structural_similarity

from .codec import decode_bytes, encode_image
from .enhance import enhance_bytes
from .errors import ConfigurationError, DataError, DimensionError
from .image import BLOCK, Colorspace, RasterImage, convert_colorspace, from_bytes, load_ppm, to_bytes
from .jpeg import jpeg_roundtrip
from .model import BlockCNN, Variant

PSNR_CAP = 99.0
SSIM_WINDOW = 11


class Mode(enum.Enum):
    JPEG = "JPEG"
    JPEG_AR = "JPEG+AR"
    BCNN = "BCNN"
    BCNN_AR = "BCNN+AR"

    @classmethod
    def parse(cls, text: str) -> Mode:
        for mode in cls:
            if mode.value.lower() == text.strip().lower():
                return mode
        raise ConfigurationError(f"unknown mode {text!r}; expected one of {[m.value for m in cls]}")

    @property
    def predictive(self) -> bool:
        return self in (Mode.BCNN, Mode.BCNN_AR)

    @property
    def enhanced(self) -> bool:
        return self in (Mode.JPEG_AR, Mode.BCNN_AR)


@dataclass(frozen=True)
class MetricsRecord:
    image: str
    quality: int
    mode: Mode
    bpp: float
    psnr: float
    ssim: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim out of range: {self.ssim}")


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all samples on the 0-255 scale, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0**2 / mse)))


def luma(rgb: np.ndarray) -> np.ndarray:
    """JFIF luma (float, 0-255) of uint8 RGB planes; 2-D input passes through."""
    x = np.asarray(rgb, dtype=np.float64)
    if x.ndim == 2:
        return x
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM of the luma channel: 11x11 Gaussian window (sigma 1.5), valid positions only."""
    ya, yb = luma(a), luma(b)
    if ya.shape != yb.shape:
        raise DimensionError(f"ssim: shapes {ya.shape} and {yb.shape} differ")
    if min(ya.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(
        structural_similarity(
            ya,
            yb,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255.0,
            K1=0.01,
            K2=0.03,
        )
    )


def bpp(n_bytes: int, width: int, height: int) -> float:
    if width < 1 or height < 1:
        raise DimensionError("bpp needs positive dimensions")
    return n_bytes * 8 / (width * height)


# ---------------------------------------------------------------------------
# artifact position statistic


class BlockPositionStats:
    """Running per-position squared-error sums over 8x8 block positions."""

    def __init__(self):
        self.sums = np.zeros((BLOCK, BLOCK))
        self.counts = np.zeros((BLOCK, BLOCK), dtype=np.int64)

    def add(self, clean: np.ndarray, degraded: np.ndarray) -> None:
        err = (np.asarray(clean, dtype=np.float64) - np.asarray(degraded, dtype=np.float64)) ** 2
        h, w = err.shape
        ys = np.arange(h) % BLOCK
        xs = np.arange(w) % BLOCK
        np.add.at(self.sums, (ys[:, None], xs[None, :]), err)
        np.add.at(self.counts, (ys[:, None], xs[None, :]), 1)

    def merge(self, other: BlockPositionStats) -> BlockPositionStats:
        out = BlockPositionStats()
        out.sums = self.sums + other.sums
        out.counts = self.counts + other.counts
        return out

    @property
    def blocks(self) -> int:
        return int(self.counts[0, 0])

    def grid(self) -> np.ndarray:
        if self.counts.min() == 0:
            raise DataError("no blocks accumulated")
        return self.sums / self.counts


def block_position_stats(images: list[np.ndarray], quality: int) -> BlockPositionStats:
    """Luma squared error per within-block position after a JPEG round trip.

    ``images`` are uint8 planes (3, H, W) already in the codec colorspace.
    """
    if not images:
        raise DataError("empty corpus")
    stats = BlockPositionStats()
    for pixels in images:
        decoded = jpeg_roundtrip(pixels, quality)
        stats.add(pixels[0], decoded[0])
    return stats


def block_position_mse(images: list[np.ndarray], quality: int) -> np.ndarray:
    return block_position_stats(images, quality).grid()


BORDER_MASK = np.ones((BLOCK, BLOCK), dtype=bool)
BORDER_MASK[1:-1, 1:-1] = False
CENTER_MASK = np.zeros((BLOCK, BLOCK), dtype=bool)
CENTER_MASK[3:5, 3:5] = True


def border_center_means(grid: np.ndarray) -> tuple[float, float]:
    """Mean MSE of the 28 border positions and of the 4 centre positions."""
    return float(grid[BORDER_MASK].mean()), float(grid[CENTER_MASK].mean())


def grid_to_csv(grid: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)


def grid_to_pgm(grid: np.ndarray, scale: int = 16) -> bytes:
    """Binary PGM heat map of the grid, each cell ``scale`` pixels wide."""
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    norm = np.zeros_like(g) if span == 0 else (g - g.min()) / span
    img = np.kron(np.floor(norm * 255 + 0.5), np.ones((scale, scale))).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes()


# ---------------------------------------------------------------------------
# rate-distortion sweep


def load_images(path) -> list[tuple[str, RasterImage]]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"corpus directory {path} does not exist")
    out = []
    for f in sorted(path.glob("*.ppm")):
        try:
            out.append((f.stem, load_ppm(f.read_bytes())))
        except DataError as exc:
            raise DataError(f"{f.name}: {exc}") from exc
    if not out:
        raise DataError(f"no .ppm images in {path}")
    return out


def _rgb_bytes(pixels: np.ndarray, colorspace: Colorspace) -> np.ndarray:
    return to_bytes(convert_colorspace(from_bytes(pixels, colorspace), Colorspace.RGB))


def _check_models(modes, ar_model, pred_model, colorspace):
    for mode in modes:
        if mode.predictive and pred_model is None:
            raise ConfigurationError(f"mode {mode.value} needs a PRED model (--pred)")
        if mode.enhanced and ar_model is None:
            raise ConfigurationError(f"mode {mode.value} needs an AR model (--ar)")
    for model, variant in ((ar_model, Variant.AR), (pred_model, Variant.PRED)):
        if model is None:
            continue
        if model.config.variant is not variant:
            raise ConfigurationError(f"expected a {variant.name} model, got {model.config.variant.name}")
        if model.config.colorspace is not colorspace:
            raise ConfigurationError(
                f"{variant.name} model works in {model.config.colorspace.name}, sweep uses {colorspace.name}"
            )


def evaluate_image(
    name: str,
    img: RasterImage,
    quality: int,
    modes: list[Mode],
    ar_model: BlockCNN | None = None,
    pred_model: BlockCNN | None = None,
    colorspace: Colorspace = Colorspace.YCBCR,
) -> list[MetricsRecord]:
    reference = to_bytes(img)
    records = []
    streams = {}
    for predictive in (False, True):
        wanted = [m for m in modes if m.predictive == predictive]
        if not wanted:
            continue
        model = pred_model if predictive else None
        data = encode_image(img, quality, model, colorspace)
        _, decoded = decode_bytes(data, model)
        streams[predictive] = (len(data), decoded)
    for mode in modes:
        n_bytes, decoded = streams[mode.predictive]
        if mode.enhanced:
            decoded = enhance_bytes(decoded, ar_model)
        out = _rgb_bytes(decoded, colorspace)
        records.append(
            MetricsRecord(
                name,
                quality,
                mode,
                bpp(n_bytes, img.width, img.height),
                psnr(reference, out),
                ssim(reference, out),
            )
        )
    return records


def _evaluate_cell(args):
    return evaluate_image(*args)


def rd_sweep(
    images: list[tuple[str, RasterImage]],
    qualities: list[int],
    modes: list[Mode],
    ar_model: BlockCNN | None = None,
    pred_model: BlockCNN | None = None,
    colorspace: Colorspace = Colorspace.YCBCR,
    workers: int = 1,
) -> list[MetricsRecord]:
    """Evaluate every (image, quality, mode) cell.

    Records come back ordered by image, then quality, then mode as given,
    whatever the worker count.
    """
    _check_models(modes, ar_model, pred_model, colorspace)
    cells = [
        (name, img, q, list(modes), ar_model, pred_model, colorspace) for name, img in images for q in qualities
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_cell, cells))
    else:
        results = [_evaluate_cell(c) for c in cells]
    return [r for batch in results for r in batch]


CSV_COLUMNS = ["image", "quality", "mode", "bpp", "psnr", "ssim"]


def records_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([r.image, r.quality, r.mode.value, repr(r.bpp), repr(r.psnr), repr(r.ssim)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_COLUMNS:
        raise DataError(f"unexpected CSV header {header}")
    return [
        MetricsRecord(row[0], int(row[1]), Mode.parse(row[2]), float(row[3]), float(row[4]), float(row[5]))
        for row in reader
    ]


def rd_curve(records: list[MetricsRecord], mode: Mode) -> list[tuple[int, float, float, float]]:
    """Corpus means per quality: (quality, bpp, psnr, ssim), sorted by quality."""
    by_q: dict[int, list[MetricsRecord]] = {}
    for r in records:
        if r.mode is mode:
            by_q.setdefault(r.quality, []).append(r)
    return [
        (q, float(np.mean([r.bpp for r in rs])), float(np.mean([r.psnr for r in rs])), float(np.mean([r.ssim for r in rs])))
        for q, rs in sorted(by_q.items())
    ]


def metric_at_bpp(records: list[MetricsRecord], mode: Mode, target_bpp: float, metric: str = "psnr") -> float:
    """Linearly interpolate a corpus-mean metric at ``target_bpp``."""
    curve = rd_curve(records, mode)
    col = {"psnr": 2, "ssim": 3}[metric]
    pts = sorted((c[1], c[col]) for c in curve)
    xs = [p[0] for p in pts]
    if not xs or not xs[0] <= target_bpp <= xs[-1]:
        raise ValueError(f"{mode.value}: bpp {target_bpp} outside the measured range {xs[:1]}..{xs[-1:]}")
    return float(np.interp(target_bpp, xs, [p[1] for p in pts]))
