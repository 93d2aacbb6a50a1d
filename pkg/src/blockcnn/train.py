"""Corpus handling, pair sampling and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, TrainingError
from .image import BLOCK, Colorspace, convert_colorspace, load_ppm, pad_bytes, to_bytes
from .jpeg import jpeg_roundtrip
from .model import MASK_FILL, BlockCNN, ModelConfig, Variant, build_model, mask_contexts, to_network_domain
from .nn import Adam, mse_loss

log = logging.getLogger(__name__)


@dataclass
class CorpusImage:
    name: str
    clean: np.ndarray  # uint8 (3, H, W), block padded, in the model colorspace
    width: int
    height: int
    _degraded: dict = field(default_factory=dict, repr=False)

    @property
    def blocks(self) -> tuple[int, int]:
        return self.clean.shape[2] // BLOCK, self.clean.shape[1] // BLOCK

    def degraded(self, quality: int) -> np.ndarray:
        """Baseline JPEG reconstruction at ``quality`` (cached)."""
        if quality not in self._degraded:
            self._degraded[quality] = jpeg_roundtrip(self.clean, quality)
        return self._degraded[quality]


def load_corpus(path, colorspace: Colorspace = Colorspace.YCBCR) -> list[CorpusImage]:
    """Read every ``*.ppm`` in a directory, sorted by file name."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"corpus directory {path} does not exist")
    images = []
    for f in sorted(path.glob("*.ppm")):
        try:
            img = load_ppm(f.read_bytes())
        except DataError as exc:
            raise DataError(f"{f.name}: {exc}") from exc
        pixels = to_bytes(convert_colorspace(img, colorspace))
        images.append(CorpusImage(f.stem, pad_bytes(pixels), img.width, img.height))
    if not images:
        raise DataError(f"no .ppm images in {path}")
    return images


@dataclass
class TrainConfig:
    variant: Variant = Variant.AR
    corpus: str | Path = "."
    quality: int = 20
    iterations: int = 120_000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500
    val_fraction: float = 0.1
    val_pairs: int = 512
    channels: int = 64
    n_res_blocks: int = 9
    colorspace: Colorspace = Colorspace.YCBCR
    checkpoint_path: str | Path | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 for batch normalization")
        if not 0 < self.val_fraction < 1:
            raise ParameterError("val_fraction must be in (0, 1)")
        if not 1 <= self.quality <= 100:
            raise ParameterError(f"quality {self.quality} out of range")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.variant, self.channels, self.n_res_blocks, self.colorspace, self.seed)


def split_corpus(images: list[CorpusImage], val_fraction: float, seed: int):
    """Image-level train/validation split."""
    if len(images) < 2:
        raise DataError("need at least two images to split into train and validation")
    order = np.random.default_rng(seed).permutation(len(images))
    n_val = min(len(images) - 1, max(1, int(round(val_fraction * len(images)))))
    val = [images[i] for i in sorted(order[:n_val])]
    train = [images[i] for i in sorted(order[n_val:])]
    return train, val


def sample_pairs(
    images: list[CorpusImage],
    quality: int,
    variant: Variant,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` (context, target) pairs uniformly over all blocks.

    Returns uint8 arrays (count, 3, 24, 24) and (count, 3, 8, 8).
    """
    if not images:
        raise DataError("empty corpus")
    sizes = np.array([bx * by for bx, by in (im.blocks for im in images)])
    if sizes.sum() == 0:
        raise DataError("corpus images are too small for a single block")
    picks = rng.integers(0, sizes.sum(), size=count)
    which = np.searchsorted(np.cumsum(sizes), picks, side="right")
    local = picks - np.concatenate([[0], np.cumsum(sizes)[:-1]])[which]
    contexts = np.empty((count, 3, 3 * BLOCK, 3 * BLOCK), dtype=np.uint8)
    targets = np.empty((count, 3, BLOCK, BLOCK), dtype=np.uint8)
    padded = {}
    for i, (k, pos) in enumerate(zip(which.tolist(), local.tolist())):
        im = images[k]
        nbx = im.blocks[0]
        by, bx = divmod(pos, nbx)
        if k not in padded:
            deg = im.degraded(quality)
            if variant is Variant.AR:
                padded[k] = np.pad(deg, ((0, 0), (BLOCK, BLOCK), (BLOCK, BLOCK)), mode="edge")
            else:
                padded[k] = np.pad(deg, ((0, 0), (BLOCK, BLOCK), (BLOCK, BLOCK)), constant_values=MASK_FILL)
        y, x = by * BLOCK, bx * BLOCK
        contexts[i] = padded[k][:, y : y + 3 * BLOCK, x : x + 3 * BLOCK]
        targets[i] = im.clean[:, y : y + BLOCK, x : x + BLOCK]
    if variant is Variant.PRED:
        contexts = mask_contexts(contexts)
    return contexts, targets


def network_prediction(model: BlockCNN, contexts_nd: np.ndarray, train: bool) -> np.ndarray:
    """Forward pass in the network domain, including the AR skip."""
    out = model.forward(contexts_nd, train=train, record=train)
    if model.config.variant is Variant.AR:
        out = out + contexts_nd[:, :, BLOCK : 2 * BLOCK, BLOCK : 2 * BLOCK]
    return out


def evaluate_mse(model: BlockCNN, contexts: np.ndarray, targets: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(contexts), chunk):
        pred = network_prediction(model, to_network_domain(contexts[s : s + chunk]), train=False)
        diff = pred.astype(np.float64) - to_network_domain(targets[s : s + chunk])
        total += float(np.sum(diff**2))
    return total / (targets.size)


@dataclass
class TrainResult:
    model: BlockCNN
    checkpoint: bytes
    log: list[dict]
    train_images: list[str]
    val_images: list[str]

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["step", "train_mse", "val_mse", "wallclock"], lineterminator="\n")
        writer.writeheader()
        for row in self.log:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def train(config: TrainConfig, images: list[CorpusImage] | None = None) -> TrainResult:
    """Train one model; ``images`` overrides loading ``config.corpus``."""
    if images is None:
        images = load_corpus(config.corpus, config.colorspace)
    train_set, val_set = split_corpus(images, config.val_fraction, config.seed)
    model = build_model(config.model_config())
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    trainable = model.net.trainable_names()

    rng = np.random.default_rng(config.seed)
    val_ctx, val_tgt = sample_pairs(
        val_set, config.quality, config.variant, config.val_pairs, np.random.default_rng(config.seed + 1)
    )
    rows = [{"step": 0, "train_mse": float("nan"), "val_mse": evaluate_mse(model, val_ctx, val_tgt), "wallclock": 0.0}]
    start = time.perf_counter()
    window = []
    for step in range(1, config.iterations + 1):
        ctx, tgt = sample_pairs(train_set, config.quality, config.variant, config.batch_size, rng)
        pred = network_prediction(model, to_network_domain(ctx), train=True)
        loss, grad = mse_loss(pred, to_network_domain(tgt))
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} at step {step} (lr={config.lr})")
        model.backward(grad)
        opt.step(model.params, {k: model.net.grads[k] for k in trainable})
        window.append(loss)
        if step % config.checkpoint_every == 0 or step == config.iterations:
            row = {
                "step": step,
                "train_mse": float(np.mean(window)),
                "val_mse": evaluate_mse(model, val_ctx, val_tgt),
                "wallclock": round(time.perf_counter() - start, 3),
            }
            rows.append(row)
            window = []
            log.info("step %d train_mse %.6f val_mse %.6f", step, row["train_mse"], row["val_mse"])
            if config.checkpoint_path is not None:
                Path(config.checkpoint_path).write_bytes(model.to_bytes())
    return TrainResult(
        model,
        model.to_bytes(),
        rows,
        [im.name for im in train_set],
        [im.name for im in val_set],
    )
