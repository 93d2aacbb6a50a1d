"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation. Diagnostics go to stderr; stdout only receives the
paths of files written.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import codec, evaluate
from .enhance import enhance_bytes
from .errors import BlockCNNError, ConfigurationError, DataError, ParameterError, StateError, TrainingError
from .image import Colorspace, convert_colorspace, from_bytes, load_ppm, save_ppm, to_bytes
from .model import BlockCNN, Variant
from .train import TrainConfig, load_corpus, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("blockcnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _colorspace(text: str) -> Colorspace:
    try:
        return {"ycbcr": Colorspace.YCBCR, "lab": Colorspace.LAB}[text.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"colorspace must be ycbcr or lab, not {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _modes(text: str) -> list[evaluate.Mode]:
    try:
        return [evaluate.Mode.parse(v) for v in text.split(",") if v.strip()]
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockcnn", description="BlockCNN predictive block codec and artifact removal")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: $BLOCKCNN_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compress", help="encode a PPM into a .bcn container")
    c.add_argument("--in", dest="inp", required=True, type=Path)
    c.add_argument("--out", required=True, type=Path)
    c.add_argument("--quality", required=True, type=int)
    c.add_argument("--model", type=Path, help="PRED checkpoint; omit for plain JPEG coding")
    c.add_argument("--colorspace", type=_colorspace, default=None)

    d = sub.add_parser("decompress", help="decode a .bcn container to PPM")
    d.add_argument("--in", dest="inp", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)
    d.add_argument("--model-dir", type=Path, help="directory searched for *.bckp checkpoints")
    d.add_argument("--model", type=Path, action="append", default=[], help="extra checkpoint (repeatable)")

    e = sub.add_parser("enhance", help="remove JPEG artifacts from a decoded PPM")
    e.add_argument("--in", dest="inp", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--quality", required=True, type=int, help="quality the image was coded at")

    t = sub.add_parser("train", help="train an AR or PRED model")
    t.add_argument("--variant", required=True, choices=["ar", "pred"])
    t.add_argument("--corpus", required=True, type=Path)
    t.add_argument("--quality", required=True, type=int)
    t.add_argument("--iters", required=True, type=int)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--channels", type=int, default=64)
    t.add_argument("--res-blocks", type=int, default=9)
    t.add_argument("--colorspace", type=_colorspace, default=Colorspace.YCBCR)
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--log", type=Path, help="CSV training log (default: <out>.log.csv)")

    v = sub.add_parser("eval", help="rate-distortion sweep")
    v.add_argument("--corpus", required=True, type=Path)
    v.add_argument("--qualities", required=True, type=_int_list)
    v.add_argument("--modes", required=True, type=_modes)
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--ar", type=Path, help="AR checkpoint (JPEG+AR, BCNN+AR)")
    v.add_argument("--pred", type=Path, help="PRED checkpoint (BCNN, BCNN+AR)")
    v.add_argument("--colorspace", type=_colorspace, default=Colorspace.YCBCR)

    s = sub.add_parser("stats", help="per-position JPEG error grid")
    s.add_argument("--corpus", required=True, type=Path)
    s.add_argument("--quality", required=True, type=int)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--pgm", type=Path, help="also write a heat-map PGM")
    s.add_argument("--colorspace", type=_colorspace, default=Colorspace.YCBCR)
    return p


def _load_model(path: Path) -> BlockCNN:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return BlockCNN.from_bytes(data)


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)
    print(path)


def _cmd_compress(args) -> None:
    img = load_ppm(_read(args.inp))
    model = _load_model(args.model) if args.model else None
    _write(args.out, codec.encode_image(img, args.quality, model, args.colorspace))


def _cmd_decompress(args) -> None:
    paths = list(args.model)
    if args.model_dir is not None:
        if not args.model_dir.is_dir():
            raise DataError(f"model directory {args.model_dir} does not exist")
        paths += sorted(args.model_dir.glob("*.bckp"))
    models = [_load_model(p) for p in paths]
    img = codec.decode_image(_read(args.inp), models)
    _write(args.out, save_ppm(img))


def _cmd_enhance(args) -> None:
    if not 1 <= args.quality <= 100:
        raise ParameterError(f"quality {args.quality} out of range")
    model = _load_model(args.model)
    if model.config.variant is not Variant.AR:
        raise ConfigurationError("--model must be an AR checkpoint")
    cs = model.config.colorspace
    pixels = to_bytes(convert_colorspace(load_ppm(_read(args.inp)), cs))
    out = convert_colorspace(from_bytes(enhance_bytes(pixels, model), cs), Colorspace.RGB)
    _write(args.out, save_ppm(out))


def _cmd_train(args) -> None:
    config = TrainConfig(
        variant=Variant[args.variant.upper()],
        corpus=args.corpus,
        quality=args.quality,
        iterations=args.iters,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        channels=args.channels,
        n_res_blocks=args.res_blocks,
        colorspace=args.colorspace,
        checkpoint_path=args.out,
    )
    result = train(config)
    _write(args.out, result.checkpoint)
    _write(args.log or args.out.with_suffix(".log.csv"), result.log_csv())


def _cmd_eval(args, workers: int) -> None:
    ar = _load_model(args.ar) if args.ar else None
    pred = _load_model(args.pred) if args.pred else None
    # fail on a missing model before any image is read
    evaluate._check_models(args.modes, ar, pred, args.colorspace)
    images = evaluate.load_images(args.corpus)
    records = evaluate.rd_sweep(images, args.qualities, args.modes, ar, pred, args.colorspace, workers)
    _write(args.out, evaluate.records_to_csv(records))


def _cmd_stats(args) -> None:
    images = [im.clean[:, : im.height, : im.width] for im in load_corpus(args.corpus, args.colorspace)]
    grid = evaluate.block_position_mse(images, args.quality)
    _write(args.out, evaluate.grid_to_csv(grid))
    if args.pgm is not None:
        _write(args.pgm, evaluate.grid_to_pgm(grid))


def _workers(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("BLOCKCNN_THREADS", "1"))
        except ValueError:
            raise UsageError("BLOCKCNN_THREADS must be an integer") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        workers = _workers(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    handlers = {
        "compress": _cmd_compress,
        "decompress": _cmd_decompress,
        "enhance": _cmd_enhance,
        "train": _cmd_train,
        "stats": _cmd_stats,
    }
    try:
        # BLAS stays single threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            if args.command == "eval":
                _cmd_eval(args, workers)
            else:
                handlers[args.command](args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"blockcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateError, TrainingError) as exc:
        print(f"blockcnn {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except BlockCNNError as exc:
        print(f"blockcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"blockcnn {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())
