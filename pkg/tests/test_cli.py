import subprocess
import sys

import numpy as np
import pytest

from blockcnn.cli import run
from blockcnn.codec import decode_bytes, encode_bytes
from blockcnn.image import Colorspace, convert_colorspace, from_bytes, load_ppm, save_ppm, to_bytes
from blockcnn.jpeg import jpeg_roundtrip
from blockcnn.model import BlockCNN, ModelConfig, Variant


def write_image(path, h=24, w=32, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w]
    base = 128 + 60 * np.sin(x / 5 + seed) * np.cos(y / 4)
    rgb = np.clip(np.stack([base, 255 - base, base / 2 + 40]) + rng.normal(0, 5, (3, h, w)), 0, 255).round()
    path.write_bytes(save_ppm(from_bytes(rgb.astype(np.uint8), Colorspace.RGB)))
    return path


def small_model(variant, seed=0):
    model = BlockCNN(ModelConfig(variant, channels=8, n_res_blocks=1, seed=seed))
    rng = np.random.default_rng(seed)
    model.params["head.weight"][...] = rng.normal(0, 0.05, model.params["head.weight"].shape)
    return model


@pytest.fixture
def image(tmp_path):
    return write_image(tmp_path / "in.ppm")


def test_compress_decompress_matches_baseline(tmp_path, image, capsys):
    assert run(["compress", "--in", str(image), "--out", str(tmp_path / "a.bcn"), "--quality", "30"]) == 0
    assert run(["decompress", "--in", str(tmp_path / "a.bcn"), "--out", str(tmp_path / "a.ppm")]) == 0
    out = capsys.readouterr().out.split()
    assert out == [str(tmp_path / "a.bcn"), str(tmp_path / "a.ppm")]
    ycc = to_bytes(convert_colorspace(load_ppm(image.read_bytes()), Colorspace.YCBCR))
    expected = convert_colorspace(from_bytes(jpeg_roundtrip(ycc, 30), Colorspace.YCBCR), Colorspace.RGB)
    assert (tmp_path / "a.ppm").read_bytes() == save_ppm(expected)


def test_predictive_roundtrip_with_model_dir(tmp_path, image):
    models = tmp_path / "models"
    models.mkdir()
    pred = small_model(Variant.PRED)
    (models / "pred.bckp").write_bytes(pred.to_bytes())
    (models / "other.bckp").write_bytes(small_model(Variant.PRED, 1).to_bytes())
    bcn, out = tmp_path / "p.bcn", tmp_path / "p.ppm"
    assert run(["compress", "--in", str(image), "--out", str(bcn), "--quality", "40", "--model", str(models / "pred.bckp")]) == 0
    assert run(["decompress", "--in", str(bcn), "--out", str(out), "--model-dir", str(models)]) == 0
    ycc = to_bytes(convert_colorspace(load_ppm(image.read_bytes()), Colorspace.YCBCR))
    _, px = decode_bytes(encode_bytes(ycc, 40, pred), pred)
    assert out.read_bytes() == save_ppm(convert_colorspace(from_bytes(px, Colorspace.YCBCR), Colorspace.RGB))


def test_decompress_without_model_is_data_error(tmp_path, image, capsys):
    (tmp_path / "m.bckp").write_bytes(small_model(Variant.PRED).to_bytes())
    bcn = tmp_path / "p.bcn"
    run(["compress", "--in", str(image), "--out", str(bcn), "--quality", "40", "--model", str(tmp_path / "m.bckp")])
    assert run(["decompress", "--in", str(bcn), "--out", str(tmp_path / "x.ppm")]) == 2
    assert "no model with id" in capsys.readouterr().err


def test_corrupt_input_is_data_error(tmp_path, capsys):
    (tmp_path / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\0")
    assert run(["compress", "--in", str(tmp_path / "bad.ppm"), "--out", str(tmp_path / "o"), "--quality", "20"]) == 2
    assert run(["decompress", "--in", str(tmp_path / "missing.bcn"), "--out", str(tmp_path / "o")]) == 2


def test_eval_without_pred_names_flag(tmp_path, image, capsys):
    code = run(["eval", "--corpus", str(tmp_path), "--qualities", "20", "--modes", "JPEG,BCNN", "--out", str(tmp_path / "r.csv")])
    assert code == 1
    assert "--pred" in capsys.readouterr().err
    assert not (tmp_path / "r.csv").exists()


def test_eval_writes_csv(tmp_path, image):
    (tmp_path / "ar.bckp").write_bytes(small_model(Variant.AR).to_bytes())
    out = tmp_path / "r.csv"
    argv = ["eval", "--corpus", str(tmp_path), "--qualities", "20,50", "--modes", "JPEG,JPEG+AR", "--out", str(out), "--ar", str(tmp_path / "ar.bckp")]
    assert run(argv) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "image,quality,mode,bpp,psnr,ssim" and len(rows) == 1 + 4
    first = out.read_text()
    assert run(["--threads", "2"] + argv) == 0
    assert out.read_text() == first


def test_stats(tmp_path, image):
    out, pgm = tmp_path / "grid.csv", tmp_path / "grid.pgm"
    assert run(["stats", "--corpus", str(tmp_path), "--quality", "20", "--out", str(out), "--pgm", str(pgm)]) == 0
    grid = np.array([[float(v) for v in row.split(",")] for row in out.read_text().splitlines()])
    assert grid.shape == (8, 8) and (grid >= 0).all()
    assert pgm.read_bytes().startswith(b"P5\n128 128\n255\n")


def test_enhance(tmp_path, image):
    ar = tmp_path / "ar.bckp"
    ar.write_bytes(BlockCNN(ModelConfig(Variant.AR, channels=8, n_res_blocks=1)).to_bytes())
    out = tmp_path / "e.ppm"
    assert run(["enhance", "--in", str(image), "--out", str(out), "--model", str(ar), "--quality", "20"]) == 0
    # zero-head AR: the output is the input passed through YCbCr bytes and back
    ycc = to_bytes(convert_colorspace(load_ppm(image.read_bytes()), Colorspace.YCBCR))
    assert out.read_bytes() == save_ppm(convert_colorspace(from_bytes(ycc, Colorspace.YCBCR), Colorspace.RGB))
    pred = tmp_path / "pred.bckp"
    pred.write_bytes(small_model(Variant.PRED).to_bytes())
    assert run(["enhance", "--in", str(image), "--out", str(out), "--model", str(pred), "--quality", "20"]) == 1


def test_train_writes_checkpoint_and_log(tmp_path):
    corpus = tmp_path / "c"
    corpus.mkdir()
    for i in range(3):
        write_image(corpus / f"{i}.ppm", 32, 32, seed=i)
    out = tmp_path / "m.bckp"
    argv = ["train", "--variant", "pred", "--corpus", str(corpus), "--quality", "20", "--iters", "6", "--out", str(out),
            "--batch", "4", "--channels", "8", "--res-blocks", "1", "--checkpoint-every", "3"]
    assert run(argv) == 0
    model = BlockCNN.from_bytes(out.read_bytes())
    assert model.config.variant is Variant.PRED and model.config.channels == 8
    log = (tmp_path / "m.log.csv").read_text().splitlines()
    assert log[0] == "step,train_mse,val_mse,wallclock" and [r.split(",")[0] for r in log[1:]] == ["0", "3", "6"]
    first = out.read_bytes()
    assert run(["--threads", "3"] + argv) == 0
    assert out.read_bytes() == first


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["compress", "--in", "x"], ["--threads", "0", "stats", "--corpus", ".", "--quality", "20", "--out", "o"],
     ["eval", "--corpus", ".", "--qualities", "a", "--modes", "JPEG", "--out", "o"],
     ["eval", "--corpus", ".", "--qualities", "20", "--modes", "PNG", "--out", "o"]],
)
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert capsys.readouterr().err


def test_bad_quality_is_usage_error(tmp_path, image):
    assert run(["compress", "--in", str(image), "--out", str(tmp_path / "o"), "--quality", "0"]) == 1


def test_module_entry_point(tmp_path, image):
    proc = subprocess.run([sys.executable, "-m", "blockcnn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "compress" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "blockcnn", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == ""
