import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockcnn.errors import BoundsError, ColorspaceError, DimensionError, ParseError
from blockcnn.image import (
    Colorspace,
    RasterImage,
    all_contexts,
    assemble_blocks,
    convert_colorspace,
    extract_context,
    from_bytes,
    load_ppm,
    pad_bytes,
    pad_to_block_multiple,
    save_ppm,
    split_blocks,
    to_bytes,
)


def ppm(width, height, payload: bytes) -> bytes:
    return b"P6\n%d %d\n255\n" % (width, height) + payload


def test_load_single_red_pixel():
    img = load_ppm(ppm(1, 1, bytes([255, 0, 0])))
    assert (img.width, img.height) == (1, 1)
    assert img.colorspace is Colorspace.RGB
    np.testing.assert_array_equal(img.planes[:, 0, 0], [1.0, 0.0, 0.0])


def test_load_zero_image():
    img = load_ppm(ppm(2, 2, bytes(12)))
    assert not img.planes.any()


def test_load_rejects_p5():
    with pytest.raises(ParseError) as err:
        load_ppm(b"P5\n1 1\n255\n\x00")
    assert err.value.offset == 0


def test_load_rejects_maxval_and_truncation():
    with pytest.raises(ParseError):
        load_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ParseError) as err:
        load_ppm(ppm(2, 2, bytes(5)))
    assert "truncated" in str(err.value)


def test_load_accepts_header_comments():
    img = load_ppm(b"P6\n# made by hand\n1 1\n255\n\x10\x20\x30")
    np.testing.assert_allclose(img.planes[:, 0, 0], np.array([16, 32, 48]) / 255, rtol=1e-6)


def test_save_white_pixel():
    img = RasterImage(np.ones((3, 1, 1)))
    assert save_ppm(img).endswith(bytes([255, 255, 255]))


def test_save_rejects_lab():
    with pytest.raises(ColorspaceError):
        save_ppm(RasterImage(np.zeros((3, 2, 2)), Colorspace.LAB))


def test_ppm_corpus_roundtrip_is_byte_identical():
    rng = np.random.default_rng(7)
    for _ in range(25):
        w, h = rng.integers(1, 40, size=2)
        data = ppm(w, h, rng.integers(0, 256, size=w * h * 3, dtype=np.uint8).tobytes())
        assert save_ppm(load_ppm(data)) == data


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 4, 5), elements=st.floats(0, 1, width=32)))
def test_save_load_within_one_step(planes):
    img = RasterImage(planes)
    back = load_ppm(save_ppm(img))
    assert np.abs(back.planes - img.planes).max() <= 0.5 / 255 + 1e-6


def test_gray_to_ycbcr_is_neutral():
    img = RasterImage(np.full((3, 1, 1), 0.5))
    np.testing.assert_allclose(convert_colorspace(img, Colorspace.YCBCR).planes[:, 0, 0], [0.5, 0.5, 0.5], atol=1e-6)


def test_white_to_lab_is_reference_white():
    lab = convert_colorspace(RasterImage(np.ones((3, 1, 1))), Colorspace.LAB)
    np.testing.assert_allclose(lab.planes[:, 0, 0], [1.0, 0.0, 0.0], atol=1e-4)


@pytest.mark.parametrize("target", [Colorspace.YCBCR, Colorspace.LAB])
def test_colorspace_roundtrip_million_pixels(target):
    rng = np.random.default_rng(3)
    img = RasterImage(rng.random((3, 1000, 1000), dtype=np.float32))
    back = convert_colorspace(convert_colorspace(img, target), Colorspace.RGB)
    assert np.abs(back.planes - img.planes).max() < 2 / 255


def test_lab_planes_respect_ranges():
    rng = np.random.default_rng(4)
    lab = convert_colorspace(RasterImage(rng.random((3, 64, 64))), Colorspace.LAB)
    assert lab.planes[0].min() >= 0 and lab.planes[0].max() <= 1
    assert np.abs(lab.planes[1:]).max() <= 1


@pytest.mark.parametrize("cs", [Colorspace.RGB, Colorspace.YCBCR, Colorspace.LAB])
def test_byte_interchange_is_exact(cs):
    b = np.arange(256, dtype=np.uint8).repeat(3).reshape(3, 16, 16)
    np.testing.assert_array_equal(to_bytes(from_bytes(b, cs)), b)


def test_interior_context_is_raw_crop():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (3, 40, 48), dtype=np.uint8)
    ctx = extract_context(px, 2, 2)
    np.testing.assert_array_equal(ctx.samples, px[:, 8:32, 8:32])
    np.testing.assert_array_equal(ctx.center, px[:, 16:24, 16:24])


def test_corner_context_replicates_edges():
    rng = np.random.default_rng(1)
    px = rng.integers(0, 256, (3, 16, 16), dtype=np.uint8)
    s = extract_context(px, 0, 0).samples
    for y in range(8):
        np.testing.assert_array_equal(s[:, y, 8:], s[:, 8, 8:])
    for x in range(8):
        np.testing.assert_array_equal(s[:, :, x], s[:, :, 8])
    np.testing.assert_array_equal(s[:, :8, :8], np.broadcast_to(px[:, :1, :1], (3, 8, 8)))


def test_single_block_context_is_all_replication():
    rng = np.random.default_rng(2)
    px = rng.integers(0, 256, (3, 8, 8), dtype=np.uint8)
    s = extract_context(px, 0, 0).samples
    ys = np.clip(np.arange(-8, 16), 0, 7)
    np.testing.assert_array_equal(s, px[:, ys[:, None], ys[None, :]])


def test_context_out_of_range():
    px = np.zeros((3, 16, 16), dtype=np.uint8)
    with pytest.raises(BoundsError):
        extract_context(px, 2, 0)
    with pytest.raises(BoundsError):
        extract_context(px, 0, -1)


def test_all_contexts_match_single_extraction():
    rng = np.random.default_rng(5)
    px = rng.integers(0, 256, (3, 24, 32), dtype=np.uint8)
    grid = all_contexts(px)
    for by in range(3):
        for bx in range(4):
            np.testing.assert_array_equal(grid[by, bx], extract_context(px, bx, by).samples)


def test_padding_sizes():
    assert pad_to_block_multiple(RasterImage(np.zeros((3, 16, 16)))).planes.shape == (3, 16, 16)
    assert pad_to_block_multiple(RasterImage(np.zeros((3, 9, 17)))).planes.shape == (3, 16, 24)
    one = pad_to_block_multiple(RasterImage(np.full((3, 1, 1), 0.25)))
    assert one.planes.shape == (3, 8, 8) and np.all(one.planes == 0.25)


def test_padding_copies_last_column():
    rng = np.random.default_rng(6)
    img = RasterImage(rng.random((3, 9, 17), dtype=np.float32))
    out = pad_to_block_multiple(img).planes
    for x in range(17, 24):
        np.testing.assert_array_equal(out[:, :9, x], img.planes[:, :, 16])


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 8), (9, 17), (13, 2)])
def test_padded_samples_equal_nearest_sample(h, w):
    # exhaustive check of the edge-replication rule
    px = np.arange(3 * h * w, dtype=np.int64).reshape(3, h, w) % 251
    padded = pad_bytes(px.astype(np.uint8))
    for y in range(padded.shape[1]):
        for x in range(padded.shape[2]):
            assert (padded[:, y, x] == px[:, min(y, h - 1), min(x, w - 1)]).all()


def test_split_assemble_inverse():
    rng = np.random.default_rng(8)
    px = rng.integers(0, 256, (3, 32, 24), dtype=np.uint8)
    np.testing.assert_array_equal(assemble_blocks(split_blocks(px), 24, 32), px)


def test_assemble_constant_block():
    blocks = np.full((1, 1, 3, 8, 8), 77, dtype=np.uint8)
    assert np.all(assemble_blocks(blocks, 8, 8) == 77)


def test_assemble_crops_padded_image():
    rng = np.random.default_rng(9)
    px = rng.integers(0, 256, (3, 9, 17), dtype=np.uint8)
    np.testing.assert_array_equal(assemble_blocks(split_blocks(pad_bytes(px)), 17, 9), px)


def test_assemble_grid_mismatch():
    with pytest.raises(DimensionError):
        assemble_blocks(np.zeros((1, 2, 3, 8, 8), dtype=np.uint8), 17, 9)


def test_raster_image_validation():
    with pytest.raises(DimensionError):
        RasterImage(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        RasterImage(np.full((3, 1, 1), np.nan))
