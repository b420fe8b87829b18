import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from bbfcn.errors import FormatError, ParseError
from bbfcn.imageio import (crop_region, crop_with_zero_pad, decode_image, encode_pgm, encode_ppm,
                           format_annotations, parse_annotation_text, parse_annotations, quantize)
from bbfcn.synthetic import SyntheticConfig, generate_synthetic, interocular


def test_ppm_scaling():
    data = b"P6\n2 2\n255\n" + bytes([255, 0, 0] * 4)
    img = decode_image(data)
    assert img.shape == (3, 2, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])


def test_pgm_replicated():
    data = b"P5\n# comment\n3 1\n255\n" + bytes([0, 128, 255])
    img = decode_image(data)
    assert img.shape == (3, 1, 3)
    assert (img[0] == img[1]).all() and (img[1] == img[2]).all()


def test_sixteen_bit_ppm():
    data = b"P6 1 1 65535\n" + bytes([0xFF, 0xFF, 0x00, 0x00, 0x80, 0x00])
    img = decode_image(data)
    np.testing.assert_allclose(img[:, 0, 0], [1.0, 0.0, 0x8000 / 65535], rtol=1e-6)


def test_png_decoding():
    buf = io.BytesIO()
    Image.fromarray(np.array([[[0, 255, 0]]], np.uint8), "RGB").save(buf, "PNG")
    img = decode_image(buf.getvalue())
    np.testing.assert_array_equal(img[:, 0, 0], [0, 1, 0])


def test_truncated_png():
    buf = io.BytesIO()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(buf, "PNG")
    with pytest.raises(FormatError):
        decode_image(buf.getvalue()[:40])


@pytest.mark.parametrize("data", [b"GIF89a....", b"P6\n2 2\n255\n\x00", b"P6\nx 2\n255\n"])
def test_bad_containers(data):
    with pytest.raises(FormatError):
        decode_image(data)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_netpbm_round_trip(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(1, 9, size=2))
    img = quantize(rng.uniform(size=(3, h, w)))
    assert decode_image(encode_ppm(img)).tobytes() == img.tobytes()
    gray = img[0]
    back = decode_image(encode_pgm(gray))
    assert back[0].tobytes() == gray.tobytes()


# ---------------------------------------------------------------- annotations


LINE = "img.png 10 10 50 50 20 20 40 20 30 30 22 40 38 40"


def test_parse_line():
    (face,) = parse_annotation_text(LINE, K=5)
    assert face.box == (10, 10, 50, 50)
    assert face.visible.all()
    np.testing.assert_array_equal(face.points[4], [38, 40])


def test_header_and_invisible():
    text = "#K=2\nimg.png 0 0 10 10 1 2 -1 -1\nb.png 0 0 10 10 1 2 3 −4\n"
    a, b = parse_annotation_text(text)
    assert a.visible.tolist() == [True, False]
    assert b.points[1].tolist() == [3, -4]


def test_wrong_field_count_names_line():
    with pytest.raises(ParseError) as err:
        parse_annotation_text("#K=5\n" + LINE + "\n" + LINE.rsplit(" ", 1)[0])
    assert err.value.line == 3 and "line 3" in str(err.value)


def test_non_numeric_token():
    with pytest.raises(ParseError):
        parse_annotation_text("img.png 0 0 1 1 a b", K=1)


def test_missing_header():
    with pytest.raises(ParseError):
        parse_annotation_text(LINE)


def test_format_parse_round_trip(tmp_path):
    _, faces = generate_synthetic(SyntheticConfig(occlusion_prob=1.0), 3)
    path = tmp_path / "ann.txt"
    path.write_text(format_annotations(faces, 5))
    (back,) = parse_annotations(path)
    assert back.visible.tolist() == faces[0].visible.tolist()
    vis = faces[0].visible
    np.testing.assert_allclose(back.points[vis], faces[0].points[vis], atol=1e-4)


# ---------------------------------------------------------------- cropping


def test_interior_crop_is_subarray():
    src = np.arange(100.0).reshape(10, 10)
    np.testing.assert_array_equal(crop_with_zero_pad(src, (5, 5), 4), src[3:7, 3:7])


def test_corner_crop_padded():
    src = np.ones((3, 30, 30))
    patch = crop_with_zero_pad(src, (0, 0), 24)
    assert not patch[:, :12, :].any() and not patch[:, :, :12].any()
    assert patch[:, 12:, 12:].all()


def test_outside_crop_is_zero():
    assert not crop_with_zero_pad(np.ones((5, 5)), (100, -50), 6).any()


@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(8, 12), st.integers(8, 12), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_crop_translation_consistent(tx, ty, cx, cy, side):
    src = np.random.default_rng(0).standard_normal((24, 24))
    shifted = np.roll(src, (ty, tx), axis=(0, 1))
    np.testing.assert_array_equal(crop_with_zero_pad(shifted, (cx + tx, cy + ty), side),
                                  crop_with_zero_pad(src, (cx, cy), side))


def test_crop_region_partial():
    src = np.arange(16.0).reshape(4, 4)
    out = crop_region(src, -1, 2, 3, 3)
    np.testing.assert_array_equal(out, [[0, 8, 9], [0, 12, 13], [0, 0, 0]])


# ---------------------------------------------------------------- synthetic


def test_synthetic_reproducible():
    cfg = SyntheticConfig(seed=5)
    a, fa = generate_synthetic(cfg, 17)
    b, fb = generate_synthetic(cfg, 17)
    assert a.tobytes() == b.tobytes()
    assert all((x.points == y.points).all() and x.box == y.box for x, y in zip(fa, fb))
    c, _ = generate_synthetic(cfg, 18)
    assert a.tobytes() != c.tobytes()


def test_synthetic_image_contract():
    img, faces = generate_synthetic(SyntheticConfig(), 0)
    assert img.shape == (3, 64, 64) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1
    assert decode_image(encode_ppm(img)).tobytes() == img.tobytes()
    assert 10 < interocular(faces[0]) < 25


def test_synthetic_face_counts_and_boxes():
    cfg = SyntheticConfig(canvas=(96, 96), face_count=(0, 3), face_scale=(20, 30), seed=2)
    counts = []
    for i in range(60):
        _, faces = generate_synthetic(cfg, i)
        counts.append(len(faces))
        for f in faces:
            x, y, w, h = f.box
            pts = f.points[f.visible]
            assert ((pts[:, 0] >= x) & (pts[:, 0] <= x + w) & (pts[:, 1] >= y) & (pts[:, 1] <= y + h)).all()
            assert (pts >= 0).all() and (pts < 96).all()
    assert set(counts) <= {0, 1, 2, 3}


def test_synthetic_face_count_distribution():
    cfg = SyntheticConfig(canvas=(48, 48), face_count=(1, 2), face_scale=(10, 12), distractors=(0, 0), seed=9)
    counts = [len(generate_synthetic(cfg, i)[1]) for i in range(1000)]
    assert set(counts) == {1, 2}
    assert 400 < counts.count(1) < 600


def test_synthetic_bad_config():
    with pytest.raises(ValueError):
        SyntheticConfig(face_count=(2, 1))
    with pytest.raises(ValueError):
        SyntheticConfig(canvas=(32, 32), face_scale=(40, 50))
