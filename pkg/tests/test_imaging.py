import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsdino.errors import DegenerateInputError, ParameterError, ShapeError
from wsdino.imaging import (
    ImagingConfig,
    clip_normalize,
    illumination_correct,
    preprocess,
    resize_bicubic,
)


def direct_gaussian_smooth(image, sigma, truncate=4.0):
    """O(n^2 k^2) direct convolution with half-sample symmetric (reflect) borders."""
    radius = int(truncate * sigma + 0.5)
    offsets = np.arange(-radius, radius + 1)
    w1 = np.exp(-0.5 * (offsets / sigma) ** 2)
    w1 /= w1.sum()
    kernel = np.outer(w1, w1)
    h, w = image.shape

    def reflect(i, n):
        period = 2 * n
        i = i % period
        return i if i < n else period - 1 - i

    out = np.zeros_like(image, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for a, dy in enumerate(offsets):
                for b, dx in enumerate(offsets):
                    acc += kernel[a, b] * image[reflect(y + dy, h), reflect(x + dx, w)]
            out[y, x] = acc
    return out


def test_constant_image_corrects_to_ones():
    out = illumination_correct(np.full((40, 50), 1234.0), filter_size=12)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_gradient_matches_direct_convolution():
    yy, xx = np.mgrid[0:8, 0:8]
    image = 100.0 + 7.0 * xx + 3.0 * yy
    filter_size = 6.0  # sigma 1
    expected = image / np.maximum(direct_gaussian_smooth(image, filter_size / 6.0), 1e-6)
    np.testing.assert_allclose(illumination_correct(image, filter_size), expected, atol=1e-6)


def test_full_scale_shape_preserved():
    rng = np.random.default_rng(0)
    image = rng.uniform(100, 5000, size=(1024, 1280))
    assert illumination_correct(image, 320).shape == (1024, 1280)


@pytest.mark.parametrize("bad", [0, -5])
def test_nonpositive_filter_rejected(bad):
    with pytest.raises(ParameterError):
        illumination_correct(np.ones((8, 8)), bad)


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (12, 10), elements=st.floats(1.0, 1e4)),
    st.floats(0.01, 100.0),
)
def test_illumination_correct_scale_invariant(image, alpha):
    np.testing.assert_allclose(illumination_correct(alpha * image, 9), illumination_correct(image, 9), atol=1e-6)


def test_resize_identity():
    rng = np.random.default_rng(1)
    image = rng.normal(size=(512, 640))
    np.testing.assert_allclose(resize_bicubic(image, (640, 512)), image, atol=1e-6)


def test_resize_identity_through_interpolation_path():
    import torch
    import torch.nn.functional as F

    image = np.random.default_rng(2).normal(size=(16, 20))
    t = torch.from_numpy(image)[None, None]
    out = F.interpolate(t, size=(16, 20), mode="bicubic", align_corners=False, antialias=True)
    np.testing.assert_allclose(out[0, 0].numpy(), image, atol=1e-6)


def test_resize_full_halving():
    image = np.random.default_rng(3).uniform(size=(1024, 1280))
    assert resize_bicubic(image, (640, 512)).shape == (512, 640)


def test_resize_constant_stays_constant():
    out = resize_bicubic(np.full((100, 90), 42.0), (33, 17))
    assert out.shape == (17, 33)
    np.testing.assert_allclose(out, 42.0, atol=1e-9)


def test_resize_rejects_degenerate():
    with pytest.raises(ParameterError):
        resize_bicubic(np.ones((8, 8)), (0, 4))
    with pytest.raises(ShapeError):
        resize_bicubic(np.ones((3, 8)), (4, 4))


def test_clip_normalize_two_points():
    out = clip_normalize(np.array([[0.0, 20000.0]]), 10000)
    np.testing.assert_allclose(out.pixels, [[-1.0, 1.0]])


def test_clip_normalize_default_cutoff():
    import inspect

    assert inspect.signature(clip_normalize).parameters["cutoff"].default == 10000
    assert ImagingConfig().cutoff == 10000


def test_clip_normalize_idempotent_on_normalised():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 20))
    x = (x - x.mean()) / x.std()
    np.testing.assert_allclose(clip_normalize(x).pixels, x, atol=1e-6)


def test_constant_image_is_degenerate():
    with pytest.raises(DegenerateInputError):
        clip_normalize(np.full((5, 5), 3.0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (9, 7), elements=st.floats(0, 60000)))
def test_clip_normalize_moments(image):
    clipped = np.minimum(image, 10000)
    if clipped.std() < 1e-3:
        return
    out = clip_normalize(image).pixels
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1) < 1e-5


def test_preprocess_order_and_output():
    rng = np.random.default_rng(5)
    raw = rng.uniform(200, 15000, size=(96, 96))
    cfg = ImagingConfig(filter_size=24, target=(64, 48))
    out = preprocess(raw, cfg, "img")
    assert out.steps == ["illumination_correct", "resize_bicubic", "clip", "normalize"]
    assert out.pixels.shape == (48, 64)
    assert abs(out.pixels.mean()) < 1e-5 and abs(out.pixels.std() - 1) < 1e-5
    np.testing.assert_array_equal(preprocess(raw, cfg).pixels, out.pixels)
