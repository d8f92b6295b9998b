import numpy as np
import pytest

from attnseg.resample import resize_bilinear


def test_identity_resize_is_exact():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(5, 7)).astype(np.float32)
    out = resize_bilinear(a, 5, 7)
    assert np.array_equal(out, a.astype(np.float64))


def test_constant_field_stays_constant():
    a = np.full((1, 1, 2), [0.2, 0.8])
    out = resize_bilinear(a, 2, 2)
    assert out.shape == (2, 2, 2)
    assert np.allclose(out, [0.2, 0.8])


def test_corners_map_to_corners():
    a = np.arange(12, dtype=float).reshape(3, 4)
    out = resize_bilinear(a, 7, 9)
    assert out[0, 0] == a[0, 0]
    assert out[0, -1] == a[0, -1]
    assert out[-1, 0] == a[-1, 0]
    assert out[-1, -1] == a[-1, -1]


def test_linear_ramp_reproduced_exactly():
    # Bilinear interpolation is exact on affine fields.
    ys, xs = np.mgrid[0:4, 0:5].astype(float)
    a = 2.0 * xs + 3.0 * ys + 1.0
    out = resize_bilinear(a, 10, 13)
    oy, ox = np.mgrid[0:10, 0:13].astype(float)
    expected = 2.0 * (ox * 4 / 12) + 3.0 * (oy * 3 / 9) + 1.0
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_downsample_shape_and_range():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(16, 16))
    out = resize_bilinear(a, 4, 4)
    assert out.shape == (4, 4)
    assert out.min() >= a.min() and out.max() <= a.max()


def test_zero_output_dim_rejected():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2)), 0, 2)
