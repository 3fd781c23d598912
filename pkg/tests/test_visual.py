import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal_kd.autodiff import Tensor, grad_check, parameter, stream
from crossmodal_kd.visual import (
    AugmentConfig, FoldError, VisualAugmenter, bilinear_resize, enhance, export_pgm, fft_magnitude,
    fold_shape, interp_matrix, periodicity_encode, pixel_normalize, read_pgm,
)


def naive_dft_mag(x):
    L = len(x)
    t = np.arange(L)
    return np.array([abs(sum(x[n] * np.exp(-2j * np.pi * k * n / L) for n in t)) for k in range(L)])


def test_fft_examples():
    np.testing.assert_allclose(fft_magnitude([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(fft_magnitude([0, 1, 0, -1]), [0, 2, 0, 2], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64).flatmap(lambda L: arrays(np.float64, L, elements=st.floats(-10, 10))),
       st.integers(0, 63))
def test_fft_shift_invariant_magnitude(x, k):
    np.testing.assert_allclose(fft_magnitude(np.roll(x, k % len(x))), fft_magnitude(x), atol=1e-9)
    np.testing.assert_allclose(fft_magnitude(x), naive_dft_mag(x), atol=1e-9)


def test_periodicity_encode():
    pe = periodicity_encode(30, 24)
    np.testing.assert_array_equal(pe[0], [0, 1])
    np.testing.assert_allclose(pe[6], [1, 0], atol=1e-15)
    np.testing.assert_allclose(pe[24], pe[0], atol=1e-12)


def test_enhance_channels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 3))
    aug, cos = enhance(x, 4)
    assert aug.shape == (2, 8, 3, 3) and cos.shape == (2, 8, 3, 1)
    np.testing.assert_array_equal(aug.data[..., 0], x)
    c = np.full((1, 6, 2), 1.5)
    spec = enhance(c, 3)[0].data[0, :, :, 1]
    np.testing.assert_allclose(spec[0], [9.0, 9.0])
    np.testing.assert_allclose(spec[1:], 0.0, atol=1e-12)


def test_fold_shape_rules():
    assert fold_shape(96, 24) == (4, 24)
    assert fold_shape(30, 7) == (5, 6)
    assert fold_shape(13, 5) == (1, 13)


def test_bilinear_examples():
    src = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    out = bilinear_resize(src, 3, 3).data[0, 0]
    assert out[1, 1] == 1.5
    assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 2.0, 3.0)


def test_bilinear_corners_on_upsample():
    src = np.random.default_rng(1).normal(size=(2, 3, 4, 7))
    out = bilinear_resize(src, 56, 56).data
    for a, b in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert np.array_equal(out[..., a, b], src[..., a, b])


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.integers(2, 9), st.integers(2, 9),
       st.integers(1, 20), st.integers(1, 20))
def test_bilinear_exact_on_affine(a, b, c, h, w, H, W):
    ys, xs = np.linspace(0, 1, h), np.linspace(0, 1, w)
    src = a * xs[None, :] + b * ys[:, None] + c
    out = bilinear_resize(src.reshape(1, 1, h, w), H, W).data[0, 0]
    ty = np.linspace(0, 1, H) if H > 1 else np.zeros(1)
    tx = np.linspace(0, 1, W) if W > 1 else np.zeros(1)
    np.testing.assert_allclose(out, a * tx[None, :] + b * ty[:, None] + c, atol=1e-9)


def test_interp_rows_sum_to_one():
    np.testing.assert_allclose(interp_matrix(7, 56).sum(1), 1.0, atol=1e-15)


def test_pixel_normalize_examples():
    img, _ = pixel_normalize(np.array([0.0, 5.0, 10.0, 20.0]).reshape(1, 1, 2, 2))
    np.testing.assert_allclose(img.data.ravel(), [0, 63.749, 127.499, 254.999], atol=1e-2)
    flat, _ = pixel_normalize(np.full((1, 1, 3, 3), 7.0))
    assert np.all(flat.data == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 4, 4), elements=st.floats(-1e4, 1e4)))
def test_pixel_normalize_range(x):
    img = pixel_normalize(x)[0].data
    assert img.min() >= 0 and img.max() <= 255
    for b in range(2):
        if np.ptp(x[b]) > 1:
            assert img[b].max() >= 255 * (1 - 1e-4)


def test_pgm_bytes(tmp_path):
    p = tmp_path / "z.pgm"
    export_pgm(np.zeros((2, 2)), p)
    assert p.read_bytes() == b"P5\n2 2\n255\n" + bytes(4)
    img = np.random.default_rng(0).uniform(0, 255, size=(56, 56))
    q = tmp_path / "r.pgm"
    export_pgm(img, q)
    assert len(q.read_bytes()) == len(b"P5\n56 56\n255\n") + 3136
    np.testing.assert_array_equal(read_pgm(q), np.rint(img).astype(np.uint8))


def make_aug(hidden=16, size=56, c_img=3, P=24, seed=0):
    return VisualAugmenter(AugmentConfig(hidden, size, c_img, P), stream(seed, "aug"))


def test_default_composition_shape():
    aug = make_aug()
    img, _ = aug(np.random.default_rng(0).normal(size=(2, 96, 3)))
    assert img.shape == (2, 3, 56, 56)


@pytest.mark.parametrize("c_img", [1, 3, 5])
def test_output_channels(c_img):
    aug = make_aug(hidden=4, size=8, c_img=c_img, P=4)
    assert aug(np.zeros((1, 16, 2)))[0].shape == (1, c_img, 8, 8)


def test_zero_final_conv_gives_zero_raw_image():
    aug = make_aug(hidden=4, P=4)
    aug.conv_b.weight.data[:] = 0
    aug.conv_b.bias.data[:] = 0
    aug_x, cos = enhance(np.random.default_rng(0).normal(size=(1, 16, 2)), 4)
    assert np.all(aug.multiscale(aug_x, cos, 4).data == 0)


def test_odd_hidden_rejected():
    with pytest.raises(FoldError):
        AugmentConfig(hidden=5).validate()


def test_multiscale_grad_on_toy():
    aug = make_aug(hidden=4, size=4, c_img=2, P=4)
    rng = np.random.default_rng(3)
    x_aug = parameter(rng.normal(size=(1, 8, 1, 3)))
    cos = enhance(np.zeros((1, 8, 1)), 4)[1]
    w = rng.normal(size=(1, 2, 2, 4))
    params = [x_aug] + list(aug.params().values())
    rep = grad_check(lambda: (aug.multiscale(x_aug, cos, 4) * Tensor(w)).sum(), params, tol=1e-4)
    assert rep.passed, rep


def test_gradient_reaches_window_and_every_conv_param():
    aug = make_aug(hidden=4, size=8, c_img=2, P=4)
    x = parameter(np.random.default_rng(1).normal(size=(1, 16, 2)))
    img, _ = aug(x)
    (img * Tensor(np.random.default_rng(2).normal(size=img.shape))).sum().backward()
    assert np.any(x.grad != 0)
    for name, p in aug.params().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_render_deterministic():
    x = np.random.default_rng(5).normal(size=(1, 96, 3))
    a = make_aug(seed=3)(x)[0].data
    b = make_aug(seed=3)(x)[0].data
    assert a.tobytes() == b.tobytes()
