import numpy as np
import pytest

from helpers import check_grad
from segfield import autodiff as ad
from segfield.autodiff import Tensor
from segfield.encoder import (DOWNSCALE, FEATURE_DIM, check_extent, encode, init_encoder,
                              receptive_field, sample_feature)


@pytest.fixture(scope="module")
def params():
    return init_encoder(np.random.default_rng(0), dtype=np.float64)


def test_feature_map_extent(params):
    for h, w in ((64, 64), (30, 17), (5, 9)):
        out = encode(np.zeros((2, h, w, 3)), params)
        assert out.shape == (2, FEATURE_DIM, -(-h // DOWNSCALE), -(-w // DOWNSCALE))


def test_encode_deterministic(params, rng):
    img = rng.random((1, 16, 16, 3))
    assert encode(img, params).data.tobytes() == encode(img, params).data.tobytes()


def test_extent_mismatch_rejected():
    with pytest.raises(ValueError):
        check_extent(np.zeros((2, 32, 30, 3)), 32, 32)
    with pytest.raises(ValueError):
        encode(np.zeros((4, 4)), init_encoder(np.random.default_rng(0)))


def test_receptive_field_formula():
    # stride-2 layers at positions 2 and 4: each 3x3 conv widens by one pixel at current scale
    assert receptive_field(0) == (-6, 6)
    assert receptive_field(5) == (14, 26)


def test_receptive_field_bounds_influence(params, rng):
    img = rng.random((1, 40, 40, 3))
    k = 5
    lo, hi = receptive_field(k)
    other = img.copy()
    outside = np.ones(40, bool)
    outside[max(lo, 0) : hi + 1] = False
    other[0, :, outside] = rng.random((outside.sum(), 40, 3))
    a = encode(img, params).data[0, :, :, k]
    b = encode(other, params).data[0, :, :, k]
    np.testing.assert_array_equal(a, b)
    # the range is tight: touching its edge column changes the texel
    edge = img.copy()
    edge[0, :, hi] += 0.5
    assert not np.array_equal(encode(edge, params).data[0, :, :, k], a)


def test_translation_consistency(params, rng):
    img = rng.random((1, 32, 48, 3))
    shifted = np.roll(img, DOWNSCALE, axis=2)
    a = encode(img, params).data[0]
    b = encode(shifted, params).data[0]
    # interior texels: far enough from both borders and from the wrapped seam
    np.testing.assert_allclose(b[:, 2:-2, 3:-2], a[:, 2:-2, 2:-3], rtol=1e-12, atol=1e-12)


def test_encoder_gradient_matches_fd():
    rng = np.random.default_rng(3)
    full = init_encoder(rng, dtype=np.float64)
    img = rng.random((1, 9, 7, 3))
    for i in range(4):
        wname, bname = f"enc.conv{i}.w", f"enc.conv{i}.b"
        w = full[wname].data
        fixed = {k: v for k, v in full.items() if k not in (wname, bname)}

        # sweep the first output channel's kernel plus every bias of this layer
        def build(p, fixed=fixed, wname=wname, bname=bname, rest=w[1:]):
            kernel = ad.concat([p["w0"], Tensor(rest)], axis=0)
            return ad.sum(ad.sigmoid(encode(img, {**fixed, wname: kernel, bname: p["b"]})))

        check_grad(build, {"w0": w[:1], "b": rng.standard_normal(w.shape[0]) * 0.1})


def test_sample_integer_texel(rng):
    fmap = Tensor(rng.standard_normal((4, 5, 6)))
    # feature texel (i, j) sits under image coordinate i*4 + 0.5
    for i, j in ((0, 0), (3, 2), (5, 4)):
        out = sample_feature(fmap, [[i * DOWNSCALE + 0.5, j * DOWNSCALE + 0.5]])
        np.testing.assert_array_equal(out.features.data[0], fmap.data[:, j, i])
        assert not out.out_of_view[0]


def test_sample_midpoint_is_average(rng):
    fmap = Tensor(rng.standard_normal((4, 5, 6)))
    uv = [[2.5 * DOWNSCALE + 0.5, 1 * DOWNSCALE + 0.5]]
    out = sample_feature(fmap, uv).features.data[0]
    np.testing.assert_allclose(out, 0.5 * (fmap.data[:, 1, 2] + fmap.data[:, 1, 3]), rtol=1e-14)


def test_out_of_view_is_zero_and_flagged(rng):
    fmap = Tensor(rng.standard_normal((4, 5, 6)))
    out = sample_feature(fmap, [[3.0, 3.0], [1.0, 2.0]], out_of_view=[True, False])
    np.testing.assert_array_equal(out.features.data[0], 0)
    assert out.out_of_view.tolist() == [True, False]
    assert np.any(out.features.data[1] != 0)


def test_sample_feature_continuity(rng):
    fmap = Tensor(rng.standard_normal((3, 6, 6)))
    texel_range = np.ptp(fmap.data)
    base = rng.uniform(2, 20, (100, 2))
    for eps in (1e-3, 1e-5):
        a = sample_feature(fmap, base).features.data
        b = sample_feature(fmap, base + [eps, 0]).features.data
        assert np.abs(a - b).max() <= 2 * eps / DOWNSCALE * texel_range
