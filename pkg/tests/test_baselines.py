import numpy as np
import pytest

from acoustic_denoise.baselines import (
    BaselineSpec, apply_baseline, gaussian_kernel1d, parse_baseline, perona_malik, wavelet_denoise,
)
from acoustic_denoise.errors import DataError
from acoustic_denoise.image import ImageF


def test_parse_and_defaults():
    spec = parse_baseline("gaussian:sigma=1.5")
    assert spec.kind == "gaussian" and spec.params["sigma"] == 1.5
    assert parse_baseline("bilateral").params == {"sigma_s": 3.0, "sigma_r": 0.1}
    assert parse_baseline("median:k=5").label == "median:k=5"


@pytest.mark.parametrize("text", ["nope", "mean:k=4", "median:k", "gaussian:sigma=abc", "gaussian:width=2",
                                  "anisotropic:lam=0.5"])
def test_parse_errors(text):
    with pytest.raises(DataError):
        parse_baseline(text)


@pytest.mark.parametrize("spec", ["mean", "median", "gaussian", "bilateral", "wavelet", "anisotropic"])
def test_constant_preserved(spec):
    out = apply_baseline(ImageF(np.full((16, 16), 0.35)), parse_baseline(spec))
    np.testing.assert_allclose(out.data, 0.35, atol=1e-9)


def test_gaussian_kernel():
    k = gaussian_kernel1d(1.0)
    assert k.size == 7 and k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1])


def test_mean_against_loops(rng):
    x = rng.random((6, 6))
    out = apply_baseline(ImageF(x), parse_baseline("mean:k=3")).data
    assert out[2, 3] == pytest.approx(x[1:4, 2:5].mean(), abs=1e-14)


def test_median_removes_salt(rng):
    x = np.full((40, 40), 0.4)
    salt = rng.random((40, 40)) < 0.01
    x[salt] = 1.0
    out = apply_baseline(ImageF(x), parse_baseline("median:k=3")).data
    assert salt.sum() > 0
    assert np.all(out[1:-1, 1:-1] == 0.4)


def test_median_against_loops(rng):
    x = rng.random((7, 7))
    out = apply_baseline(ImageF(x), parse_baseline("median:k=3")).data
    assert out[3, 3] == np.median(x[2:5, 2:5])


def test_wavelet_zero_threshold_round_trip(rng):
    x = rng.random((20, 18))
    np.testing.assert_allclose(wavelet_denoise(x, 2, 0.0), x, atol=1e-12)


def test_wavelet_reduces_noise(rng):
    clean = np.full((64, 64), 0.5)
    noisy = clean + 0.05 * rng.standard_normal(clean.shape)
    assert np.std(wavelet_denoise(noisy, 2, None) - clean) < 0.6 * np.std(noisy - clean)


def test_anisotropic_zero_iterations_and_mass(rng):
    x = rng.random((12, 12))
    np.testing.assert_array_equal(perona_malik(x, 0, 0.1, 0.2), x)
    assert perona_malik(x, 5, 0.1, 0.2).sum() == pytest.approx(x.sum(), rel=1e-12)


def test_bilateral_keeps_step(step_edge):
    out = apply_baseline(step_edge, parse_baseline("bilateral:sigma_s=2,sigma_r=0.05")).data
    np.testing.assert_allclose(out, step_edge.data, atol=1e-6)


def test_output_clipped_and_mask_kept(rng):
    mask = rng.random((10, 10)) > 0.5
    out = apply_baseline(ImageF(rng.random((10, 10)), mask), BaselineSpec("gaussian"))
    assert 0 <= out.data.min() and out.data.max() <= 1
    np.testing.assert_array_equal(out.mask, mask)
