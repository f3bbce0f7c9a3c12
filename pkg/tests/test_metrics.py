import math

import numpy as np
import pytest

import oracles
from acoustic_denoise.baselines import BaselineSpec, apply_baseline
from acoustic_denoise.errors import DataError, NumericError
from acoustic_denoise.image import ImageF, NoiseSpec, add_synthetic_noise
from acoustic_denoise.metrics import (
    REPORT_COLUMNS, blind_features, blind_quality, epi, fit_aggd, fit_blind_model,
    fit_ggd, load_blind_model, mahalanobis, metric_report, psnr, save_blind_model, ssim, tv,
    write_report_csv,
)
from acoustic_denoise.synthetic import piecewise_constant_scene


def test_metrics_match_oracles(rng):
    for _ in range(5):
        x, y = rng.random((16, 16)), rng.random((16, 16))
        a, b = ImageF(x), ImageF(y)
        assert psnr(a, b) == pytest.approx(oracles.psnr(x, y), abs=1e-9)
        assert ssim(a, b) == pytest.approx(oracles.ssim(x, y), abs=1e-9)
        assert epi(a, b) == pytest.approx(oracles.epi(x, y), abs=1e-9)
        assert tv(a) == pytest.approx(oracles.tv(x), abs=1e-9)


def test_psnr_cases():
    ref = np.full((8, 8), 0.5)
    assert psnr(ImageF(ref), ImageF(ref)) == math.inf
    assert psnr(ImageF(ref + 0.1), ImageF(ref)) == pytest.approx(20.0, abs=1e-9)
    diff = np.indices((8, 8)).sum(axis=0) % 2 * 0.2
    assert psnr(ImageF(ref + diff), ImageF(ref)) == pytest.approx(10 * math.log10(1 / 0.02), abs=1e-9)
    assert psnr(ImageF(ref + diff), ImageF(ref)) == pytest.approx(16.9897, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(DataError):
        psnr(ImageF(np.zeros((4, 4))), ImageF(np.zeros((4, 5))))


def test_ssim_cases(rng):
    x = rng.random((24, 24))
    assert ssim(ImageF(x), ImageF(x)) == pytest.approx(1.0, abs=1e-12)
    c, d = 0.4, 0.1
    lum = (2 * c * (c + d) + 1e-4) / (c * c + (c + d) ** 2 + 1e-4)
    assert ssim(ImageF(np.full((16, 16), c + d)), ImageF(np.full((16, 16), c))) == pytest.approx(lum, abs=1e-12)
    assert ssim(ImageF(1 - x), ImageF(x)) < 0


def test_ssim_ignores_windows_touching_invalid(rng):
    x, y = rng.random((24, 24)), rng.random((24, 24))
    mask = np.ones((24, 24), bool)
    mask[:, 12:] = False
    y2 = y.copy()
    y2[:, 12:] = 0.0
    assert ssim(ImageF(x, mask), ImageF(y, mask)) == ssim(ImageF(x, mask), ImageF(y2, mask))


def test_epi_cases(rng, step_edge):
    x = rng.random((16, 16))
    assert epi(ImageF(x), ImageF(x)) == pytest.approx(1.0, abs=1e-12)
    assert epi(ImageF(-x + 1), ImageF(x)) == pytest.approx(-1.0, abs=1e-12)
    blur3 = apply_baseline(step_edge, BaselineSpec("mean", {"k": 3}))
    blur7 = apply_baseline(step_edge, BaselineSpec("mean", {"k": 7}))
    assert epi(blur3, step_edge) < 1
    assert epi(blur3, step_edge) > epi(blur7, step_edge)
    with pytest.raises(NumericError):
        epi(ImageF(np.full((8, 8), 0.2)), ImageF(x[:8, :8]))


def test_tv_cases(rng, step_edge):
    assert tv(ImageF(np.full((9, 9), 0.3))) == 0
    assert tv(step_edge) == pytest.approx(32 * 1.0)
    x = rng.random((10, 10)) * 0.5
    assert tv(ImageF(1.7 * x)) == pytest.approx(1.7 * tv(ImageF(x)), rel=1e-12)


def test_ggd_shape_on_gaussian_samples(rng):
    shape, var = fit_ggd(rng.standard_normal(200000))
    assert shape == pytest.approx(2.0, rel=0.1)
    assert var == pytest.approx(1.0, rel=0.02)


def test_aggd_symmetric_gaussian(rng):
    shape, mean, lvar, rvar = fit_aggd(rng.standard_normal(200000))
    assert shape == pytest.approx(2.0, rel=0.1)
    assert abs(mean) < 0.02 and lvar == pytest.approx(rvar, rel=0.05)


@pytest.mark.parametrize("size", [(32, 32), (40, 57), (64, 64)])
def test_feature_count(size, rng):
    assert blind_features(ImageF(rng.random(size))).shape == (36,)


@pytest.fixture(scope="module")
def corpus():
    return [piecewise_constant_scene(48, 48, seed=s) for s in range(30)]


@pytest.fixture(scope="module")
def blind(corpus):
    noisy = [add_synthetic_noise(c, NoiseSpec(gaussian=0.02), i) for i, c in enumerate(corpus)]
    return fit_blind_model(noisy)


def test_identical_corpus_is_regularised():
    img = piecewise_constant_scene(32, 32, seed=0)
    model = fit_blind_model([img] * 20)
    np.testing.assert_allclose(model.cov, model.ridge * np.eye(36), atol=1e-15)
    assert mahalanobis(blind_features(img), model) <= 1e-9


def test_corpus_needs_twenty(corpus):
    with pytest.raises(DataError):
        fit_blind_model(corpus[:10])


def test_self_scores_and_noise_penalty(corpus, blind):
    noisy = [add_synthetic_noise(c, NoiseSpec(gaussian=0.02), i) for i, c in enumerate(corpus)]
    scores = [blind_quality(img, blind) for img in noisy]
    assert scores[0] <= np.percentile(scores, 95)
    heavy = add_synthetic_noise(noisy[0], NoiseSpec(gaussian=50 / 255), 99)
    assert blind_quality(heavy, blind) > scores[0]
    assert mahalanobis(blind.mean, blind) == 0.0


def test_blind_model_round_trip(tmp_path, blind):
    save_blind_model(blind, tmp_path / "b.bin")
    back = load_blind_model(tmp_path / "b.bin")
    np.testing.assert_array_equal(back.mean, blind.mean)
    np.testing.assert_array_equal(back.cov, blind.cov)
    (tmp_path / "x.bin").write_bytes(b"junk")
    with pytest.raises(DataError):
        load_blind_model(tmp_path / "x.bin")


def test_blind_needs_model(rng):
    with pytest.raises(DataError):
        blind_quality(ImageF(rng.random((32, 32))), None)


def test_report_availability_and_order(tmp_path, rng):
    img = ImageF(rng.random((16, 16)))
    rep = metric_report(img)
    assert rep.tv is not None and rep.psnr is None and rep.ssim is None and rep.blind_quality is None
    full = metric_report(img, img, method="same", reference="raw", image="a.png")
    assert full.psnr == math.inf and full.ssim == pytest.approx(1.0) and full.epi == pytest.approx(1.0)
    write_report_csv([full, rep], tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert REPORT_COLUMNS == ("psnr", "ssim", "epi", "tv", "blind_quality")
    assert lines[0] == "method,image,psnr,ssim,epi,tv,blind_quality"
    assert lines[1].split(",")[2] == "inf"
    assert lines[2].split(",")[2] == ""
