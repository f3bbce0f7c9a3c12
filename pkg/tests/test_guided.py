import numpy as np
import pytest

from acoustic_denoise.baselines import BaselineSpec, apply_baseline
from acoustic_denoise.errors import DataError
from acoustic_denoise.guided import GuidedParams, box_sum, guided_filter, refine, refine_maps
from acoustic_denoise.image import ImageF, NoiseSpec, add_synthetic_noise, gradient_saliency
from acoustic_denoise.metrics import epi


def _box_mean_oracle(x, r):
    h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = x[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1].mean()
    return out


def test_box_sum_against_loops(rng):
    x = rng.random((7, 9))
    n = box_sum(np.ones_like(x), 2)
    np.testing.assert_allclose(box_sum(x, 2) / n, _box_mean_oracle(x, 2), atol=1e-13)


def test_radius_zero_returns_p(rng):
    p, guide = ImageF(rng.random((9, 9))), ImageF(rng.random((9, 9)))
    np.testing.assert_allclose(guided_filter(p, guide, 0, 1e-3).data, p.data, atol=1e-14)


def test_constant_guide_gives_double_box_mean(rng):
    p = ImageF(rng.random((12, 10)))
    q = guided_filter(p, ImageF(np.full((12, 10), 0.4)), 2, 1e-3)
    np.testing.assert_allclose(q.data, _box_mean_oracle(_box_mean_oracle(p.data, 2), 2), atol=1e-12)


def test_self_guided_step_is_preserved(step_edge):
    q = guided_filter(step_edge, step_edge, 4, 1e-4)
    assert np.max(np.abs(q.data - step_edge.data)[4:-4, 4:-4]) <= 0.05


def test_linear_in_p(rng):
    guide = ImageF(rng.random((16, 16)))
    p1, p2 = rng.random((16, 16)), rng.random((16, 16))
    a, b = 0.7, -1.3
    lhs = guided_filter(ImageF(a * p1 + b * p2), guide, 3, 1e-3).data
    rhs = a * guided_filter(ImageF(p1), guide, 3, 1e-3).data + b * guided_filter(ImageF(p2), guide, 3, 1e-3).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_invalid_pixels_pass_through(rng):
    mask = np.ones((10, 10), bool)
    mask[:3] = False
    p = ImageF(rng.random((10, 10)), mask)
    q = guided_filter(p, ImageF(rng.random((10, 10))), 2, 1e-3)
    np.testing.assert_array_equal(q.data[:3], p.data[:3])


def test_param_validation():
    with pytest.raises(DataError):
        GuidedParams(radius_detail=-1)
    with pytest.raises(DataError):
        GuidedParams(eps_mask=0.0)


def test_flat_first_stage_is_kept(rng):
    raw = ImageF(rng.random((20, 20)))
    flat = ImageF(np.full((20, 20), 0.5))
    maps = refine_maps(raw, flat)
    assert not maps.alpha.data.any()
    np.testing.assert_array_equal(maps.output.data, flat.data)


def test_full_saliency_gives_detail_pass(rng):
    # 3-pixel blocks offset by one: every pixel lies within one step of a salient one
    yy, xx = np.mgrid[0:24, 0:24]
    checker = ImageF(((((yy + 1) // 3) + ((xx + 1) // 3)) % 2) * 0.6 + 0.2)
    assert gradient_saliency(checker).mask.all()
    raw = ImageF(rng.random((24, 24)))
    maps = refine_maps(raw, checker)
    np.testing.assert_allclose(maps.alpha.data, 1.0, atol=1e-12)
    p = GuidedParams()
    np.testing.assert_allclose(maps.output.data, np.clip(guided_filter(raw, checker, p.radius_detail, p.eps_detail).data, 0, 1), atol=1e-12)


def edge_recovery_fixture(seed=0):
    """Clean step, its noisy version and an over-smoothed first stage."""
    x = np.full((48, 48), 0.25)
    x[:, 24:] = 0.75
    clean = ImageF(x)
    noisy = add_synthetic_noise(clean, NoiseSpec(gaussian=0.02), seed)
    stage1 = apply_baseline(noisy, BaselineSpec("gaussian", {"sigma": 2.5}))
    return clean, noisy, stage1


def test_refinement_recovers_edges():
    clean, noisy, stage1 = edge_recovery_fixture()
    maps = refine_maps(noisy, stage1)
    assert maps.alpha.data.min() >= 0 and maps.alpha.data.max() <= 1
    assert epi(maps.output, clean) > epi(stage1, clean)
    np.testing.assert_array_equal(refine(noisy, stage1).data, maps.output.data)
