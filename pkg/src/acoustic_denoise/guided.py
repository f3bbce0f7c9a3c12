"""Guided filtering and the saliency-gated refinement of first-stage output."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .image import ImageF, gradient_saliency, require_gray, require_same_shape


@dataclass(frozen=True)
class GuidedParams:
    radius_detail: int = 4
    eps_detail: float = 1e-4
    radius_mask: int = 8
    eps_mask: float = 1e-3

    def __post_init__(self):
        if self.radius_detail < 0 or self.radius_mask < 0:
            raise DataError("guided filter radii must be >= 0")
        if self.eps_detail <= 0 or self.eps_mask <= 0:
            raise DataError("guided filter eps must be > 0")


def box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window clipped to the image, via an integral image."""
    h, w = a.shape
    s = np.zeros((h + 1, w + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return s[y1][:, x1] - s[y0][:, x1] - s[y1][:, x0] + s[y0][:, x0]


def guided_filter(p: ImageF, guide: ImageF, r: int, eps: float) -> ImageF:
    """Box-window guided filter of ``p`` steered by ``guide``.

    Per window k: a_k = cov_k(I, p) / (var_k(I) + eps), b_k = mean_k(p) -
    a_k mean_k(I); the output averages a_k I_i + b_k over the windows covering
    pixel i. Windows are clipped at the border, statistics use only pixels
    valid in both images, and invalid pixels pass ``p`` through.
    """
    require_gray(p, "guided_filter")
    require_gray(guide, "guided_filter")
    require_same_shape(p, guide)
    if r < 0 or eps <= 0:
        raise DataError("need r >= 0 and eps > 0")
    valid = p.valid & guide.valid
    m = valid.astype(np.float64)
    pi, gi = p.data * m, guide.data * m

    n = box_sum(m, r)
    has = n > 0
    nz = np.where(has, n, 1.0)
    mean_i = box_sum(gi, r) / nz
    mean_p = box_sum(pi, r) / nz
    cov = box_sum(gi * p.data, r) / nz - mean_i * mean_p
    var = np.maximum(box_sum(gi * guide.data, r) / nz - mean_i * mean_i, 0.0)
    a = np.where(has, cov / (var + eps), 0.0)
    b = np.where(has, mean_p - a * mean_i, 0.0)

    centres = m * has
    cnt = box_sum(centres, r)
    cz = np.where(cnt > 0, cnt, 1.0)
    mean_a = box_sum(a * centres, r) / cz
    mean_b = box_sum(b * centres, r) / cz
    q = mean_a * guide.data + mean_b
    q = np.where(valid & (cnt > 0), q, p.data)
    return p.with_data(q)


class Refinement(NamedTuple):
    output: ImageF
    alpha: ImageF
    saliency: np.ndarray
    detail: ImageF


def refine_maps(p_raw: ImageF, i_denoised: ImageF, params: GuidedParams = GuidedParams()) -> Refinement:
    """Refinement with its intermediate maps (alpha matte, saliency, detail pass)."""
    require_gray(p_raw, "refine")
    require_gray(i_denoised, "refine")
    require_same_shape(p_raw, i_denoised)
    sal = gradient_saliency(i_denoised)
    m = i_denoised.with_data(sal.mask.astype(np.float64))
    alpha = np.clip(guided_filter(m, i_denoised, params.radius_mask, params.eps_mask).data, 0.0, 1.0)
    detail = guided_filter(p_raw, i_denoised, params.radius_detail, params.eps_detail)
    q = alpha * detail.data + (1.0 - alpha) * i_denoised.data
    out = ImageF(np.clip(q, 0.0, 1.0), p_raw.mask)
    return Refinement(out, ImageF(alpha, p_raw.mask), sal.salient, detail)


def refine(p_raw: ImageF, i_denoised: ImageF, params: GuidedParams = GuidedParams()) -> ImageF:
    """Blend raw detail back into the first-stage result where edges are salient.

    The saliency mask of the denoised image is feathered into a soft matte by
    guided filtering; inside it the output takes the guided-filtered raw image,
    elsewhere it keeps the denoised image.
    """
    return refine_maps(p_raw, i_denoised, params).output
