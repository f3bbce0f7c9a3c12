"""Denoising quality metrics.

Reference metrics (PSNR, SSIM, EPI) compare a test image with a reference;
TV and the blind quality score need only the test image. The blind score uses
the 36 BRISQUE spatial features but replaces BRISQUE's pretrained regressor
with a Mahalanobis distance to a Gaussian fitted on a user corpus (lower =
closer to the corpus).
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from .errors import DataError, NumericError
from .image import ImageF, correlate, joint_valid, require_gray, require_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
BLIND_SCHEME = "brisque36-mahalanobis"


def _pair_check(test: ImageF, ref: ImageF, what: str) -> np.ndarray:
    require_gray(test, what)
    require_gray(ref, what)
    require_same_shape(test, ref)
    valid = joint_valid(test, ref)
    if not valid.any():
        raise DataError(f"{what}: empty valid region")
    return valid


def psnr(test: ImageF, ref: ImageF) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; ``inf`` for identical images."""
    valid = _pair_check(test, ref, "psnr")
    mse = float(np.mean((test.data[valid] - ref.data[valid]) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(test: ImageF, ref: ImageF) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, L = 1).

    Averaged over window centres whose whole window lies inside the image and
    inside the joint validity mask.
    """
    valid = _pair_check(test, ref, "ssim")
    h, w = test.shape
    if min(h, w) < SSIM_WINDOW:
        raise DataError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = ssim_window()
    x, y = test.data, ref.data
    mx, my = correlate(x, win), correlate(y, win)
    sxx = correlate(x * x, win) - mx * mx
    syy = correlate(y * y, win) - my * my
    sxy = correlate(x * y, win) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    centres = ndimage.binary_erosion(
        valid, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW), bool), border_value=0
    )
    if not centres.any():
        raise DataError("ssim: no window fits inside the valid region")
    return float(smap[centres].mean())


def epi(test: ImageF, ref: ImageF) -> float:
    """Edge preservation index: Pearson correlation of the Laplacian responses."""
    valid = _pair_check(test, ref, "epi")
    lt = correlate(test.data, LAPLACIAN)[valid]
    lr = correlate(ref.data, LAPLACIAN)[valid]
    lt = lt - lt.mean()
    lr = lr - lr.mean()
    den = math.sqrt(float(np.sum(lt * lt)) * float(np.sum(lr * lr)))
    if den == 0:
        raise NumericError("EPI undefined: Laplacian field has zero variance")
    return float(np.sum(lt * lr) / den)


def tv(img: ImageF) -> float:
    """Isotropic total variation with forward differences (zero past the edge).

    A pixel contributes only if valid; a difference to an invalid neighbour is 0.
    """
    require_gray(img, "tv")
    x, v = img.data, img.valid
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :-1] = np.where(v[:, 1:], x[:, 1:] - x[:, :-1], 0.0)
    dy[:-1, :] = np.where(v[1:, :], x[1:, :] - x[:-1, :], 0.0)
    return float(np.sum(np.sqrt(dx**2 + dy**2)[v]))


# ------------------------------------------------------------ blind quality

_SHAPES = np.arange(0.2, 10.0, 0.001)
_GGD_RATIO = gamma_fn(1 / _SHAPES) * gamma_fn(3 / _SHAPES) / gamma_fn(2 / _SHAPES) ** 2
_AGGD_RATIO = gamma_fn(2 / _SHAPES) ** 2 / (gamma_fn(1 / _SHAPES) * gamma_fn(3 / _SHAPES))


def mscn(x: np.ndarray, c: float = 1.0 / 255) -> np.ndarray:
    """Mean-subtracted contrast-normalised coefficients (7x7 Gaussian, sigma 7/6)."""
    sigma = 7.0 / 6.0
    mu = ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=3.0 / sigma)
    var = ndimage.gaussian_filter(x * x, sigma, mode="reflect", truncate=3.0 / sigma) - mu * mu
    return (x - mu) / (np.sqrt(np.abs(var)) + c)


def fit_ggd(v: np.ndarray) -> tuple[float, float]:
    """Moment-matching generalized Gaussian fit -> (shape, variance)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    var = float(np.mean(v * v))
    e_abs = float(np.mean(np.abs(v)))
    if e_abs == 0:
        return float(_SHAPES[-1]), 0.0
    rho = var / e_abs**2
    shape = float(_SHAPES[np.argmin(np.abs(rho - _GGD_RATIO))])
    return shape, var


def fit_aggd(v: np.ndarray) -> tuple[float, float, float, float]:
    """Asymmetric generalized Gaussian fit -> (shape, mean, left var, right var)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    left, right = v[v < 0], v[v > 0]
    lvar = float(np.mean(left**2)) if left.size else 0.0
    rvar = float(np.mean(right**2)) if right.size else 0.0
    if lvar == 0 or rvar == 0 or not v.size:
        return float(_SHAPES[-1]), 0.0, lvar, rvar
    g = math.sqrt(lvar) / math.sqrt(rvar)
    r_hat = float(np.mean(np.abs(v))) ** 2 / float(np.mean(v * v))
    big_r = r_hat * (g**3 + 1) * (g + 1) / (g**2 + 1) ** 2
    shape = float(_SHAPES[np.argmin((_AGGD_RATIO - big_r) ** 2)])
    ratio = math.sqrt(gamma_fn(1 / shape) / gamma_fn(3 / shape))
    mean = (math.sqrt(rvar) - math.sqrt(lvar)) * ratio * gamma_fn(2 / shape) / gamma_fn(1 / shape)
    return shape, float(mean), lvar, rvar


def _scale_features(x: np.ndarray, valid: np.ndarray) -> list[float]:
    m = mscn(x)
    feats = list(fit_ggd(m[valid]))
    shifts = [
        (m[:, :-1] * m[:, 1:], valid[:, :-1] & valid[:, 1:]),
        (m[:-1, :] * m[1:, :], valid[:-1, :] & valid[1:, :]),
        (m[:-1, :-1] * m[1:, 1:], valid[:-1, :-1] & valid[1:, 1:]),
        (m[:-1, 1:] * m[1:, :-1], valid[:-1, 1:] & valid[1:, :-1]),
    ]
    for prod, pv in shifts:
        feats.extend(fit_aggd(prod[pv]))
    return feats


def _halve(x: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = x.shape[0] // 2, x.shape[1] // 2
    xs = x[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
    vs = valid[: 2 * h, : 2 * w].reshape(h, 2, w, 2).all(axis=(1, 3))
    return xs, vs


def blind_features(img: ImageF) -> np.ndarray:
    """36 spatial natural-scene-statistics features (18 per scale, 2 scales)."""
    require_gray(img, "blind_features")
    if min(img.shape) < 16:
        raise DataError("blind features need images of at least 16x16")
    x, v = img.data, img.valid
    feats = _scale_features(x, v)
    xs, vs = _halve(x, v)
    feats += _scale_features(xs, vs)
    return np.asarray(feats)


@dataclass(frozen=True, eq=False)
class BlindModel:
    mean: np.ndarray
    cov: np.ndarray
    ridge: float = 1e-6

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


def fit_blind_model(corpus: Sequence[ImageF], ridge: float = 1e-6) -> BlindModel:
    if len(corpus) < 20:
        raise DataError(f"blind model needs at least 20 corpus images, got {len(corpus)}")
    feats = np.stack([blind_features(img) for img in corpus])
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) + ridge * np.eye(feats.shape[1])
    if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > 1e15:
        raise NumericError("corpus covariance is singular even after the ridge")
    return BlindModel(mean, cov, ridge)


def mahalanobis(features: np.ndarray, model: BlindModel) -> float:
    d = np.asarray(features, dtype=np.float64) - model.mean
    return float(math.sqrt(max(float(d @ np.linalg.solve(model.cov, d)), 0.0)))


def blind_quality(img: ImageF, model: BlindModel | None) -> float:
    if model is None:
        raise DataError("blind quality needs a fitted corpus model")
    return mahalanobis(blind_features(img), model)


BLIND_MAGIC = b"ADNBLND\x00"


def save_blind_model(model: BlindModel, path: str | Path) -> None:
    header = json.dumps(
        {"scheme": BLIND_SCHEME, "features": int(model.mean.size), "ridge": model.ridge,
         "mscn_window": 7, "mscn_c": 1 / 255, "scales": 2},
        sort_keys=True,
    ).encode()
    blob = io.BytesIO()
    np.savez(blob, mean=model.mean, cov=model.cov)
    with open(path, "wb") as fh:
        fh.write(BLIND_MAGIC + struct.pack("<II", 1, len(header)) + header + blob.getvalue())


def load_blind_model(path: str | Path) -> BlindModel:
    raw = Path(path).read_bytes()
    if raw[:8] != BLIND_MAGIC:
        raise DataError(f"{path} is not a blind quality model")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != 1:
        raise DataError(f"unsupported blind model version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    arrays = np.load(io.BytesIO(raw[16 + hlen :]))
    return BlindModel(arrays["mean"], arrays["cov"], header["ridge"])


# ------------------------------------------------------------ reports

REPORT_COLUMNS = ("psnr", "ssim", "epi", "tv", "blind_quality")


@dataclass
class MetricReport:
    method: str
    tv: float
    psnr: float | None = None
    ssim: float | None = None
    epi: float | None = None
    blind_quality: float | None = None
    reference: str | None = None
    image: str = ""

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in REPORT_COLUMNS)


def metric_report(
    test: ImageF,
    ref: ImageF | None = None,
    blind: BlindModel | None = None,
    method: str = "",
    reference: str | None = None,
    image: str = "",
) -> MetricReport:
    """Fill every metric the inputs allow.

    Callers without clean ground truth pass the raw noisy image as ``ref``.
    """
    rep = MetricReport(method=method, tv=tv(test), image=image)
    if ref is not None:
        rep.psnr = psnr(test, ref)
        rep.ssim = ssim(test, ref)
        rep.epi = epi(test, ref)
        rep.reference = reference or "reference"
    if blind is not None:
        rep.blind_quality = blind_quality(test, blind)
    return rep


def format_value(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


def write_report_csv(reports: Iterable[MetricReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["method", "image", *REPORT_COLUMNS])
        for r in reports:
            out.writerow([r.method, r.image, *(format_value(v) for v in r.values())])
