"""Classical comparison filters (mean, median, Gaussian, bilateral, wavelet, anisotropic)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pywt
from scipy import ndimage

from .errors import DataError
from .image import ImageF, correlate, require_gray

DEFAULTS = {
    "mean": {"k": 3},
    "median": {"k": 3},
    "gaussian": {"sigma": 1.0},
    "bilateral": {"sigma_s": 3.0, "sigma_r": 0.1},
    "wavelet": {"levels": 2, "threshold": -1.0},  # negative -> universal threshold
    "anisotropic": {"iterations": 10, "kappa": 0.1, "lam": 0.2},
}


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise DataError(f"unknown baseline {self.kind!r}; choose from {sorted(DEFAULTS)}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise DataError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind in ("mean", "median") and (int(p["k"]) != p["k"] or p["k"] < 1 or p["k"] % 2 == 0):
            raise DataError("window size k must be a positive odd integer")
        if self.kind == "gaussian" and p["sigma"] <= 0:
            raise DataError("sigma must be > 0")
        if self.kind == "bilateral" and (p["sigma_s"] <= 0 or p["sigma_r"] <= 0):
            raise DataError("bilateral sigmas must be > 0")
        if self.kind == "wavelet" and (int(p["levels"]) != p["levels"] or p["levels"] < 1):
            raise DataError("wavelet levels must be a positive integer")
        if self.kind == "anisotropic":
            if int(p["iterations"]) != p["iterations"] or p["iterations"] < 0:
                raise DataError("iterations must be a non-negative integer")
            if p["kappa"] <= 0 or not 0 < p["lam"] <= 0.25:
                raise DataError("need kappa > 0 and 0 < lambda <= 0.25")

    @property
    def label(self) -> str:
        args = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind}:{args}"


def parse_baseline(text: str) -> BaselineSpec:
    """Parse ``kind[:name=value,...]``, e.g. ``gaussian:sigma=1.0``."""
    kind, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        name, sep, value = item.partition("=")
        if not sep:
            raise DataError(f"bad baseline parameter {item!r} (expected name=value)")
        try:
            params[name.strip()] = float(value)
        except ValueError:
            raise DataError(f"baseline parameter {name!r} is not a number: {value!r}") from None
    return BaselineSpec(kind.strip(), params)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    return np.outer(k, k)


def _bilateral(x: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    r = math.ceil(2 * sigma_s)
    padded = np.pad(x, r, mode="symmetric")
    h, w = x.shape
    num = np.zeros_like(x)
    den = np.zeros_like(x)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dy * dy + dx * dx) / (2 * sigma_s**2))
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            wt = ws * np.exp(-((nb - x) ** 2) / (2 * sigma_r**2))
            num += wt * nb
            den += wt
    return num / den


def wavelet_denoise(x: np.ndarray, levels: int, threshold: float | None) -> np.ndarray:
    """db2 soft thresholding of all detail bands (symmetric extension).

    ``threshold=None`` uses sigma * sqrt(2 ln N) with sigma from the MAD of the
    finest diagonal band; 0 gives a plain analysis/synthesis round trip.
    """
    coeffs = pywt.wavedec2(x, "db2", mode="symmetric", level=levels)
    if threshold is None:
        finest_diag = coeffs[-1][2]
        sigma = np.median(np.abs(finest_diag)) / 0.6745
        threshold = sigma * math.sqrt(2 * math.log(x.size))
    if threshold > 0:
        coeffs = [coeffs[0]] + [
            tuple(pywt.threshold(c, threshold, mode="soft") for c in band) for band in coeffs[1:]
        ]
    out = pywt.waverec2(coeffs, "db2", mode="symmetric")
    return out[: x.shape[0], : x.shape[1]]


def perona_malik(x: np.ndarray, iterations: int, kappa: float, lam: float) -> np.ndarray:
    """Explicit Perona-Malik diffusion, g = exp(-(|d|/kappa)^2), zero flux at borders."""
    u = x.copy()
    for _ in range(int(iterations)):
        flux_x = np.zeros_like(u)
        flux_y = np.zeros_like(u)
        dx = u[:, 1:] - u[:, :-1]
        dy = u[1:, :] - u[:-1, :]
        flux_x[:, :-1] = np.exp(-((dx / kappa) ** 2)) * dx
        flux_y[:-1, :] = np.exp(-((dy / kappa) ** 2)) * dy
        div = flux_x.copy()
        div[:, 1:] -= flux_x[:, :-1]
        div += flux_y
        div[1:, :] -= flux_y[:-1, :]
        u = u + lam * div
    return u


def apply_baseline(img: ImageF, spec: BaselineSpec) -> ImageF:
    require_gray(img, "apply_baseline")
    p = spec.params
    x = img.data
    if spec.kind == "mean":
        k = int(p["k"])
        out = correlate(x, np.full((k, k), 1.0 / (k * k)))
    elif spec.kind == "median":
        out = ndimage.median_filter(x, size=int(p["k"]), mode="reflect")
    elif spec.kind == "gaussian":
        k = gaussian_kernel1d(p["sigma"])
        out = correlate(correlate(x, k[None, :]), k[:, None])
    elif spec.kind == "bilateral":
        out = _bilateral(x, p["sigma_s"], p["sigma_r"])
    elif spec.kind == "wavelet":
        thr = None if p["threshold"] < 0 else p["threshold"]
        out = wavelet_denoise(x, int(p["levels"]), thr)
    else:
        out = perona_malik(x, int(p["iterations"]), p["kappa"], p["lam"])
    return img.with_data(np.clip(out, 0.0, 1.0))
