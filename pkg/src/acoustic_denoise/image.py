"""Raster data model, file I/O and the shared numeric kernels.

Images are double-precision arrays holding intensities in [0, 1]. Quantization
only happens in :func:`load_image` / :func:`save_image`. An optional boolean
validity mask marks the insonified (fan-shaped) region of a sonar frame; every
statistic in the package ignores pixels outside it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np
from scipy import ndimage

from .errors import DataError

_BORDER_MODES = {"reflect": "reflect", "replicate": "nearest", "zero": "constant"}


@dataclass(frozen=True, eq=False)
class ImageF:
    """A 1- or 3-channel float64 raster with an optional validity mask.

    ``data`` has shape (H, W) or (H, W, 3). ``mask`` is None (full frame) or a
    bool array of shape (H, W). Both arrays are copied and frozen on
    construction so an ImageF behaves as a value.
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise DataError(f"image must be (H, W) or (H, W, 3), got {data.shape}")
        if data.size == 0:
            raise DataError("image is empty")
        if not np.all(np.isfinite(data)):
            raise DataError("image contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise DataError(
                    f"mask shape {mask.shape} does not match image {data.shape[:2]}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def valid(self) -> np.ndarray:
        """Boolean validity raster (all True when no mask is attached)."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    def with_data(self, data: np.ndarray) -> ImageF:
        """New image with the same mask and replaced samples."""
        return ImageF(data, self.mask)

    def valid_values(self) -> np.ndarray:
        if self.mask is None:
            return self.data.reshape(-1) if self.channels == 1 else self.data.reshape(-1, 3)
        return self.data[self.mask]


def require_gray(img: ImageF, what: str = "operation") -> None:
    if img.channels != 1:
        raise DataError(f"{what} needs a single-channel image, got {img.channels} channels")


def require_same_shape(a: ImageF, b: ImageF) -> None:
    if a.data.shape != b.data.shape:
        raise DataError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")


def joint_valid(a: ImageF, b: ImageF) -> np.ndarray:
    if a.mask is None and b.mask is None:
        return np.ones(a.shape, dtype=bool)
    return a.valid & b.valid


# --------------------------------------------------------------------- I/O


def mask_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".mask.png")


def _read_raw(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read image file {path}")
    return raw


def load_image(path: str | Path) -> ImageF:
    """Read an 8/16-bit PNG or binary PGM/PPM, normalised to [0, 1].

    A sidecar ``<stem>.mask.png`` next to the file is loaded as the validity
    mask (nonzero = valid).
    """
    path = Path(path)
    raw = _read_raw(path)
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        if raw.shape[2] == 1:
            raw = raw[:, :, 0]
        else:
            raw = raw[:, :, ::-1]  # BGR -> RGB
    data = raw.astype(np.float64) / scale

    mask = None
    side = mask_sidecar(path)
    if side.exists() and not path.name.endswith(".mask.png"):
        m = _read_raw(side)
        if m.ndim == 3:
            m = m.any(axis=2)
        if m.shape != data.shape[:2]:
            raise DataError(f"mask {side} has shape {m.shape}, image has {data.shape[:2]}")
        mask = m != 0
    return ImageF(data, mask)


def quantize(data: np.ndarray, bits: int = 8) -> np.ndarray:
    """Round-half-up quantization of [0, 1] samples to unsigned integers."""
    if bits not in (8, 16):
        raise DataError(f"bits must be 8 or 16, got {bits}")
    top = 255 if bits == 8 else 65535
    q = np.floor(np.clip(data, 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(img: ImageF, path: str | Path, bits: int = 8, write_mask: bool = True) -> None:
    """Write ``img`` as PNG/PGM/PPM (by extension) at 8 or 16 bits per sample.

    When the image carries a mask that is not full-frame and ``write_mask`` is
    set, the mask is written to the ``<stem>.mask.png`` sidecar.
    """
    path = Path(path)
    lo, hi = float(img.data.min()), float(img.data.max())
    if lo < -1e-12 or hi > 1 + 1e-12:
        raise DataError(f"samples outside [0, 1] ({lo:g}..{hi:g}); clamp before saving")
    q = quantize(img.data, bits)
    if q.ndim == 3:
        q = np.ascontiguousarray(q[:, :, ::-1])
    try:
        ok = cv2.imwrite(str(path), q)
    except cv2.error as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    if not ok:
        raise DataError(f"cannot write {path}")
    if write_mask and img.mask is not None and not img.mask.all():
        cv2.imwrite(str(mask_sidecar(path)), img.mask.astype(np.uint8) * 255)


# ------------------------------------------------------------ colour


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def to_luminance(img: ImageF) -> ImageF:
    """CIE L* (D65, sRGB primaries) rescaled to [0, 1]; grayscale passes through."""
    if img.channels == 1:
        return ImageF(img.data, img.mask)
    lin = srgb_to_linear(img.data)
    # Y row of the sRGB -> XYZ matrix; Yn = 1 for D65
    y = lin @ np.array([0.2126, 0.7152, 0.0722])
    eps = (6 / 29) ** 3
    f = np.where(y > eps, np.cbrt(y), y / (3 * (6 / 29) ** 2) + 4 / 29)
    lstar = 116 * f - 16
    return ImageF(np.clip(lstar / 100.0, 0.0, 1.0), img.mask)


# ------------------------------------------------------------ kernels


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """A correlation kernel with odd dimensions and a border mode."""

    weights: np.ndarray
    border: str = "reflect"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise DataError("kernel weights must be 2-D")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise DataError(f"even kernel dimension {w.shape}")
        if not np.all(np.isfinite(w)):
            raise DataError("kernel weights must be finite")
        if self.border not in _BORDER_MODES:
            raise DataError(f"unknown border mode {self.border!r}")
        object.__setattr__(self, "weights", w)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


def correlate(data: np.ndarray, weights: np.ndarray, border: str = "reflect") -> np.ndarray:
    """Array-level kernel application used by the image operations."""
    return ndimage.correlate(
        np.asarray(data, dtype=np.float64), weights, mode=_BORDER_MODES[border], cval=0.0
    )


def convolve2d(img: ImageF, k: KernelSpec) -> ImageF:
    """Apply ``k`` at every pixel (as a correlation: weight (i, j) hits the
    pixel at offset (i - h//2, j - w//2)). Output keeps the input mask."""
    require_gray(img, "convolve2d")
    return img.with_data(correlate(img.data, k.weights, k.border))


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def sobel_gradients(img: ImageF) -> tuple[ImageF, ImageF]:
    """Unnormalised 3x3 Sobel derivatives with reflect borders.

    gx is positive where intensity increases left to right, gy where it
    increases top to bottom, so transposing the input swaps gx and gy.
    """
    require_gray(img, "sobel_gradients")
    # separable form (difference, then 1-2-1 smoothing) so flat regions give exact zeros
    p = np.pad(img.data, 1, mode="symmetric")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    return img.with_data(gx), img.with_data(gy)


# ------------------------------------------------------------ saliency


def otsu_level(hist: np.ndarray) -> int:
    """Otsu threshold level for a 256-bin histogram.

    Returns t such that class 0 is levels <= t. When several consecutive levels
    share the maximum between-class variance (empty bins), the middle of that
    run is returned.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        return 0
    p = hist / total
    levels = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * levels)[:-1]
    mu_t = float(np.sum(p * levels))
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mu_t - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, 0.0)
    best = between.max()
    first = int(np.argmax(between))
    last = first
    while last + 1 < between.size and between[last + 1] == best:
        last += 1
    return first + (last - first) // 2


class Saliency(NamedTuple):
    magnitude: ImageF  # gradient magnitude, min-max scaled over valid pixels
    salient: np.ndarray  # bool, quantized magnitude above the Otsu level
    mask: np.ndarray  # bool, salient dilated by one 3x3 step
    threshold: float


def gradient_saliency(img: ImageF) -> Saliency:
    """Sobel magnitude, Otsu split and the dilated saliency mask.

    Magnitudes are quantized to 256 levels (round half up) before the Otsu
    search; ``salient`` is level > t and ``threshold`` is the boundary
    (t + 0.5) / 255 on the normalised scale. A zero gradient range yields an
    empty map with threshold 0.
    """
    require_gray(img, "gradient_saliency")
    gx, gy = sobel_gradients(img)
    mag = np.sqrt(gx.data**2 + gy.data**2)
    valid = img.valid
    empty = np.zeros(img.shape, dtype=bool)
    if not valid.any():
        return Saliency(img.with_data(np.zeros(img.shape)), empty, empty, 0.0)
    lo, hi = mag[valid].min(), mag[valid].max()
    if hi - lo <= 0:
        return Saliency(img.with_data(np.zeros(img.shape)), empty, empty.copy(), 0.0)
    norm = np.where(valid, (mag - lo) / (hi - lo), 0.0)
    levels = np.floor(norm * 255 + 0.5).astype(np.int64)
    hist = np.bincount(levels[valid], minlength=256)
    t = otsu_level(hist)
    salient = (levels > t) & valid
    mask = ndimage.binary_dilation(salient, structure=np.ones((3, 3), dtype=bool)) & valid
    return Saliency(img.with_data(norm), salient, mask, (t + 0.5) / 255.0)


# ------------------------------------------------------------ spectrum


class PowerSpectrum(NamedTuple):
    display: ImageF  # log10(1 + power), DC-centred, scaled to [0, 1]
    power: np.ndarray  # DC-centred |F|^2 / N of the mean-subtracted image
    profile: np.ndarray  # (n, 2) columns freq_norm, mean power


def psd_map(img: ImageF, nbins: int | None = None) -> PowerSpectrum:
    """Centred power spectrum and its radial average.

    Invalid pixels are set to the valid mean (zero after mean subtraction).
    ``freq_norm`` is radial frequency divided by Nyquist (0.5 cycles/pixel).
    """
    require_gray(img, "psd_map")
    valid = img.valid
    vals = img.data[valid]
    centred = np.where(valid, img.data - vals.mean(), 0.0) if np.ptp(vals) > 0 else np.zeros(img.shape)
    n = centred.size
    power = np.abs(np.fft.fft2(centred)) ** 2 / n
    power = np.fft.fftshift(power)
    logp = np.log10(1.0 + power)
    span = logp.max() - logp.min()
    display = (logp - logp.min()) / span if span > 0 else np.zeros_like(logp)

    h, w = img.shape
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    rho = np.hypot(*np.meshgrid(fy, fx, indexing="ij")) / 0.5
    if nbins is None:
        nbins = max(h, w) // 2
    edges = np.linspace(0.0, rho.max() + 1e-12, nbins + 1)
    idx = np.clip(np.digitize(rho.ravel(), edges) - 1, 0, nbins - 1)
    sums = np.bincount(idx, weights=power.ravel(), minlength=nbins)
    counts = np.bincount(idx, minlength=nbins)
    keep = counts > 0
    centres = 0.5 * (edges[:-1] + edges[1:])
    profile = np.column_stack([centres[keep], sums[keep] / counts[keep]])
    return PowerSpectrum(ImageF(display), power, profile)


def write_profile_csv(profile: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["freq_norm", "power"])
        for f, p in profile:
            out.writerow([f"{f:.10g}", f"{p:.10g}"])


# ------------------------------------------------------------ noise


@dataclass(frozen=True)
class NoiseSpec:
    """Composable noise layers: speckle, then additive Gaussian, then impulses."""

    gaussian: float = 0.0  # additive std
    impulse: float = 0.0  # probability a pixel is replaced by 1.0
    speckle: float = 0.0  # multiplicative std

    def __post_init__(self):
        for name in ("gaussian", "impulse", "speckle"):
            if getattr(self, name) < 0:
                raise DataError(f"noise parameter {name} must be >= 0")
        if self.impulse > 1:
            raise DataError("impulse density must be <= 1")


def add_synthetic_noise(img: ImageF, spec: NoiseSpec, seed: int) -> ImageF:
    rng = np.random.default_rng(seed)
    out = img.data.copy()
    if spec.speckle > 0:
        out = out * (1.0 + spec.speckle * rng.standard_normal(out.shape))
    if spec.gaussian > 0:
        out = out + spec.gaussian * rng.standard_normal(out.shape)
    if spec.impulse > 0:
        hit = rng.random(out.shape[:2]) < spec.impulse
        out = np.where(hit if out.ndim == 2 else hit[..., None], 1.0, out)
    return img.with_data(np.clip(out, 0.0, 1.0))
