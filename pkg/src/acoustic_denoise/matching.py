"""Local feature matching and its evaluation on translated image pairs.

The default pipeline is a difference-of-Gaussians detector with a 4x4x8
gradient-histogram descriptor, ratio-test matching and mutual-best filtering.
Any object with ``detect``/``describe`` methods of the same signatures can be
passed as ``pipeline`` to :func:`evaluate_pair`.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import DataError
from .image import ImageF, require_gray

# ------------------------------------------------------------ translation pairs


def gen_translated_pair(
    img: ImageF, max_shift: int, seed: int, shift: tuple[int, int] | None = None
) -> tuple[ImageF, ImageF, int, int]:
    """Two crops of ``img`` related by an integer translation.

    A crop offset (dx, dy) is drawn uniformly from [-max_shift, max_shift]^2
    (or taken from ``shift``) and both crops cover the common overlap, so
    ``B(x, y) = A(x + dx, y + dy)``. The returned (tx, ty) = (-dx, -dy) is the
    displacement of scene content from A to B: a point at p in A sits at
    p + (tx, ty) in B.
    """
    h, w = img.shape
    if max_shift < 0 or max_shift >= min(h, w) / 4:
        raise DataError(f"max shift {max_shift} too large for a {w}x{h} image")
    if shift is None:
        rng = np.random.default_rng(seed)
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    else:
        dx, dy = shift
        if max(abs(dx), abs(dy)) > max_shift:
            raise DataError(f"shift {shift} exceeds max shift {max_shift}")
    ow, oh = w - abs(dx), h - abs(dy)
    ax, ay = max(0, -dx), max(0, -dy)
    bx, by = ax + dx, ay + dy

    def crop(x0, y0):
        mask = None if img.mask is None else img.mask[y0 : y0 + oh, x0 : x0 + ow]
        return ImageF(img.data[y0 : y0 + oh, x0 : x0 + ow], mask)

    return crop(ax, ay), crop(bx, by), -dx, -dy


# ------------------------------------------------------------ detector


@dataclass(frozen=True)
class SiftParams:
    octaves: int = 3
    scales: int = 3
    sigma0: float = 1.6
    contrast: float = 0.03
    edge_ratio: float = 10.0
    assumed_blur: float = 0.5
    ratio: float = 0.75
    tol: float = 3.0
    recall_mode: str = "max-keypoints"  # or "correspondences"


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    response: float
    octave: int = 0
    layer: int = 1
    angle: float = 0.0  # dominant gradient orientation, radians


@dataclass
class _Octave:
    gauss: list[np.ndarray]
    dog: np.ndarray  # (scales + 2, h, w)
    mag: list[np.ndarray] = field(default_factory=list)
    ori: list[np.ndarray] = field(default_factory=list)


def _gradients(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(g)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def build_pyramid(x: np.ndarray, p: SiftParams) -> list[_Octave]:
    s = p.scales
    k = 2.0 ** (1.0 / s)
    sig = [p.sigma0 * k**i for i in range(s + 3)]
    inc = [math.sqrt(max(p.sigma0**2 - p.assumed_blur**2, 0.01))]
    inc += [math.sqrt(sig[i] ** 2 - sig[i - 1] ** 2) for i in range(1, s + 3)]
    octaves = []
    base = ndimage.gaussian_filter(x, inc[0], mode="reflect")
    for o in range(p.octaves):
        if min(base.shape) < 8:
            break
        gauss = [base]
        for i in range(1, s + 3):
            gauss.append(ndimage.gaussian_filter(gauss[-1], inc[i], mode="reflect"))
        dog = np.stack([gauss[i + 1] - gauss[i] for i in range(s + 2)])
        octaves.append(_Octave(gauss, dog))
        base = gauss[s][::2, ::2]
    return octaves


_NEIGHBOURS = np.ones((3, 3, 3), dtype=bool)
_NEIGHBOURS[1, 1, 1] = False


def _derivatives(d: np.ndarray, l: int, r: int, c: int):
    grad = 0.5 * np.array(
        [d[l, r, c + 1] - d[l, r, c - 1], d[l, r + 1, c] - d[l, r - 1, c], d[l + 1, r, c] - d[l - 1, r, c]]
    )
    v = d[l, r, c]
    dxx = d[l, r, c + 1] + d[l, r, c - 1] - 2 * v
    dyy = d[l, r + 1, c] + d[l, r - 1, c] - 2 * v
    dss = d[l + 1, r, c] + d[l - 1, r, c] - 2 * v
    dxy = 0.25 * (d[l, r + 1, c + 1] - d[l, r + 1, c - 1] - d[l, r - 1, c + 1] + d[l, r - 1, c - 1])
    dxs = 0.25 * (d[l + 1, r, c + 1] - d[l + 1, r, c - 1] - d[l - 1, r, c + 1] + d[l - 1, r, c - 1])
    dys = 0.25 * (d[l + 1, r + 1, c] - d[l + 1, r - 1, c] - d[l - 1, r + 1, c] + d[l - 1, r - 1, c])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return grad, hess


def _refine(d: np.ndarray, l: int, r: int, c: int, p: SiftParams):
    """Quadratic sub-pixel/sub-scale fit; returns (l, r, c, offset, value) or None."""
    nl, h, w = d.shape
    for _ in range(5):
        grad, hess = _derivatives(d, l, r, c)
        try:
            off = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            value = d[l, r, c] + 0.5 * float(grad @ off)
            return l, r, c, off, value
        c += int(round(off[0]))
        r += int(round(off[1]))
        l += int(round(off[2]))
        if not (1 <= l < nl - 1 and 1 <= r < h - 1 and 1 <= c < w - 1):
            return None
    return None


def _orientation(mag: np.ndarray, ori: np.ndarray, r: int, c: int, sigma: float) -> float:
    sw = 1.5 * sigma
    rad = int(round(3 * sw))
    h, w = mag.shape
    y0, y1 = max(r - rad, 0), min(r + rad + 1, h)
    x0, x1 = max(c - rad, 0), min(c + rad + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sw * sw)) * mag[y0:y1, x0:x1]
    bins = np.floor(ori[y0:y1, x0:x1] * 36 / (2 * np.pi)).astype(int) % 36
    hist = np.bincount(bins.ravel(), weights=wgt.ravel(), minlength=36)
    hist = np.convolve(np.concatenate([hist[-2:], hist, hist[:2]]), [1, 4, 6, 4, 1], "valid") / 16
    i = int(np.argmax(hist))
    left, mid, right = hist[(i - 1) % 36], hist[i], hist[(i + 1) % 36]
    den = left - 2 * mid + right
    frac = 0.5 * (left - right) / den if den != 0 else 0.0
    return ((i + 0.5 + frac) * 2 * np.pi / 36) % (2 * np.pi)


class DogSift:
    """Difference-of-Gaussians detector and 128-d gradient histogram descriptor."""

    def __init__(self, params: SiftParams | None = None):
        self.params = params or SiftParams()
        self._cache: dict[int, tuple[ImageF, list[_Octave]]] = {}

    def _pyramid(self, img: ImageF) -> list[_Octave]:
        hit = self._cache.get(id(img))
        if hit is not None and hit[0] is img:
            return hit[1]
        octs = build_pyramid(img.data, self.params)
        for o in octs:
            pairs = [_gradients(g) for g in o.gauss]
            o.mag = [m for m, _ in pairs]
            o.ori = [a for _, a in pairs]
        self._cache = {id(img): (img, octs)}
        return octs

    def detect(self, img: ImageF) -> list[Keypoint]:
        require_gray(img, "detect")
        if min(img.shape) < 32:
            raise DataError("detection needs images of at least 32x32")
        p = self.params
        valid = img.valid
        edge_lim = (p.edge_ratio + 1) ** 2 / p.edge_ratio
        kps = []
        for o, octv in enumerate(self._pyramid(img)):
            d = octv.dog
            nl, h, w = d.shape
            mx = ndimage.maximum_filter(d, footprint=_NEIGHBOURS, mode="nearest")
            mn = ndimage.minimum_filter(d, footprint=_NEIGHBOURS, mode="nearest")
            cand = ((d > mx) | (d < mn)) & (np.abs(d) >= 0.5 * p.contrast)
            cand[0] = cand[-1] = False
            cand[:, :1] = cand[:, -1:] = False
            cand[:, :, :1] = cand[:, :, -1:] = False
            for l, r, c in zip(*np.nonzero(cand)):
                res = _refine(d, int(l), int(r), int(c), p)
                if res is None:
                    continue
                l2, r2, c2, off, value = res
                if abs(value) < p.contrast:
                    continue
                _, hess = _derivatives(d, l2, r2, c2)
                tr = hess[0, 0] + hess[1, 1]
                det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
                if det <= 0 or tr * tr / det >= edge_lim:
                    continue
                f = 2.0**o
                x, y = (c2 + off[0]) * f, (r2 + off[1]) * f
                xi, yi = int(round(x)), int(round(y))
                if not (0 <= xi < img.width and 0 <= yi < img.height) or not valid[yi, xi]:
                    continue
                sigma_oct = p.sigma0 * 2.0 ** ((l2 + off[2]) / p.scales)
                angle = _orientation(octv.mag[l2], octv.ori[l2], r2, c2, sigma_oct)
                kps.append(Keypoint(x, y, sigma_oct * f, float(abs(value)), o, l2, angle))
        kps.sort(key=lambda k: (k.y, k.x, -k.response))
        return kps

    def describe(self, img: ImageF, kps: Sequence[Keypoint]) -> tuple[np.ndarray, list[Keypoint], int]:
        """Descriptors for ``kps``; returns (descriptors, kept keypoints, dropped count).

        Keypoints whose sampling window leaves the image are dropped.
        """
        require_gray(img, "describe")
        octs = self._pyramid(img)
        d = 4
        descs, kept = [], []
        for kp in kps:
            octv = octs[kp.octave]
            mag, ori = octv.mag[kp.layer], octv.ori[kp.layer]
            h, w = mag.shape
            f = 2.0**kp.octave
            xo, yo = kp.x / f, kp.y / f
            sigma_oct = kp.scale / f
            hw = 3.0 * sigma_oct
            rad = int(round(hw * math.sqrt(2) * (d + 1) / 2))
            ci, ri = int(round(xo)), int(round(yo))
            if ri - rad < 0 or ri + rad >= h or ci - rad < 0 or ci + rad >= w:
                continue
            yy, xx = np.mgrid[-rad : rad + 1, -rad : rad + 1].astype(np.float64)
            cos_t, sin_t = math.cos(kp.angle), math.sin(kp.angle)
            xr = (xx * cos_t + yy * sin_t) / hw
            yr = (-xx * sin_t + yy * cos_t) / hw
            rbin = yr + d / 2 - 0.5
            cbin = xr + d / 2 - 0.5
            inside = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
            m = mag[ri - rad : ri + rad + 1, ci - rad : ci + rad + 1][inside]
            a = (ori[ri - rad : ri + rad + 1, ci - rad : ci + rad + 1][inside] - kp.angle) % (2 * np.pi)
            rb, cb = rbin[inside], cbin[inside]
            ob = a * 8 / (2 * np.pi)
            wgt = m * np.exp(-(xr[inside] ** 2 + yr[inside] ** 2) / (2 * (d / 2) ** 2))
            hist = np.zeros((d + 2, d + 2, 8))
            r0, c0, o0 = np.floor(rb).astype(int), np.floor(cb).astype(int), np.floor(ob).astype(int)
            fr, fc, fo = rb - r0, cb - c0, ob - o0
            for dr in (0, 1):
                wr = fr if dr else 1 - fr
                for dc in (0, 1):
                    wc = fc if dc else 1 - fc
                    for do in (0, 1):
                        wo = fo if do else 1 - fo
                        np.add.at(hist, (r0 + dr + 1, c0 + dc + 1, (o0 + do) % 8), wgt * wr * wc * wo)
            vec = hist[1 : d + 1, 1 : d + 1].ravel()
            norm = np.linalg.norm(vec)
            if norm == 0:
                continue
            vec = np.minimum(vec / norm, 0.2)
            vec /= np.linalg.norm(vec)
            descs.append(vec)
            kept.append(kp)
        arr = np.array(descs) if descs else np.zeros((0, d * d * 8))
        return arr, kept, len(kps) - len(kept)


class Pipeline(Protocol):
    def detect(self, img: ImageF) -> list[Keypoint]: ...

    def describe(self, img: ImageF, kps: Sequence[Keypoint]) -> tuple[np.ndarray, list[Keypoint], int]: ...


def detect(img: ImageF, params: SiftParams | None = None) -> list[Keypoint]:
    return DogSift(params).detect(img)


def describe(img: ImageF, kps: Sequence[Keypoint], params: SiftParams | None = None):
    return DogSift(params).describe(img, kps)


# ------------------------------------------------------------ matching


def match(d1: np.ndarray, d2: np.ndarray, ratio: float = 0.75) -> np.ndarray:
    """Ratio-test matches kept only when mutually nearest; (n, 2) index array."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if len(d1) < 2 or len(d2) < 2:
        return np.zeros((0, 2), dtype=int)
    sq = (d1**2).sum(1)[:, None] + (d2**2).sum(1)[None, :] - 2 * d1 @ d2.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    order = np.argsort(dist, axis=1, kind="stable")
    nn1, nn2 = order[:, 0], order[:, 1]
    rows = np.arange(len(d1))
    best, second = dist[rows, nn1], dist[rows, nn2]
    back = np.argmin(dist, axis=0)
    keep = (best < ratio * second) & (back[nn1] == rows)
    return np.column_stack([rows[keep], nn1[keep]]).astype(int)


@dataclass
class MatchEval:
    keypoints1: int
    keypoints2: int
    putative: int
    correct: int
    recall: float
    precision: float
    time_ms: float = 0.0
    tx: int = 0
    ty: int = 0
    tol: float = 3.0
    dropped1: int = 0
    dropped2: int = 0
    flags: tuple[str, ...] = ()


def recall_precision(
    keypoints1: int, keypoints2: int, putative: int, correct: int, correspondences: int | None = None
) -> tuple[float, float, tuple[str, ...]]:
    """Recall = correct / max(kps1, kps2) (or / ``correspondences`` when
    given); precision = correct / putative. Zero denominators give 0 + a flag."""
    if correct > putative:
        raise DataError("correct matches cannot exceed putative matches")
    flags = []
    denom = max(keypoints1, keypoints2) if correspondences is None else correspondences
    if denom > 0:
        recall = correct / denom
    else:
        recall = 0.0
        flags.append("recall-undefined")
    if putative > 0:
        precision = correct / putative
    else:
        precision = 0.0
        flags.append("precision-undefined")
    return min(recall, 1.0), precision, tuple(flags)


def evaluate_pair(
    img_a: ImageF,
    img_b: ImageF,
    tx: int,
    ty: int,
    tol: float | None = None,
    params: SiftParams | None = None,
    pipeline: Pipeline | None = None,
) -> MatchEval:
    p = params or SiftParams()
    tol = p.tol if tol is None else tol
    pipe_a = pipeline or DogSift(p)
    pipe_b = pipeline or DogSift(p)
    t0 = time.perf_counter()
    d1, k1, drop1 = pipe_a.describe(img_a, pipe_a.detect(img_a))
    d2, k2, drop2 = pipe_b.describe(img_b, pipe_b.detect(img_b))
    pairs = match(d1, d2, p.ratio)
    elapsed = (time.perf_counter() - t0) * 1000.0

    correct = 0
    for i, j in pairs:
        if math.hypot(k2[j].x - (k1[i].x + tx), k2[j].y - (k1[i].y + ty)) <= tol:
            correct += 1
    corr = None
    if p.recall_mode == "correspondences":
        corr = 0
        if k1 and k2:
            b = np.array([[k.x, k.y] for k in k2])
            for k in k1:
                if np.min(np.hypot(b[:, 0] - (k.x + tx), b[:, 1] - (k.y + ty))) <= tol:
                    corr += 1
    elif p.recall_mode != "max-keypoints":
        raise DataError(f"unknown recall mode {p.recall_mode!r}")
    recall, precision, flags = recall_precision(len(k1), len(k2), len(pairs), correct, corr)
    return MatchEval(
        len(k1), len(k2), len(pairs), correct, recall, precision, elapsed,
        tx, ty, tol, drop1, drop2, flags,
    )


@dataclass
class MatchSummary:
    rows: list[MatchEval]
    mean_recall: float
    mean_precision: float
    mean_time_ms: float


def evaluate_set(
    pairs: Sequence[tuple[ImageF, ImageF, int, int]],
    params: SiftParams | None = None,
    jobs: int = 1,
) -> MatchSummary:
    if not pairs:
        raise DataError("no image pairs to evaluate")

    def one(pair):
        a, b, tx, ty = pair
        return evaluate_pair(a, b, tx, ty, params=params)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, pairs))
    else:
        rows = [one(pr) for pr in pairs]
    return MatchSummary(
        rows,
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.time_ms for r in rows])),
    )


def write_match_csv(summary: MatchSummary, path: str | Path, timing: bool = True) -> None:
    """``pair,kps1,kps2,putative,correct,recall,precision,time_ms`` plus a mean row.

    With ``timing=False`` the time column is written as 0 so output is
    reproducible byte for byte.
    """
    def t(v):
        return f"{v:.3f}" if timing else "0"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["pair", "kps1", "kps2", "putative", "correct", "recall", "precision", "time_ms"])
        for i, r in enumerate(summary.rows):
            out.writerow([i, r.keypoints1, r.keypoints2, r.putative, r.correct,
                          f"{r.recall:.10g}", f"{r.precision:.10g}", t(r.time_ms)])
        rows = summary.rows
        out.writerow(["mean", f"{np.mean([r.keypoints1 for r in rows]):.10g}",
                      f"{np.mean([r.keypoints2 for r in rows]):.10g}",
                      f"{np.mean([r.putative for r in rows]):.10g}",
                      f"{np.mean([r.correct for r in rows]):.10g}",
                      f"{summary.mean_recall:.10g}", f"{summary.mean_precision:.10g}",
                      t(summary.mean_time_ms)])


def draw_matches(
    img_a: ImageF, img_b: ImageF, k1: Sequence[Keypoint], k2: Sequence[Keypoint],
    pairs: np.ndarray, tx: int, ty: int, tol: float, path: str | Path,
) -> None:
    """Side-by-side PNG: correct matches in white, incorrect in mid-gray."""
    a = np.floor(np.clip(img_a.data, 0, 1) * 255 * 0.6 + 0.5).astype(np.uint8)
    b = np.floor(np.clip(img_b.data, 0, 1) * 255 * 0.6 + 0.5).astype(np.uint8)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1]), dtype=np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1]:] = b
    for i, j in pairs:
        ok = math.hypot(k2[j].x - (k1[i].x + tx), k2[j].y - (k1[i].y + ty)) <= tol
        p1 = (int(round(k1[i].x)), int(round(k1[i].y)))
        p2 = (int(round(k2[j].x)) + a.shape[1], int(round(k2[j].y)))
        cv2.line(canvas, p1, p2, 255 if ok else 110, 1, lineType=cv2.LINE_8)
    cv2.imwrite(str(path), canvas)
