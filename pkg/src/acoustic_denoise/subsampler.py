"""Neighbour subsampling: two half-resolution images from one noisy image.

Each 2x2 cell ``[[0, 1], [2, 3]]`` contributes one pixel to ``sub1`` and a
4-adjacent (never diagonal) pixel of the same cell to ``sub2``. The first
position is uniform over the cell and the second uniform over its two
neighbours, giving eight ordered pairs. Odd trailing rows/columns are dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .image import ImageF

# 4-adjacent partners of each intra-cell position
NEIGHBOURS = np.array([[1, 2], [0, 3], [0, 3], [1, 2]])
ADJACENT = {(0, 1), (1, 0), (0, 2), (2, 0), (1, 3), (3, 1), (2, 3), (3, 2)}


@dataclass(frozen=True, eq=False)
class CellChoices:
    """Per-cell ordered positions plus the source size they were drawn for."""

    first: np.ndarray  # (H//2, W//2) int8 in 0..3 -> sub1
    second: np.ndarray  # (H//2, W//2) int8 in 0..3 -> sub2
    source_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.first.shape


@dataclass(frozen=True, eq=False)
class SubsamplePair:
    sub1: ImageF
    sub2: ImageF
    choices: CellChoices
    seed: int


def draw_choices(height: int, width: int, rng: np.random.Generator) -> CellChoices:
    if height < 2 or width < 2:
        raise DataError(f"image must be at least 2x2, got {height}x{width}")
    h2, w2 = height // 2, width // 2
    first = rng.integers(0, 4, size=(h2, w2))
    pick = rng.integers(0, 2, size=(h2, w2))
    second = NEIGHBOURS[first, pick]
    return CellChoices(first.astype(np.int8), second.astype(np.int8), (height, width))


def cells(data: np.ndarray) -> np.ndarray:
    """View (H, W) data as (H//2, W//2, 4) cells, trailing odd row/col dropped."""
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    c = data[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    return c.transpose(0, 2, 1, 3).reshape(h2, w2, 4)


def _take(data: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.take_along_axis(cells(data), pos[..., None].astype(np.intp), axis=2)[..., 0]


def resample_with(img: ImageF, choices: CellChoices) -> tuple[ImageF, ImageF]:
    """Replay recorded cell choices on another image of the same size."""
    if img.shape != tuple(choices.source_shape):
        raise DataError(
            f"image {img.shape} does not match choice source {tuple(choices.source_shape)}"
        )
    if img.channels != 1:
        raise DataError("subsampling expects a single-channel image")
    s1 = _take(img.data, choices.first)
    s2 = _take(img.data, choices.second)
    if img.mask is None:
        return ImageF(s1), ImageF(s2)
    v = img.mask
    return ImageF(s1, _take(v, choices.first)), ImageF(s2, _take(v, choices.second))


def make_pair(img: ImageF, seed: int) -> SubsamplePair:
    choices = draw_choices(img.height, img.width, np.random.default_rng(seed))
    s1, s2 = resample_with(img, choices)
    return SubsamplePair(s1, s2, choices, seed)


def pair_mask(pair: SubsamplePair) -> np.ndarray:
    """Pixels usable in a loss: both chosen source pixels valid."""
    return pair.sub1.valid & pair.sub2.valid


def write_choices_csv(choices: CellChoices, path: str | Path) -> None:
    """One row per cell: ``row,col,first,second`` after a source-size header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["source_height", "source_width"])
        out.writerow(list(choices.source_shape))
        out.writerow(["row", "col", "first", "second"])
        for (r, c), a in np.ndenumerate(choices.first):
            out.writerow([r, c, int(a), int(choices.second[r, c])])


def read_choices_csv(path: str | Path) -> CellChoices:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    h, w = int(rows[1][0]), int(rows[1][1])
    first = np.zeros((h // 2, w // 2), dtype=np.int8)
    second = np.zeros_like(first)
    for r, c, a, b in rows[3:]:
        first[int(r), int(c)] = int(a)
        second[int(r), int(c)] = int(b)
    return CellChoices(first, second, (h, w))
