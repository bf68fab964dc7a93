"""Grayscale image I/O and the page / word preprocessing steps.

Images are 2-D float64 arrays in [0, 1] with ink toward 1 and blank paper at
0, so padding with zeros means padding with paper.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DataError
from ..ops import interp_matrix

IMAGE_SUFFIXES = (".png", ".pgm")
DEFAULT_TAU = 0.05
PAGE_JITTER = 0.10

PathLike = Union[str, Path]


def load_gray(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such image file")
    try:
        with open(path, "rb") as fh:
            magic = fh.read(2)
        with Image.open(path) as img:
            fmt = img.format
            if fmt == "PPM":
                if magic != b"P5":
                    raise DataError(f"{path}: only binary PGM (P5) is supported, found {magic!r}")
            elif fmt != "PNG":
                raise DataError(f"{path}: unsupported image format {fmt}")
            if img.mode not in ("1", "L", "LA", "P", "RGB", "RGBA"):
                raise DataError(f"{path}: unsupported pixel mode {img.mode} (8-bit images only)")
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return 1.0 - arr / 255.0


def save_gray(path: PathLike, img: np.ndarray) -> None:
    """Write an ink-positive image as 8-bit grayscale (PNG or PGM by suffix)."""
    path = Path(path)
    pixels = np.round((1.0 - np.clip(img, 0.0, 1.0)) * 255.0).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(pixels).save(path, format=fmt)


def crop_margins(img: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Smallest bounding box holding every pixel >= ``tau``."""
    ink = img >= tau
    rows = np.flatnonzero(ink.any(axis=1))
    if rows.size == 0:
        raise DataError(f"blank image: no pixel reaches the ink threshold {tau}")
    cols = np.flatnonzero(ink.any(axis=0))
    return img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def tile_boxes(h: int, w: int, rng: Optional[np.random.Generator] = None,
               jitter: float = PAGE_JITTER) -> list[tuple[int, int, int]]:
    """(top, left, side) of the nine square tiles of an ``h`` x ``w`` page.

    The page is cut by a 3x3 grid; each cell origin moves by up to ``jitter``
    of the cell size (kept inside the page) and the largest square centred in
    the moved cell becomes the tile.
    """
    if h < 3 or w < 3:
        raise DataError(f"page of size {h}x{w} is too small to split into 3x3 tiles")
    ys = np.round(np.linspace(0, h, 4)).astype(int)
    xs = np.round(np.linspace(0, w, 4)).astype(int)
    boxes = []
    for r in range(3):
        for c in range(3):
            top, left = ys[r], xs[c]
            ch, cw = ys[r + 1] - top, xs[c + 1] - left
            if jitter > 0 and rng is not None:
                top += int(round(rng.uniform(-jitter, jitter) * ch))
                left += int(round(rng.uniform(-jitter, jitter) * cw))
                top = min(max(top, 0), h - ch)
                left = min(max(left, 0), w - cw)
            side = min(ch, cw)
            boxes.append((top + (ch - side) // 2, left + (cw - side) // 2, side))
    return boxes


def split_page9(img: np.ndarray, rng: Optional[np.random.Generator] = None,
                jitter: float = PAGE_JITTER) -> list[np.ndarray]:
    h, w = img.shape
    return [img[t:t + s, l:l + s] for t, l, s in tile_boxes(h, w, rng, jitter)]


def pad_to_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    side = max(h, w)
    out = np.zeros((side, side), dtype=np.float64)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def resize(img: np.ndarray, s: int) -> np.ndarray:
    """Bilinear resampling to ``s`` x ``s`` with half-pixel centres."""
    if s < 1:
        raise ValueError(f"target size must be >= 1, got {s}")
    h, w = img.shape
    out = interp_matrix(h, s) @ img @ interp_matrix(w, s).T
    return np.clip(out, 0.0, 1.0)


def prepare_page(img: np.ndarray, s: int, rng: Optional[np.random.Generator] = None,
                 tau: float = DEFAULT_TAU, jitter: float = PAGE_JITTER) -> list[np.ndarray]:
    """Crop blank margins, cut nine square tiles and resize each to ``s``."""
    return [resize(tile, s) for tile in split_page9(crop_margins(img, tau), rng, jitter)]


def prepare_word(img: np.ndarray, s: int) -> np.ndarray:
    return resize(pad_to_square(img), s)
