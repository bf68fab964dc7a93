"""Seeded synthetic handwriting corpus for desk-scale experiments.

Each writer owns a small alphabet of random stroke glyphs and a style: pen
thickness, slant, baseline jitter, word spacing and line gap.  Words are
random glyph strings in that style; pages are lines of such words.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, ManifestEntry

THICKNESS_LEVELS = (1.0, 2.0, 3.0, 4.0)
SLANT_LEVELS = tuple(range(-30, 31, 6))
GLYPHS_PER_WRITER = 6
LETTER_HEIGHT = 14.0
LETTER_WIDTH = 9.0


@dataclass(frozen=True)
class WriterStyle:
    thickness: float
    slant: float
    jitter: float
    spacing: float
    line_gap: float
    glyphs: tuple


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_writers: int = 8
    pages_per_writer: int = 4
    words_per_writer: int = 20
    image_size: int = 192
    seed: int = 0

    def __post_init__(self):
        for name in ("num_writers", "pages_per_writer", "words_per_writer", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_writers > len(THICKNESS_LEVELS) * len(SLANT_LEVELS):
            raise ValueError(f"at most {len(THICKNESS_LEVELS) * len(SLANT_LEVELS)} distinct writer styles")


def writer_styles(spec: SyntheticCorpusSpec) -> list[WriterStyle]:
    """Styles on a (thickness, slant) grid so any two writers differ by 1px or 6 degrees."""
    rng = np.random.default_rng([spec.seed, 0])
    cells = list(itertools.product(THICKNESS_LEVELS, SLANT_LEVELS))
    picks = rng.permutation(len(cells))[:spec.num_writers]
    styles = []
    for cell in picks:
        thickness, slant = cells[cell]
        glyphs = tuple(_random_glyph(rng) for _ in range(GLYPHS_PER_WRITER))
        styles.append(WriterStyle(
            thickness=float(thickness),
            slant=float(slant),
            jitter=float(rng.uniform(0.5, 3.0)),
            spacing=float(rng.uniform(3.0, 10.0)),
            line_gap=float(rng.uniform(4.0, 14.0)),
            glyphs=glyphs,
        ))
    return styles


def _random_glyph(rng: np.random.Generator) -> np.ndarray:
    """A 3-5 point polyline in the unit letter box (x right, y up)."""
    n = int(rng.integers(3, 6))
    return np.column_stack([rng.uniform(0.0, 1.0, n), rng.uniform(0.0, 1.0, n)])


def _draw_segment(canvas: np.ndarray, p: np.ndarray, q: np.ndarray, thickness: float) -> None:
    """Anti-aliased thick segment, ink = clip(t/2 + 1/2 - distance, 0, 1)."""
    r = thickness / 2.0 + 1.0
    h, w = canvas.shape
    y0 = max(int(math.floor(min(p[1], q[1]) - r)), 0)
    y1 = min(int(math.ceil(max(p[1], q[1]) + r)) + 1, h)
    x0 = max(int(math.floor(min(p[0], q[0]) - r)), 0)
    x1 = min(int(math.ceil(max(p[0], q[0]) + r)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = q - p
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / denom, 0.0, 1.0)
    dist = np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))
    ink = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1, x0:x1], ink, out=canvas[y0:y1, x0:x1])


def _word_strokes(style: WriterStyle, letters: list[int], rng: np.random.Generator) -> tuple[list[np.ndarray], float]:
    """Polylines of one word in pixel units relative to its baseline origin, plus its advance width."""
    shear = math.tan(math.radians(style.slant))
    strokes = []
    x = 0.0
    for g in letters:
        pts = style.glyphs[g] + rng.normal(0.0, 0.05, style.glyphs[g].shape)
        px = x + pts[:, 0] * LETTER_WIDTH + pts[:, 1] * LETTER_HEIGHT * shear
        py = -pts[:, 1] * LETTER_HEIGHT
        strokes.append(np.column_stack([px, py]))
        x += LETTER_WIDTH + 0.25 * style.spacing
    return strokes, x


def _random_letters(rng: np.random.Generator) -> list[int]:
    return [int(i) for i in rng.integers(GLYPHS_PER_WRITER, size=int(rng.integers(3, 6)))]


def render_word(style: WriterStyle, rng: np.random.Generator) -> np.ndarray:
    strokes, advance = _word_strokes(style, _random_letters(rng), rng)
    pad = style.thickness + 4.0
    pts = np.concatenate(strokes)
    min_x, max_x = pts[:, 0].min(), pts[:, 0].max()
    w = int(math.ceil(max_x - min_x + 2 * pad))
    h = int(math.ceil(LETTER_HEIGHT * 1.2 + 2 * pad))
    canvas = np.zeros((h, w))
    origin = np.array([pad - min_x, h - pad - 0.1 * LETTER_HEIGHT])
    for s in strokes:
        s = s + origin
        for a, b in zip(s[:-1], s[1:]):
            _draw_segment(canvas, a, b, style.thickness)
    return canvas


def render_page(style: WriterStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.zeros((size, size))
    margin = 6.0
    line_height = LETTER_HEIGHT + style.line_gap
    baseline = margin + LETTER_HEIGHT
    while baseline < size - margin:
        x = margin
        while True:
            strokes, advance = _word_strokes(style, _random_letters(rng), rng)
            if x + advance > size - margin:
                break
            origin = np.array([x, baseline + rng.uniform(-style.jitter, style.jitter)])
            for s in strokes:
                s = s + origin
                for a, b in zip(s[:-1], s[1:]):
                    _draw_segment(canvas, a, b, style.thickness)
            x += advance + style.spacing
        baseline += line_height
    return canvas


def generate_synthetic(spec: SyntheticCorpusSpec) -> DatasetManifest:
    """In-memory manifest with ``pages_per_writer`` pages and ``words_per_writer`` words per writer.

    Page ``j`` is document ``d{j}``; word ``i`` belongs to document
    ``d{i mod pages_per_writer}`` so that holding out a document removes both
    its page and its words.
    """
    entries = []
    for w, style in enumerate(writer_styles(spec)):
        writer = f"w{w:03d}"
        rng = np.random.default_rng([spec.seed, 1, w])
        for j in range(spec.pages_per_writer):
            entries.append(ManifestEntry(writer, "page", f"{writer}/pages/d{j}.png",
                                         render_page(style, spec.image_size, rng), doc=f"d{j}"))
        for i in range(spec.words_per_writer):
            doc = f"d{i % spec.pages_per_writer}"
            entries.append(ManifestEntry(writer, "word", f"{writer}/words/{doc}_w{i:04d}.png",
                                         render_word(style, rng), doc=doc))
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(entries)
