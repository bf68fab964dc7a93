"""Dataset manifests, the train/test split and the page/word pair sampler."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from ..errors import DataError
from .images import IMAGE_SUFFIXES, load_gray, prepare_page, prepare_word, resize

MANIFEST_HEADER = ("writer_id", "kind", "path")
PREP_MARKER = "prep.json"
KINDS = ("page", "word")
_KIND_DIRS = {"page": "pages", "word": "words"}
_CVL_DOC = re.compile(r"^(\d+-\d+)")


def document_id(stem: str) -> str:
    """Source document of an image, taken from its file stem.

    ``<doc>_<rest>`` names the document before the first underscore; CVL-style
    stems such as ``0001-3-cropped`` or ``0001-3-2-5-word`` use the leading
    ``writer-doc`` pair; anything else is its own document.
    """
    if "_" in stem:
        return stem.split("_", 1)[0]
    m = _CVL_DOC.match(stem)
    return m.group(1) if m else stem


@dataclass
class ManifestEntry:
    writer_id: str
    kind: str
    path: Optional[str] = None
    image: Optional[np.ndarray] = field(default=None, repr=False)
    doc: str = ""

    def load(self, root: Optional[Path]) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DataError(f"entry of writer {self.writer_id} has neither a path nor an image")
        return load_gray(root / self.path if root is not None else self.path)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Optional[Path] = None
    prepared: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def writers(self) -> list[str]:
        return sorted({e.writer_id for e in self.entries})

    @property
    def class_index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.writers)}

    @property
    def num_classes(self) -> int:
        return len(self.writers)

    def of_kind(self, kind: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind == kind]

    def counts(self) -> dict[str, int]:
        return {kind: len(self.of_kind(kind)) for kind in KINDS}

    def validate(self) -> None:
        if not self.entries:
            raise DataError("dataset is empty")
        for e in self.entries:
            if e.kind not in KINDS:
                raise DataError(f"writer {e.writer_id}: unknown entry kind {e.kind!r}")
        for writer in self.writers:
            kinds = {e.kind for e in self.entries if e.writer_id == writer}
            for kind in KINDS:
                if kind not in kinds:
                    raise DataError(f"writer {writer} has no {_KIND_DIRS[kind]}")

    def test_documents(self) -> dict[str, str]:
        """Held-out document per writer: the last page document, if a writer has two or more."""
        held = {}
        for writer in self.writers:
            docs = sorted({e.doc for e in self.entries if e.writer_id == writer and e.kind == "page"})
            if len(docs) >= 2:
                held[writer] = docs[-1]
        return held

    def split_of(self, entry: ManifestEntry, held: Optional[dict[str, str]] = None) -> str:
        held = self.test_documents() if held is None else held
        return "test" if held.get(entry.writer_id) == entry.doc else "train"

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(MANIFEST_HEADER)
            for e in self.entries:
                if e.path is None:
                    raise DataError("in-memory entries cannot be written to a manifest file")
                out.writerow((e.writer_id, e.kind, e.path))


def read_manifest(path: Union[str, Path], root: Optional[Path] = None) -> DatasetManifest:
    path = Path(path)
    root = path.parent if root is None else root
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: manifest must start with header {','.join(MANIFEST_HEADER)}")
    entries = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}:{n}: expected 3 fields, got {len(row)}")
        writer, kind, rel = row
        entries.append(ManifestEntry(writer, kind, rel, doc=document_id(Path(rel).stem)))
    return DatasetManifest(entries, root, prepared=(root / PREP_MARKER).is_file())


def scan_dataset(root_dir: Union[str, Path]) -> DatasetManifest:
    """Enumerate ``root/<writer>/{pages,words}/*.png|*.pgm`` in path order."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root does not exist")
    entries = []
    for writer_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for kind in KINDS:
            sub = writer_dir / _KIND_DIRS[kind]
            if not sub.is_dir():
                continue
            for f in sorted(sub.iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    rel = f.relative_to(root).as_posix()
                    entries.append(ManifestEntry(writer_dir.name, kind, rel, doc=document_id(f.stem)))
    if not entries:
        raise DataError(f"{root}: no writer directories with images found")
    writers = sorted({e.writer_id for e in entries} | {p.name for p in root.iterdir() if p.is_dir()})
    for writer in writers:
        kinds = {e.kind for e in entries if e.writer_id == writer}
        for kind in KINDS:
            if kind not in kinds:
                raise DataError(f"writer {writer} has no {_KIND_DIRS[kind]} (expected {root / writer / _KIND_DIRS[kind]})")
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(entries, root, prepared=(root / PREP_MARKER).is_file())


def read_prep_config(root: Union[str, Path]) -> Optional[dict]:
    marker = Path(root) / PREP_MARKER
    if not marker.is_file():
        return None
    return json.loads(marker.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# prepared tensors and pairing


@dataclass
class SplitData:
    """Processed ``s`` x ``s`` word images and page tiles of one split."""

    words: np.ndarray
    word_labels: np.ndarray
    tiles: np.ndarray
    tile_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.word_labels)


@dataclass
class SamplePair:
    word: np.ndarray
    page: np.ndarray
    label: int


def _stack(images: list[np.ndarray], s: int) -> np.ndarray:
    return np.stack(images) if images else np.zeros((0, s, s))


def prepare_splits(manifest: DatasetManifest, s: int, seed: int = 0) -> dict[str, SplitData]:
    """Materialise processed words and page tiles for the train and test splits.

    Raw pages are cropped and cut into nine jittered tiles once, here; a
    prepared dataset (see ``cmd_prep``) already stores tiles and words, which
    are only resized if their size differs from ``s``.
    """
    index = manifest.class_index
    held = manifest.test_documents()
    parts = {split: {"words": [], "wl": [], "tiles": [], "tl": []} for split in ("train", "test")}
    for n, e in enumerate(manifest.entries):
        img = e.load(manifest.root)
        part = parts[manifest.split_of(e, held)]
        label = index[e.writer_id]
        if e.kind == "word":
            word = img if manifest.prepared and img.shape == (s, s) else prepare_word(img, s)
            part["words"].append(word)
            part["wl"].append(label)
        elif manifest.prepared:
            part["tiles"].append(img if img.shape == (s, s) else resize(img, s))
            part["tl"].append(label)
        else:
            tiles = prepare_page(img, s, np.random.default_rng([seed, n]))
            part["tiles"].extend(tiles)
            part["tl"].extend([label] * len(tiles))
    out = {}
    for split, p in parts.items():
        out[split] = SplitData(_stack(p["words"], s), np.asarray(p["wl"], dtype=np.int64),
                               _stack(p["tiles"], s), np.asarray(p["tl"], dtype=np.int64))
    return out


class PairSampler:
    """Pairs every word with a random page tile from the same writer.

    Each epoch visits every word exactly once in a shuffled order; the tile is
    drawn uniformly among that writer's tiles, whatever document it came from.
    The stream for epoch ``e`` depends only on ``(seed, e)``.
    """

    def __init__(self, data: SplitData, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self._tiles_of = {}
        for label in np.unique(data.word_labels):
            tiles = np.flatnonzero(data.tile_labels == label)
            if tiles.size == 0:
                raise DataError(f"class {label} has words but no page tiles in this split")
            self._tiles_of[int(label)] = tiles

    def __len__(self) -> int:
        return -(-self.data.size // self.batch_size)

    def epoch_pairs(self, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        n = self.data.size
        order = rng.permutation(n) if self.shuffle else np.arange(n)
        tiles = np.array([rng.choice(self._tiles_of[int(self.data.word_labels[i])]) for i in order], dtype=np.int64)
        return order, tiles

    def batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield ``(pages, words, labels)`` with images shaped B x 1 x s x s."""
        words_idx, tiles_idx = self.epoch_pairs(epoch)
        d = self.data
        for start in range(0, len(words_idx), self.batch_size):
            w = words_idx[start:start + self.batch_size]
            t = tiles_idx[start:start + self.batch_size]
            yield d.tiles[t][:, None], d.words[w][:, None], d.word_labels[w]


def sample_pairs(data: SplitData, batch_size: int, rng: np.random.Generator) -> list[SamplePair]:
    """Draw ``batch_size`` independent same-writer (word, page tile) pairs."""
    if data.size == 0:
        raise DataError("cannot sample pairs from an empty split")
    out = []
    for i in rng.integers(data.size, size=batch_size):
        label = int(data.word_labels[i])
        choices = np.flatnonzero(data.tile_labels == label)
        if choices.size == 0:
            raise DataError(f"class {label} has no page tiles")
        out.append(SamplePair(data.words[i], data.tiles[rng.choice(choices)], label))
    return out
