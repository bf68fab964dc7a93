import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from grn.data import (
    DatasetManifest,
    ManifestEntry,
    PairSampler,
    SyntheticCorpusSpec,
    crop_margins,
    document_id,
    generate_synthetic,
    load_gray,
    pad_to_square,
    prepare_page,
    prepare_splits,
    prepare_word,
    read_manifest,
    resize,
    sample_pairs,
    save_gray,
    scan_dataset,
    split_page9,
    writer_styles,
)
from grn.data.images import tile_boxes
from grn.data.synth import render_page
from grn.errors import DataError

from test_ops import bilinear_reference


# decoding -------------------------------------------------------------------


def _png(path, pixels, mode="L"):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).convert(mode).save(path)
    return path


def test_load_gray_inversion(tmp_path):
    assert np.all(load_gray(_png(tmp_path / "w.png", np.full((3, 4), 255))) == 0)
    assert np.all(load_gray(_png(tmp_path / "b.png", np.zeros((3, 4)))) == 1)
    assert load_gray(_png(tmp_path / "g.png", np.full((2, 2), 128)))[0, 0] == pytest.approx(1 - 128 / 255)


def test_load_gray_converts_colour(tmp_path):
    img = load_gray(_png(tmp_path / "c.png", np.full((2, 2), 255), mode="RGB"))
    assert img.shape == (2, 2) and np.all(img == 0)


def test_pgm_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (5, 7)) * 255) / 255
    save_gray(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes()[:2] == b"P5"
    np.testing.assert_allclose(load_gray(tmp_path / "x.pgm"), img, atol=1e-12)


def test_rejected_inputs(tmp_path):
    with pytest.raises(DataError, match="missing.png"):
        load_gray(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="junk.png"):
        load_gray(tmp_path / "junk.png")
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "a.bmp")
    with pytest.raises(DataError, match="BMP"):
        load_gray(tmp_path / "a.bmp")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(DataError, match="P5"):
        load_gray(tmp_path / "p2.pgm")


# cropping, tiling, padding, resizing -------------------------------------------


def test_crop_single_pixel():
    img = np.zeros((10, 12))
    img[4, 7] = 1
    out = crop_margins(img)
    assert out.shape == (1, 1) and out[0, 0] == 1


def test_crop_without_border_is_identity(rng):
    img = rng.uniform(0.5, 1, (6, 5))
    assert crop_margins(img) is not None and np.array_equal(crop_margins(img), img)


def test_crop_blank_raises():
    with pytest.raises(DataError):
        crop_margins(np.zeros((4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_crop_matches_bounding_box_scan(h, w, seed):
    r = np.random.default_rng(seed)
    img = np.where(r.uniform(size=(h, w)) < 0.1, r.uniform(0.05, 1, (h, w)), 0.0)
    if not np.any(img >= 0.05):
        img[r.integers(h), r.integers(w)] = 1
    coords = [(i, j) for i in range(h) for j in range(w) if img[i, j] >= 0.05]
    top, bottom = min(c[0] for c in coords), max(c[0] for c in coords)
    left, right = min(c[1] for c in coords), max(c[1] for c in coords)
    np.testing.assert_array_equal(crop_margins(img), img[top:bottom + 1, left:right + 1])


def test_split9_exact_grid_without_jitter():
    img = np.arange(300 * 300, dtype=float).reshape(300, 300)
    tiles = split_page9(img, None, jitter=0.0)
    assert len(tiles) == 9
    for k, tile in enumerate(tiles):
        r, c = divmod(k, 3)
        np.testing.assert_array_equal(tile, img[100 * r:100 * r + 100, 100 * c:100 * c + 100])


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 400), st.integers(3, 400), st.integers(0, 2**31))
def test_split9_tiles_are_square_in_bounds_and_near_grid(h, w, seed):
    boxes = tile_boxes(h, w, np.random.default_rng(seed))
    plain = tile_boxes(h, w, None, 0.0)
    assert len(boxes) == 9
    ch, cw = h / 3, w / 3
    for (t, l, s), (t0, l0, s0) in zip(boxes, plain):
        assert s == s0 and s >= 1
        assert 0 <= t and t + s <= h and 0 <= l and l + s <= w
        assert abs(t - t0) <= round(0.1 * ch) + 1 and abs(l - l0) <= round(0.1 * cw) + 1
    for (t1, l1, s1), (t2, l2, s2) in itertools.combinations(boxes, 2):
        dy = min(t1 + s1, t2 + s2) - max(t1, t2)
        dx = min(l1 + s1, l2 + s2) - max(l1, l2)
        if dy > 0 and dx > 0:
            assert dy <= 2 * (round(0.1 * ch) + 1) or dx <= 2 * (round(0.1 * cw) + 1)


def test_split9_too_small():
    with pytest.raises(DataError):
        split_page9(np.ones((2, 5)))


def test_pad_to_square_examples(rng):
    sq = rng.uniform(size=(4, 4))
    np.testing.assert_array_equal(pad_to_square(sq), sq)
    img = rng.uniform(0.1, 1, (10, 20))
    out = pad_to_square(img)
    assert out.shape == (20, 20)
    assert np.all(out[:5] == 0) and np.all(out[15:] == 0)
    np.testing.assert_array_equal(out[5:15], img)
    assert np.count_nonzero(out) == np.count_nonzero(img)


def test_resize_examples(rng):
    img = rng.uniform(size=(7, 7))
    np.testing.assert_allclose(resize(img, 7), img, atol=1e-12)
    np.testing.assert_allclose(resize(np.full((5, 9), 0.3), 4), 0.3, atol=1e-15)
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    out = resize(board, 2)
    np.testing.assert_allclose(out, bilinear_reference(board, 2, 2), atol=1e-15)
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(64, 160), st.integers(64, 160), st.sampled_from([16, 32, 64]), st.integers(0, 2**31))
def test_word_prep_preserves_centroid_and_range(h, w, s, seed):
    # word crops are downscaled; enlarging clamps edges and shifts mass by a
    # fraction of an input pixel, which is not bounded in output pixels
    r = np.random.default_rng(seed)
    img = r.uniform(size=(h, w)) ** 4
    out = prepare_word(img, s)
    assert out.shape == (s, s) and out.min() >= 0 and out.max() <= 1
    sq = pad_to_square(img)
    n = sq.shape[0]
    for axis in (0, 1):
        grid_in = (np.arange(n) + 0.5) / n
        grid_out = (np.arange(s) + 0.5) / s
        c_in = (sq.sum(axis=1 - axis) * grid_in).sum() / sq.sum()
        c_out = (out.sum(axis=1 - axis) * grid_out).sum() / out.sum()
        assert abs(c_in - c_out) * s <= 1.0


def test_word_prep_keeps_aspect_ratio():
    img = np.zeros((10, 40))
    img[:, :] = 1.0  # a solid 1:4 bar
    out = prepare_word(img, 40)
    rows = np.flatnonzero(out.max(axis=1) > 0.5)
    cols = np.flatnonzero(out.max(axis=0) > 0.5)
    assert (cols[-1] - cols[0] + 1) / (rows[-1] - rows[0] + 1) == pytest.approx(4.0, rel=0.05)


def test_prepare_page_nine_squares(rng):
    page = np.zeros((120, 90))
    page[10:110, 5:85] = rng.uniform(size=(100, 80))
    tiles = prepare_page(page, 24, rng)
    assert len(tiles) == 9 and all(t.shape == (24, 24) for t in tiles)


# manifests and scanning ------------------------------------------------------------


@pytest.mark.parametrize("stem,doc", [("d1_w0003", "d1"), ("0001-3-cropped", "0001-3"), ("0001-3-2-5-word", "0001-3"),
                                      ("page7", "page7"), ("a_b_c", "a")])
def test_document_id(stem, doc):
    assert document_id(stem) == doc


def _write_layout(root, writers=("w1", "w2"), pages=2, words=2):
    for w in writers:
        for kind, count in (("pages", pages), ("words", words)):
            (root / w / kind).mkdir(parents=True, exist_ok=True)
            for i in range(count):
                img = np.zeros((30, 30))
                img[5:25, 5 + i:10 + i] = 1
                name = f"d{i % pages}_{kind[0]}{i}.png" if kind == "words" else f"d{i}.png"
                save_gray(root / w / kind / name, img)


def test_scan_dataset_layout(tmp_path):
    _write_layout(tmp_path)
    m = scan_dataset(tmp_path)
    assert m.writers == ["w1", "w2"] and m.class_index == {"w1": 0, "w2": 1}
    assert m.counts() == {"page": 4, "word": 4}
    assert [e.path for e in m.entries] == sorted(e.path for e in m.entries)
    assert [e.path for e in scan_dataset(tmp_path).entries] == [e.path for e in m.entries]
    assert m.test_documents() == {"w1": "d1", "w2": "d1"}


def test_scan_errors(tmp_path):
    with pytest.raises(DataError):
        scan_dataset(tmp_path)
    _write_layout(tmp_path)
    (tmp_path / "w3" / "pages").mkdir(parents=True)
    save_gray(tmp_path / "w3" / "pages" / "d0.png", np.ones((4, 4)))
    with pytest.raises(DataError, match="w3"):
        scan_dataset(tmp_path)


def test_manifest_csv_roundtrip(tmp_path):
    _write_layout(tmp_path)
    m = scan_dataset(tmp_path)
    m.write_csv(tmp_path / "manifest.csv")
    assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "writer_id,kind,path"
    again = read_manifest(tmp_path / "manifest.csv")
    assert [(e.writer_id, e.kind, e.path, e.doc) for e in again.entries] == \
        [(e.writer_id, e.kind, e.path, e.doc) for e in m.entries]


def test_manifest_requires_both_kinds():
    with pytest.raises(DataError, match="w9"):
        DatasetManifest([ManifestEntry("w9", "page", image=np.ones((3, 3)))])


def test_split_holds_out_last_document(tiny_corpus):
    held = tiny_corpus.test_documents()
    assert held == {w: "d2" for w in tiny_corpus.writers}
    splits = prepare_splits(tiny_corpus, 24, 0)
    assert splits["train"].tiles.shape == (3 * 2 * 9, 24, 24)
    assert splits["test"].tiles.shape == (3 * 9, 24, 24)
    assert splits["train"].size + splits["test"].size == 18
    assert splits["test"].size == 3 * 2


def test_single_document_writers_stay_in_training():
    img = np.ones((30, 30))
    m = DatasetManifest([ManifestEntry("a", "page", image=img, doc="x"), ManifestEntry("a", "word", image=img, doc="x")])
    assert m.test_documents() == {}


# pairing ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def train_split(tiny_corpus):
    return prepare_splits(tiny_corpus, 16, 0)["train"]


def test_pairs_share_writer_over_10k_draws(train_split):
    pairs = sample_pairs(train_split, 10_000, np.random.default_rng(0))

    def row(view, stack):
        # pairs hold views into the split arrays; recover the row from the offset
        offset = view.__array_interface__["data"][0] - stack.__array_interface__["data"][0]
        return offset // stack.strides[0]

    for p in pairs:
        assert train_split.tile_labels[row(p.page, train_split.tiles)] == p.label
        assert train_split.word_labels[row(p.word, train_split.words)] == p.label


def test_epoch_visits_each_word_once(train_split):
    sampler = PairSampler(train_split, 5, seed=1)
    words, tiles = sampler.epoch_pairs(3)
    assert sorted(words) == list(range(train_split.size))
    assert np.array_equal(train_split.word_labels[words], train_split.tile_labels[tiles])
    batches = list(sampler.batches(3))
    assert len(batches) == len(sampler) == -(-train_split.size // 5)
    pages, wimgs, labels = batches[0]
    assert pages.shape == (5, 1, 16, 16) and wimgs.shape == (5, 1, 16, 16)


def test_sampler_determinism(train_split):
    a, b = PairSampler(train_split, 4, seed=9), PairSampler(train_split, 4, seed=9)
    for e in range(3):
        for x, y in zip(a.epoch_pairs(e), b.epoch_pairs(e)):
            np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a.epoch_pairs(0)[0], a.epoch_pairs(1)[0])


def test_tiles_may_come_from_other_documents(tiny_corpus):
    split = prepare_splits(tiny_corpus, 16, 0)["train"]
    sampler = PairSampler(split, 4, seed=0)
    drawn = set()
    for e in range(20):
        drawn.update(sampler.epoch_pairs(e)[1].tolist())
    writer0 = np.flatnonzero(split.tile_labels == 0)
    assert set(writer0) <= drawn  # both training pages of writer 0 get used


# synthetic corpus ---------------------------------------------------------------------


def test_synthetic_counts():
    m = generate_synthetic(SyntheticCorpusSpec(8, 4, 20, 64, seed=0))
    assert len(m.writers) == 8 and m.counts() == {"page": 32, "word": 160}


def test_synthetic_determinism():
    a = generate_synthetic(SyntheticCorpusSpec(2, 2, 3, 64, seed=4))
    b = generate_synthetic(SyntheticCorpusSpec(2, 2, 3, 64, seed=4))
    for x, y in zip(a.entries, b.entries):
        assert x.path == y.path
        np.testing.assert_array_equal(x.image, y.image)


def test_synthetic_styles_are_separated():
    styles = writer_styles(SyntheticCorpusSpec(num_writers=44, seed=2))
    for a, b in itertools.combinations(styles, 2):
        assert abs(a.thickness - b.thickness) >= 1 or abs(a.slant - b.slant) >= 5


def test_thicker_pen_puts_down_more_ink():
    base = writer_styles(SyntheticCorpusSpec(num_writers=1, seed=2))[0]
    ink = {t: render_page(dataclasses.replace(base, thickness=t), 96, np.random.default_rng(0)).sum()
           for t in (1.0, 4.0)}
    assert ink[4.0] > 1.5 * ink[1.0]


def test_synthetic_images_in_range():
    m = generate_synthetic(SyntheticCorpusSpec(2, 1, 2, 64, seed=1))
    for e in m.entries:
        assert e.image.min() >= 0 and e.image.max() <= 1 and e.image.max() > 0.5


def test_invalid_spec():
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(num_writers=0)
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(num_writers=100)
