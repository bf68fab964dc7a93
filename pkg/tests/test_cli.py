import json

import numpy as np
import pytest

from grn import ops
from grn.cli import main
from grn.data import read_manifest, scan_dataset
from grn.data.images import load_gray
from grn.tensor import make_result
from grn.train import METRICS_HEADER, read_metrics


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--writers", "3", "--pages", "3", "--words", "4", "--size", "96", "--seed", "2",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus), "--input-size", "32", "--epochs", "2", "--batch", "3",
                 "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_writes_corpus(corpus):
    m = scan_dataset(corpus)
    assert len(m.writers) == 3 and m.counts() == {"page": 9, "word": 12}
    assert read_manifest(corpus / "manifest.csv").counts() == m.counts()
    assert json.loads((corpus / "synth.json").read_text())["run"]["seed"] == 2


def test_synth_is_deterministic(corpus, tmp_path):
    assert main(["synth", "--writers", "3", "--pages", "3", "--words", "4", "--size", "96", "--seed", "2",
                 "--out", str(tmp_path)]) == 0
    for entry in scan_dataset(corpus).entries:
        assert (tmp_path / entry.path).read_bytes() == (corpus / entry.path).read_bytes()


def test_prep_tiles_pages_and_is_reproducible(corpus, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["prep", "--in", str(corpus), "--out", str(out), "--size", "32", "--seed", "0"]) == 0
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    m = scan_dataset(a)
    assert m.prepared and m.counts() == {"page": 9 * 9, "word": 12}
    assert all(load_gray(a / e.path).shape == (32, 32) for e in m.entries)
    counts = json.loads((a / "prep.json").read_text())["counts"]
    assert counts == {"pages": 9, "tiles": 81, "words": 12}
    # the document id survives, so the held-out split is unchanged
    assert m.test_documents() == scan_dataset(corpus).test_documents()


def test_prep_missing_words_names_writer(tmp_path, capsys):
    (tmp_path / "raw" / "w07" / "pages").mkdir(parents=True)
    img = np.zeros((20, 20), dtype=np.uint8)
    from PIL import Image

    Image.fromarray(img).save(tmp_path / "raw" / "w07" / "pages" / "d0.png")
    assert main(["prep", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == 2
    assert "w07" in capsys.readouterr().err


def test_train_writes_metrics_and_checkpoint(trained):
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ") and lines[1] == METRICS_HEADER
    config = json.loads(lines[0][len("# config: "):])
    assert config["train"]["seed"] == 1 and config["run"]["command"] == "train"
    rows = read_metrics(trained / "metrics.csv")
    assert [r.epoch for r in rows] == [0, 1]
    assert all(np.isfinite([r.train_loss, r.test_loss, r.top1, r.top5]).all() for r in rows)
    assert (trained / "checkpoint.grn").is_file()


def test_eval_reproduces_last_metrics(corpus, trained, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.grn"), "--data", str(corpus)]) == 0
    header, values = capsys.readouterr().out.strip().splitlines()
    assert header == "test_loss,top1,top5"
    loss, top1, top5 = map(float, values.split(","))
    last = read_metrics(trained / "metrics.csv")[-1]
    assert loss == pytest.approx(last.test_loss, rel=1e-6)
    assert (top1, top5) == pytest.approx((last.top1, last.top5))


def test_eval_corrupt_checkpoint(corpus, trained, tmp_path):
    bad = tmp_path / "bad.grn"
    bad.write_bytes((trained / "checkpoint.grn").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(bad), "--data", str(corpus)]) == 2
    bad.write_bytes(b"JUNK")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(corpus)]) == 2


def test_train_k_with_other_variant_warns(corpus, tmp_path, caplog):
    assert main(["train", "--data", str(corpus), "--input-size", "32", "--epochs", "1", "--batch", "3",
                 "--variant", "net2", "--k", "0.3", "--out", str(tmp_path)]) == 0
    assert any("--k" in r.getMessage() for r in caplog.records)


def test_usage_errors(corpus, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path)])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1
    assert main(["train", "--data", str(corpus), "--variant", "net1", "--k", "1.5", "--out", str(tmp_path)]) == 1
    assert main(["gradcheck", "--only", "no_such_op"]) == 1


def test_train_refuses_single_pair_batch(corpus, tmp_path, capsys):
    # 9 training words in batches of 4 end with one pair, and the last stage is 1x1 at 32
    assert main(["train", "--data", str(corpus), "--input-size", "32", "--batch", "4", "--out", str(tmp_path)]) == 1
    assert "batch of one" in capsys.readouterr().err


def test_train_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--only", "relu,fuse"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == ["relu", "fuse"]
    assert all(line.split()[-1] == "ok" for line in out)


def test_gradcheck_catches_wrong_backward(monkeypatch, capsys):
    real = ops.sigmoid

    def broken(x):
        out = real(x)
        s = out.data
        return make_result(s, (x,), lambda g: (1.01 * g * s * (1.0 - s),))

    monkeypatch.setattr(ops, "sigmoid", broken)
    assert main(["gradcheck", "--only", "sigmoid"]) == 3
    assert "FAIL" in capsys.readouterr().out
