"""Command-line entry point: ``grn prep|synth|train|eval|gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data or checkpoint error, 3 numeric
failure (non-finite training loss, or a gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import restore, save_checkpoint
from .data.dataset import MANIFEST_HEADER, PREP_MARKER, PairSampler, document_id, prepare_splits, scan_dataset
from .data.images import prepare_page, prepare_word, save_gray
from .data.synth import SyntheticCorpusSpec, generate_synthetic
from .errors import CheckpointError, DataError, GRNError, NumericAbort
from .model import VARIANTS, VariantConfig, build_model, stage_sizes
from .train import AdamState, TrainConfig, evaluate, fit

log = logging.getLogger("grn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.grn"
METRICS_NAME = "metrics.csv"


class UsageError(GRNError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def run_config(args: argparse.Namespace) -> dict:
    """The parsed options of this invocation, JSON-ready."""
    out = {}
    for key, value in sorted(vars(args).items()):
        if key == "handler":
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _write_manifest(path: Path, rows: list[tuple[str, str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(MANIFEST_HEADER)
        out.writerows(rows)


def cmd_prep(args) -> int:
    manifest = scan_dataset(args.input)
    out = Path(args.out)
    rows = []
    for n, entry in enumerate(manifest.entries):
        try:
            img = entry.load(manifest.root)
        except DataError as exc:
            raise DataError(f"{entry.path}: {exc}") from exc
        stem = Path(entry.path).stem
        doc = document_id(stem)
        target = out / entry.writer_id / ("pages" if entry.kind == "page" else "words")
        target.mkdir(parents=True, exist_ok=True)
        if entry.kind == "page":
            tiles = prepare_page(img, args.size, np.random.default_rng([args.seed, n]))
            for t, tile in enumerate(tiles):
                rel = f"{entry.writer_id}/pages/{doc}_{stem}_t{t}.png"
                save_gray(out / rel, tile)
                rows.append((entry.writer_id, "page", rel))
        else:
            rel = f"{entry.writer_id}/words/{doc}_{stem}.png"
            save_gray(out / rel, prepare_word(img, args.size))
            rows.append((entry.writer_id, "word", rel))
    _write_manifest(out / "manifest.csv", rows)
    counts = {"pages": len(manifest.of_kind("page")), "tiles": sum(r[1] == "page" for r in rows),
              "words": sum(r[1] == "word" for r in rows)}
    (out / PREP_MARKER).write_text(json.dumps({"run": run_config(args), "counts": counts}, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    print(f"{counts['pages']} pages -> {counts['tiles']} tiles, {counts['words']} words in {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec(args.writers, args.pages, args.words, args.size, args.seed)
    manifest = generate_synthetic(spec)
    out = Path(args.out)
    for entry in manifest.entries:
        path = out / entry.path
        path.parent.mkdir(parents=True, exist_ok=True)
        save_gray(path, entry.image)
    manifest.write_csv(out / "manifest.csv")
    (out / "synth.json").write_text(json.dumps({"run": run_config(args)}, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    counts = manifest.counts()
    print(f"{spec.num_writers} writers, {counts['page']} pages, {counts['word']} words in {out}")
    return EXIT_OK


def _check_last_batch(n: int, batch: int, input_size: int) -> None:
    """Refuse a split whose last batch would hold a single pair at a 1x1 final stage.

    Train-mode batch norm has no statistics for one value per channel.
    """
    if stage_sizes(input_size)[-1] == 1 and (batch == 1 or n % batch == 1):
        raise UsageError(f"{n} training words in batches of {batch} leave a batch of one, which batch norm "
                         f"cannot normalise at input size {input_size}; choose another --batch")


def cmd_train(args) -> int:
    if args.k is not None and args.variant != "net1":
        log.warning("--k only applies to --variant net1; ignoring it for %s", args.variant)
    k = args.k if args.k is not None and args.variant == "net1" else 0.5
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = scan_dataset(args.data)
    provenance = run_config(args)

    if args.resume:
        model, state, ckpt_config = restore(args.resume)
        start = int(ckpt_config.get("epoch", 0))
        if model.config.num_classes != manifest.num_classes:
            raise DataError(f"checkpoint has {model.config.num_classes} classes, dataset has {manifest.num_classes}")
        try:
            cfg = TrainConfig(**{**ckpt_config["train"], "epochs": args.epochs})
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{args.resume}: unusable training config ({exc})") from exc
    else:
        try:
            variant = VariantConfig(variant=args.variant, num_classes=manifest.num_classes, k=k,
                                    input_size=args.input_size, dropout_rate=args.dropout)
            cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr,
                              lr_half_period=args.lr_half_period, seed=args.seed, model=variant, data=str(args.data))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        model = build_model(variant, args.seed)
        state, start = AdamState(), 0

    # a resumed run keeps the original seed and input size, so its tiles match
    splits = prepare_splits(manifest, cfg.model.input_size, cfg.seed)
    _check_last_batch(splits["train"].size, cfg.batch_size, cfg.model.input_size)
    train_sampler = PairSampler(splits["train"], cfg.batch_size, cfg.seed)
    test_sampler = PairSampler(splits["test"], cfg.batch_size, cfg.seed, shuffle=False) if splits["test"].size else None
    if test_sampler is None:
        log.warning("no held-out documents: test metrics will be NaN")

    def checkpoint_config(epoch: int) -> dict:
        return {"epoch": epoch, "train": cfg.to_dict(), "model": asdict(cfg.model), "run": provenance}

    def on_epoch(m) -> bool:
        if args.checkpoint_every and (m.epoch + 1) % args.checkpoint_every == 0:
            save_checkpoint(out / f"epoch{m.epoch + 1:04d}.grn", model, state, checkpoint_config(m.epoch + 1))
        return False

    state, history = fit(model, cfg, train_sampler, test_sampler, state, start, out / METRICS_NAME,
                         on_epoch, provenance=provenance)
    save_checkpoint(out / CHECKPOINT_NAME, model, state, checkpoint_config(cfg.epochs))
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.6g} test_loss {last.test_loss:.6g} "
              f"top1 {last.top1:.4f} top5 {last.top5:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, config = restore(args.checkpoint)
    train = config.get("train", {})
    seed = train.get("seed", 0) if args.seed is None else args.seed
    batch = train.get("batch_size", 16) if args.batch is None else args.batch
    manifest = scan_dataset(args.data)
    if manifest.num_classes != model.config.num_classes:
        raise DataError(f"checkpoint has {model.config.num_classes} classes, dataset has {manifest.num_classes}")
    test = prepare_splits(manifest, model.config.input_size, seed)["test"]
    if test.size == 0:
        raise DataError(f"{args.data}: test split is empty (no writer has two page documents)")
    loss, top1, top5 = evaluate(model, PairSampler(test, batch, seed, shuffle=False))
    print("test_loss,top1,top5")
    print(f"{loss:.8g},{top1:.8g},{top5:.8g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .suites import TOLERANCE, cases, run_suite

    names = None
    if args.only:
        names = set(args.only.split(","))
        unknown = names - {c.name for c in cases()}
        if unknown:
            raise UsageError(f"unknown check(s): {', '.join(sorted(unknown))}")
    failed = []

    def report(name, err):
        ok = err < TOLERANCE
        if not ok:
            failed.append(name)
        print(f"{name:24s} {err:.3e} {'ok' if ok else 'FAIL'}", flush=True)

    run_suite(args.seed, names, report)
    if failed:
        print(f"{len(failed)} check(s) above {TOLERANCE:g}: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grn", description="Two-branch writer identification network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="cut pages into tiles and square words")
    p.add_argument("--in", dest="input", required=True, help="raw dataset root (<writer>/{pages,words}/)")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_prep)

    p = sub.add_parser("synth", help="write a synthetic handwriting corpus")
    p.add_argument("--writers", type=int, default=8)
    p.add_argument("--pages", type=int, default=4)
    p.add_argument("--words", type=int, default=20)
    p.add_argument("--size", type=int, default=192, help="page side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="grn")
    p.add_argument("--k", type=float, default=None, help="Net1 loss weight of the global branch")
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=90)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-half-period", type=int, default=30)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N epochs")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="pairing seed (default: the training seed)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", default=None, help="comma-separated subset of checks")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"grn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"grn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"grn {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
