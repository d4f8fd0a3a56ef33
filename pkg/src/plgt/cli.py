"""Command-line entry point: ``plgt <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing or malformed files included), 4 numeric or training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bleu import corpus_bleu
from .config import dumps_json, load_run_config, parse_config_text, table1_overrides
from .decoding import translate
from .deductive import capture, export_bundle
from .exceptions import CheckpointError, ConfigError, DataError, TrainingError
from .model import count_parameters, param_specs
from .textpipe import Vocabulary, normalize_text, read_corpus, train_vocab
from .trainkit import Trainer

log = logging.getLogger("plgt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


def _read_lines(path: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    return text.splitlines()


def _write_lines(path: str | None, lines: list[str]) -> None:
    body = "".join(line + "\n" for line in lines)
    if path is None or path == "-":
        sys.stdout.write(body)
    else:
        Path(path).write_text(body, encoding="utf-8")


def _load_trainer(path: str) -> Trainer:
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return Trainer.load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    corpus = read_corpus(args.corpus, lowercase=args.lowercase)
    texts = corpus.sources() if args.side == "src" else corpus.targets()
    vocab = train_vocab(texts, args.cap, args.min_freq)
    vocab.save(args.out)
    print(f"wrote {vocab.size} tokens to {args.out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    overrides: dict = {}
    if args.table1_row:
        overrides.update(table1_overrides(args.table1_row))
    if args.attention:
        overrides["attention"] = args.attention
        if args.attention == "sdpa" and not args.table1_row:
            overrides.update(num_layers=4, num_heads=8)
    for item in args.set or []:
        overrides.update(parse_config_text(item))
    for key in ("epochs", "seed"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.data:
        overrides["train_path"] = args.data
    if args.val:
        overrides["val_path"] = args.val
    if args.out:
        overrides["ckpt_dir"] = args.out
    return overrides


def cmd_train(args) -> int:
    run = load_run_config(args.config, _train_overrides(args))
    if not run.train_path:
        raise ConfigError("no training data: pass --data or set train_path in the config")
    train_set = read_corpus(run.train_path, "train", run.lowercase)
    val_set = read_corpus(run.val_path, "val", run.lowercase) if run.val_path else None
    vs = Vocabulary.load(args.src_vocab) if args.src_vocab else train_vocab(
        train_set.sources(), run.src_vocab_cap, run.min_freq)
    vt = Vocabulary.load(args.tgt_vocab) if args.tgt_vocab else train_vocab(
        train_set.targets(), run.tgt_vocab_cap, run.min_freq)
    model_cfg = run.model_config(vs.size, vt.size)
    print(run.dumps(), end="")
    print(f"# parameters = {count_parameters(model_cfg)}")
    if args.dry_run:
        param_specs(model_cfg)
        return EXIT_OK
    out = Path(run.ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(run.dumps(), encoding="utf-8")
    trainer = Trainer.create(run, vs, vt)
    try:
        trainer.fit(train_set, val_set, run.epochs, out)
    finally:
        trainer.log.write_csv(out / "train_log.csv")
    for e in trainer.log:
        print("epoch {} train_loss {:.4f} train_acc {:.4f} val_loss {:.4f} val_acc {:.4f}".format(*e.row()))
    return EXIT_OK


def cmd_translate(args) -> int:
    tr = _load_trainer(args.ckpt)
    beam = tr.run.beam_width if args.beam is None else args.beam
    alpha = tr.run.alpha if args.alpha is None else args.alpha
    lines = _read_lines(args.input)
    out = translate(tr.params, tr.model_cfg, tr.vocab_src, tr.vocab_tgt, lines, beam=beam, alpha=alpha,
                    max_extra=tr.run.max_extra, lowercase=tr.run.lowercase)
    _write_lines(args.out, out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = corpus_bleu(_read_lines(args.hyp), _read_lines(args.ref))
    print(report.format())
    return EXIT_OK


def cmd_inspect(args) -> int:
    tr = _load_trainer(args.ckpt)
    src = tr.vocab_src.encode(normalize_text(args.sentence, tr.run.lowercase))
    if not src:
        raise DataError("--sentence is empty")
    tgt = tr.vocab_tgt.encode(normalize_text(args.target, tr.run.lowercase)) if args.target else None
    records = capture(tr.params, tr.model_cfg, tr.vocab_src, tr.vocab_tgt, src, tgt,
                      max_extra=tr.run.max_extra)
    files = export_bundle(records, args.outdir, args.bins)
    print(f"captured {len(records)} records, wrote {len(files)} files to {args.outdir}")
    return EXIT_OK


def _testset(path: str, lowercase: bool) -> tuple[list[str], list[str]]:
    corpus = read_corpus(path, "test", lowercase)
    return corpus.sources(), corpus.targets()


def cmd_compare(args) -> int:
    rows = []
    for tag, path in (("A", args.ckpt_a), ("B", args.ckpt_b)):
        tr = _load_trainer(path)
        src, ref = _testset(args.testset, tr.run.lowercase)
        beam = tr.run.beam_width if args.beam is None else args.beam
        hyp = translate(tr.params, tr.model_cfg, tr.vocab_src, tr.vocab_tgt, src, beam=beam,
                        alpha=tr.run.alpha, max_extra=tr.run.max_extra, lowercase=tr.run.lowercase)
        rows.append((tag, path, tr, corpus_bleu(hyp, ref)))
    for tag, path, tr, report in rows:
        print(f"model {tag}: {path} attention={tr.model_cfg.attention} "
              f"params={sum(p.data.size for p in tr.params.values())}")
        print(f"model {tag}: {report.format()}")
    print("epoch\tA_train_loss\tA_val_loss\tB_train_loss\tB_val_loss")
    logs = [{e.epoch: e for e in r[2].log} for r in rows]
    for epoch in sorted(set(logs[0]) | set(logs[1])):
        cells = [str(epoch)]
        for by_epoch in logs:
            e = by_epoch.get(epoch)
            cells += [f"{e.train_loss:.4f}", f"{e.val_loss:.4f}"] if e else ["-", "-"]
        print("\t".join(cells))
    return EXIT_OK


def cmd_show_config(args) -> int:
    tr = _load_trainer(args.ckpt)
    print(dumps_json({"run": tr.run.to_dict(), "model": tr.model_cfg.to_dict()}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plgt", description="Power-law graph attention translator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="learn a byte-level BPE vocabulary from one side of a corpus")
    s.add_argument("--corpus", required=True, help="tab-separated source/target file")
    s.add_argument("--side", choices=("src", "tgt"), required=True)
    s.add_argument("--cap", type=int, required=True, help="vocabulary size including special tokens")
    s.add_argument("--min-freq", type=int, default=2, help="stop merging below this pair count")
    s.add_argument("--lowercase", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("train", help="train a model and write checkpoints plus train_log.csv")
    s.add_argument("--config", help="flat 'key = value' run config")
    s.add_argument("--data", help="training corpus (overrides train_path)")
    s.add_argument("--val", help="validation corpus (overrides val_path)")
    s.add_argument("--out", help="checkpoint directory (overrides ckpt_dir)")
    s.add_argument("--attention", choices=("plga", "sdpa"))
    s.add_argument("--table1-row", metavar="ROW", help="reference hyperparameter row 1-6 or sdpa")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--src-vocab", help="prebuilt source vocabulary")
    s.add_argument("--tgt-vocab", help="prebuilt target vocabulary")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override, repeatable")
    s.add_argument("--dry-run", action="store_true", help="echo the resolved config and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="decode each line of a file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--beam", type=int, help="beam width; 1 is greedy (default from checkpoint)")
    s.add_argument("--alpha", type=float, help="length-penalty exponent")
    s.add_argument("--out", help="output file (default stdout)")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file against a reference file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect", help="export attention, metric and curvature tensors for one sentence")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sentence", required=True)
    s.add_argument("--target", help="force this target instead of the greedy translation")
    s.add_argument("--outdir", required=True)
    s.add_argument("--bins", type=int, default=80, help="histogram bins")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("compare", help="BLEU and loss curves of two checkpoints on one test set")
    s.add_argument("--ckpt-a", required=True)
    s.add_argument("--ckpt-b", required=True)
    s.add_argument("--testset", required=True, help="tab-separated source/reference file")
    s.add_argument("--beam", type=int)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("show-config", help="print the run config stored in a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"plgt: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"plgt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"plgt: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
