"""Command-line entry point: ``narlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .bench import DEFAULT_REPS, DEFAULT_WARMUP, desk_dataset, emit_report, run_benchmark, speedup_table, sweep
from .corpus import (DISTILLED, clean_rule_based, distill_corpus, dual_xent_filter, gen_task, read_corpus,
                     write_corpus, write_scores)
from .estimators import ARTranslator, EnsembleTranslator, NARTranslator, load_translator
from .metrics import bleu, chrf, refs_from_streams


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _read_lines(path: str | None) -> list[str]:
    if path is None or path == "-":
        return [line.rstrip("\n") for line in sys.stdin]
    return Path(path).read_text(encoding="utf-8").splitlines()


def _write_lines(lines, path: str | None) -> None:
    text = "".join(f"{line}\n" for line in lines)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_models(dirs: list[str], beam_size: int | None):
    models = [load_translator(d) for d in dirs]
    if len(models) == 1:
        m = models[0]
        if beam_size is not None and isinstance(m, ARTranslator):
            m.set_params(beam_size=beam_size)
        return m
    return EnsembleTranslator(models, beam_size=beam_size or 4)


def cmd_gen_task(args) -> int:
    data = gen_task(args.kind, args.n_train, args.n_dev, args.n_test, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        write_corpus(getattr(data, split), out / split)
    for split in ("dev", "test"):
        refs = getattr(data, f"{split}_refs")
        for j in range(max(len(r) for r in refs)):
            _write_lines([r[min(j, len(r) - 1)] for r in refs], str(out / f"{split}.ref{j}"))
    return 0


def _fit(est, args):
    train = read_corpus(args.train)
    eval_set = None
    if args.dev:
        dev = read_corpus(args.dev)
        eval_set = ([p.src for p in dev], [p.tgt for p in dev])
    return est.fit([p.src for p in train], [p.tgt for p in train], eval_set=eval_set, log_path=args.log)


def cmd_train_teacher(args) -> int:
    out = Path(args.out_dir)
    for i, seed in enumerate(args.seeds):
        est = ARTranslator(preset=args.preset, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                           warmup=args.warmup, seed=seed)
        log_path = args.log
        if log_path and len(args.seeds) > 1:
            log_path = f"{log_path}.{i}"
        args_i = argparse.Namespace(**{**vars(args), "log": log_path})
        _fit(est, args_i)
        target = out / f"member{i}" if len(args.seeds) > 1 else out
        est.save(target)
        print(f"saved {target}", file=sys.stderr)
    return 0


def cmd_train_student(args) -> int:
    est = NARTranslator(preset=args.preset, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                        warmup=args.warmup, seed=args.seed, split_factor=args.split_factor,
                        merge_repeats=not args.no_merge_repeats)
    _fit(est, args)
    est.save(args.out_dir)
    print(f"saved {args.out_dir}", file=sys.stderr)
    return 0


def cmd_distill(args) -> int:
    pairs = read_corpus(args.input)
    if args.clean:
        pairs = clean_rule_based(pairs)
    if args.filter_forward or args.filter_backward:
        if not (args.filter_forward and args.filter_backward):
            raise SystemExit("--filter-forward and --filter-backward go together")
        pairs = dual_xent_filter(pairs, load_translator(args.filter_forward), load_translator(args.filter_backward),
                                 args.keep_fraction)
        write_scores(pairs, f"{args.output}.scores.tsv")
    teachers = [load_translator(d) for d in args.teachers]
    distilled = distill_corpus(teachers, pairs, beam_size=args.beam_size, n_workers=args.workers)
    write_corpus(distilled, args.output)
    print(f"wrote {len(distilled)} {DISTILLED} pairs to {args.output}.src/.tgt", file=sys.stderr)
    return 0


def cmd_translate(args) -> int:
    beam = args.beam_size
    if args.mode == "beam" and beam is None:
        beam = 4
    model = _load_models(args.model, beam)
    if args.mode == "nar" and not isinstance(model, NARTranslator):
        raise SystemExit("--mode nar needs a NAR checkpoint")
    if args.mode in ("greedy", "beam") and isinstance(model, NARTranslator):
        raise SystemExit(f"--mode {args.mode} needs AR checkpoints")
    if args.mode == "greedy" and isinstance(model, ARTranslator):
        model.set_params(beam_size=1)
    sources = _read_lines(args.input)
    outputs, counter = model.translate(sources, batch_size=args.batch_size)
    _write_lines(outputs, args.output)
    print(f"decoder_invocations={counter.decoder_invocations}", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    hyps = _read_lines(args.hyp)
    refs = refs_from_streams([_read_lines(r) for r in args.ref])
    fn = {"bleu": bleu, "chrf": chrf}[args.metric]
    report = fn(hyps, refs, bootstrap=args.bootstrap, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_benchmark(args) -> int:
    models = {}
    for spec in args.models:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).name, spec
        models[name] = load_translator(path)
    if args.dataset in (None, "desk"):
        sources, refs = desk_dataset(args.n_sentences, args.dataset_seed)
    else:
        pairs = read_corpus(args.dataset)
        sources, refs = [p.src for p in pairs], [[p.tgt] for p in pairs]
    scenarios = sweep(args.batch_sizes, args.threads, args.reps, args.warmup)
    report = run_benchmark(models, scenarios, sources, refs, args.baseline)
    for p in emit_report(report, args.out_dir, args.format):
        print(f"wrote {p}", file=sys.stderr)
    if args.baseline:
        for row in speedup_table(report, args.baseline):
            print(json.dumps(asdict(row)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="narlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-task", help="write a seeded synthetic corpus")
    g.add_argument("kind", choices=["copy", "reverse", "lexicon", "two_mode"])
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-dev", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_task)

    def training_args(sp, epochs):
        sp.add_argument("--train", required=True, help="corpus prefix (<prefix>.src / <prefix>.tgt)")
        sp.add_argument("--dev", help="dev corpus prefix")
        sp.add_argument("--preset", default="Tiny", choices=["Large", "Base", "Small", "Micro", "Tiny"])
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--lr", type=float, default=3e-3)
        sp.add_argument("--warmup", type=int, default=400)
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--log", help="training log TSV path")

    t = sub.add_parser("train-teacher", help="train one or more AR teachers")
    training_args(t, 20)
    t.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated; one member per seed")
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="train a CTC NAR student")
    training_args(s, 30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split-factor", type=int, default=3)
    s.add_argument("--no-merge-repeats", action="store_true")
    s.set_defaults(func=cmd_train_student)

    d = sub.add_parser("distill", help="replace targets with teacher translations")
    d.add_argument("--teachers", nargs="+", required=True, help="teacher checkpoint directories")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--beam-size", type=int, default=4)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--clean", action="store_true", help="rule-based cleaning first")
    d.add_argument("--filter-forward")
    d.add_argument("--filter-backward")
    d.add_argument("--keep-fraction", type=float, default=0.75)
    d.set_defaults(func=cmd_distill)

    tr = sub.add_parser("translate", help="translate one sentence per line")
    tr.add_argument("--model", nargs="+", required=True, help="checkpoint directory; several form an ensemble")
    tr.add_argument("--mode", choices=["auto", "greedy", "beam", "nar"], default="auto")
    tr.add_argument("--beam-size", type=int)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--input", default="-")
    tr.add_argument("--output", default="-")
    tr.set_defaults(func=cmd_translate)

    sc = sub.add_parser("score", help="corpus BLEU or chrF as JSON")
    sc.add_argument("--hyp", required=True)
    sc.add_argument("--ref", nargs="+", required=True, help="one file per reference set")
    sc.add_argument("--metric", choices=["bleu", "chrf"], default="bleu")
    sc.add_argument("--bootstrap", type=int, default=0)
    sc.add_argument("--seed", type=int, default=12345)
    sc.set_defaults(func=cmd_score)

    b = sub.add_parser("benchmark", help="timing sweep over batch sizes and threads")
    b.add_argument("--models", nargs="+", required=True, help="name=checkpoint_dir")
    b.add_argument("--batch-sizes", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64, 128])
    b.add_argument("--threads", type=_int_list, default=[1])
    b.add_argument("--reps", type=int, default=DEFAULT_REPS)
    b.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    b.add_argument("--dataset", help="corpus prefix, or 'desk' for the generated lexicon set")
    b.add_argument("--n-sentences", type=int, default=10_000)
    b.add_argument("--dataset-seed", type=int, default=2024)
    b.add_argument("--baseline")
    b.add_argument("--out-dir", required=True)
    b.add_argument("--format", type=lambda s: s.split(","), default=["json", "csv", "plotdata"])
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
