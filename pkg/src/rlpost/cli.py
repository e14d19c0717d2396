"""Command-line entry point: ``rlpost {train,eval,gradcheck,env-gen,corpus}``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .corpus import (
    dedup_by_prefix,
    detect_repetition,
    detect_residual_nonlatin,
    kmeans3,
    parse_multipanel_caption,
    replace_reference_terms,
    stratified_sample,
)
from .corpus.captions import DEFAULT_STYLES
from .corpus.cleaning import DEDUP_PREFIX_CHARS, REPETITION_THRESHOLD
from .corpus.records import CaptionRecord, check_unique_ids, dump_caption, parse_captions
from .env import generate_dataset, load_dataset, save_dataset
from .errors import (
    ConfigError,
    ContractViolation,
    IntegrityError,
    NumericalOverflowError,
    ParseError,
    VersionError,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .policy import Vocabulary
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_config,
    run_training,
    save_config,
    toy_dataset,
    write_metrics,
    write_timing,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

log = logging.getLogger("rlpost")


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_type(annotation) -> type:
    kind = str(annotation)
    if kind.startswith("int"):
        return int
    if kind.startswith("float"):
        return float
    return str


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (one per TrainConfig field)")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        group.add_argument(
            _flag(f.name), dest=f.name, type=_field_type(f.type), default=argparse.SUPPRESS,
            metavar=f.name.upper(), help=f"default: {getattr(defaults, f.name)!r}",
        )


def _overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig) if hasattr(args, f.name)}


def cmd_train(args) -> int:
    base = load_config(args.config).to_dict() if args.config else TrainConfig().to_dict()
    config = TrainConfig.from_dict({**base, **_overrides(args)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    dataset = load_dataset(args.dataset, Vocabulary.with_size(config.vocab_size)) if args.dataset \
        else toy_dataset(config)
    try:
        params, metrics = run_training(config, dataset)
    except TrainingDiverged as e:
        (out / "diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2, sort_keys=True) + "\n")
        print(f"error: {e}; diagnostics written to {out / 'diagnostics.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    write_metrics(metrics, out / "metrics.csv")
    write_timing(metrics, out / "timing.csv")
    checkpoint.save(params, out / "checkpoint.bin")
    last = metrics[-1] if metrics else None
    summary = f"updates={len(metrics)}"
    if last is not None:
        summary += f" accuracy_rate={last.accuracy_rate:.4f} format_rate={last.format_rate:.4f}"
    print(f"{summary} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = checkpoint.load(args.checkpoint)
    if args.dataset:
        items = load_dataset(args.dataset, params.fmap.vocab)
    else:
        items = generate_dataset(args.n, args.data_seed, args.prompt_len, params.fmap.vocab)
    acc, fmt = evaluate(params, items, mode=args.mode, forced=args.forced, seed=args.seed)
    print(f"items={len(items)} mode={args.mode} forced={args.forced} accuracy_rate={acc:.4f} format_rate={fmt:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    report = run_gradcheck(args.seed, args.instances, corrupt=args.corrupt_gradient)
    worst = 0.0
    for name, err in report.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name}: max_rel_error={err:.3e} {status}")
        worst = max(worst, err)
    return EXIT_OK if worst <= TOLERANCE else EXIT_CHECK


def cmd_env_gen(args) -> int:
    vocab = Vocabulary.with_size(args.vocab_size)
    items = generate_dataset(args.n, args.seed, args.prompt_len, vocab)
    save_dataset(items, args.output, vocab)
    print(f"wrote {len(items)} items to {args.output}")
    return EXIT_OK


def _read_corpus(args) -> tuple[list[CaptionRecord], int]:
    errors: list = []
    if args.input == "-":
        records = list(parse_captions(sys.stdin, strict=args.strict, errors=errors))
    else:
        with open(args.input, encoding="utf-8") as f:
            records = list(parse_captions(f, strict=args.strict, errors=errors))
    for e in errors:
        log.warning("skipped malformed record: %s", e)
    check_unique_ids(records)
    return records, len(errors)


def _write_corpus(records: list[CaptionRecord], output: str) -> None:
    text = "".join(dump_caption(r) + "\n" for r in records)
    if output == "-":
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8")


def _split_captions(records, args):
    out = []
    for r in records:
        split = parse_multipanel_caption(r.text, args.styles)
        if split.is_whole:
            out.append(r)
            continue
        for label, sub in split.panels:
            out.append(CaptionRecord(f"{r.id}-{label}", sub, r.stratum, r.embedding, r.extra)
                       .with_extra(panel=label, source_id=r.id))
    flagged = sum(1 for r in records if not parse_multipanel_caption(r.text, args.styles).is_whole)
    return out, flagged, 0


def _clean(records, args):
    out, flagged = [], 0
    for r in records:
        rep, tok = detect_repetition(r.text, args.threshold)
        cjk, ch = detect_residual_nonlatin(r.text)
        if rep or cjk:
            flagged += 1
            log.info("dropping %s: %s", r.id, f"repeated token {tok!r}" if rep else f"CJK character {ch!r}")
            continue
        out.append(CaptionRecord(r.id, replace_reference_terms(r.text), r.stratum, r.embedding, r.extra))
    return out, flagged, flagged


def _dedup(records, args):
    out = dedup_by_prefix(records, args.prefix_chars)
    removed = len(records) - len(out)
    return out, removed, removed


def _sample(records, args):
    rng = np.random.default_rng(args.seed) if args.seed is not None else None
    out = stratified_sample(records, args.total, rng)
    return out, 0, len(records) - len(out)


def _cluster(records, args):
    missing = [r.id for r in records if r.embedding is None]
    if missing:
        raise ContractViolation(f"records without embedding: {', '.join(missing[:5])}")
    assignments, _ = kmeans3([r.embedding for r in records], args.k, np.random.default_rng(args.seed),
                             max_iter=args.max_iter)
    return [r.with_extra(cluster=int(a)) for r, a in zip(records, assignments)], 0, 0


CORPUS_OPS = {
    "split-captions": _split_captions,
    "clean": _clean,
    "dedup": _dedup,
    "sample": _sample,
    "cluster": _cluster,
}


def cmd_corpus(args) -> int:
    records, malformed = _read_corpus(args)
    out, flagged, removed = CORPUS_OPS[args.corpus_cmd](records, args)
    _write_corpus(out, args.output)
    print(f"in={len(records)} out={len(out)} flagged={flagged} removed={removed} malformed={malformed}",
          file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlpost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run GRPO or DAPO on the toy MCQ task")
    p.add_argument("--config", help="flat JSON object with TrainConfig fields")
    p.add_argument("--dataset", help="JSON Lines dataset (default: generate from the config)")
    p.add_argument("--out", default="run", help="output directory (default: run)")
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="JSON Lines dataset (default: generate --n items)")
    p.add_argument("--n", type=int, default=1000, help="items to generate when no dataset is given")
    p.add_argument("--data-seed", type=int, default=12345, help="seed for generated items")
    p.add_argument("--prompt-len", type=int, default=10)
    p.add_argument("--mode", choices=("sampled", "greedy"), default="sampled")
    p.add_argument("--forced", action="store_true", help="decode through the answer template")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt-gradient", action="store_true",
                   help="scale analytic gradients by 1.01 (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("env-gen", help="write a toy MCQ dataset")
    p.add_argument("--n", type=int, default=3200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt-len", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_env_gen)

    p = sub.add_parser("corpus", help="caption curation operations")
    csub = p.add_subparsers(dest="corpus_cmd", required=True)

    def corpus_parser(name, help_):
        cp = csub.add_parser(name, help=help_)
        cp.add_argument("--input", default="-", help="JSON Lines caption records (default: stdin)")
        cp.add_argument("--output", default="-", help="default: stdout")
        cp.add_argument("--strict", action="store_true", help="abort on the first malformed record")
        cp.set_defaults(func=cmd_corpus)
        return cp

    cp = corpus_parser("split-captions", "split multi-panel captions into one record per panel")
    cp.add_argument("--styles", nargs="+", default=list(DEFAULT_STYLES), help="label styles in precedence order")
    cp = corpus_parser("clean", "drop degenerate or CJK-contaminated records, rewrite reference terms")
    cp.add_argument("--threshold", type=int, default=REPETITION_THRESHOLD)
    cp = corpus_parser("dedup", "drop records whose text prefix was already seen")
    cp.add_argument("--prefix-chars", type=int, default=DEDUP_PREFIX_CHARS)
    cp = corpus_parser("sample", "proportionate stratified sample, longest captions first")
    cp.add_argument("--total", type=int, required=True)
    cp.add_argument("--seed", type=int, default=None, help="randomizes quota tie-breaks")
    cp = corpus_parser("cluster", "k-means on record embeddings; adds a 'cluster' field")
    cp.add_argument("--k", type=int, default=3)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--max-iter", type=int, default=100)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, ContractViolation, VersionError, IntegrityError, UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalOverflowError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
