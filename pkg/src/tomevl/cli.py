"""Command line entry point: ``tomevl <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
input), 3 property check failure. The resolved run configuration is echoed to
standard error so that standard output carries only results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import costmodel
from .captioner import caption_accuracy, generate, train
from .checkpoint import CheckpointError
from .config import ConfigKeyError, RunConfig, load_config
from .datagen import MAX_FRAMES, CorpusError, Vocab, make_samples, read_corpus, read_frames, read_ppm, write_corpus, write_ppm

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class PropertyFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit_json(doc: dict):
    print(json.dumps({"schema_version": SCHEMA_VERSION, **doc}, indent=2, sort_keys=True))


def _run_config(args, base: RunConfig | None = None) -> RunConfig:
    try:
        if getattr(args, "config", None):
            run = load_config(args.config, args.set)
        else:
            run = (base or RunConfig()).with_overrides(args.set)
    except FileNotFoundError as exc:
        raise DataError(f"config not found: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}: invalid JSON: {exc}") from None
    except (ConfigKeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    print("# resolved config", file=sys.stderr)
    print(run.to_json(), file=sys.stderr)
    return run


def _read_input(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        return read_frames(p)
    if not p.exists():
        raise DataError(f"{path}: no such file")
    return read_ppm(p)


def _load_checkpoint(path):
    from .pipeline import load_model

    try:
        return load_model(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such checkpoint") from None


# -- commands ------------------------------------------------------------------------


def cmd_datagen(args):
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.video is not None and not 1 <= args.video <= MAX_FRAMES:
        raise UsageError(f"--video takes 1 to {MAX_FRAMES} frames")
    samples = make_samples(args.n, args.seed, args.video)
    write_corpus(samples, args.out, Vocab())
    kind = f"videos ({args.video} frames)" if args.video else "images"
    print(f"wrote {len(samples)} {kind} to {args.out}")


def cmd_train(args):
    from .pipeline import prepared_model, save_model

    run = _run_config(args)
    corpus = read_corpus(args.data)
    if not corpus.samples:
        raise DataError(f"{args.data}: corpus is empty")
    video = corpus.samples[0].pixels.ndim == 4
    if video:
        run.data.num_frames = corpus.samples[0].pixels.shape[0]
    model = prepared_model(run, corpus.vocab, video)
    dataset = [(s.pixels, corpus.vocab.encode(s.caption)) for s in corpus.samples]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tloss\tlr\twall_ms\n")
        rows = train(model, dataset, run.train, log_file=fh)
    save_model(out / "model.ckpt", model, run)
    last = rows[-1]
    print(f"final loss\t{last.step}\t{last.loss!r}")
    if args.eval_data:
        held = read_corpus(args.eval_data).samples
        print(f"exact match\t{caption_accuracy(model, held):.4f}")


def cmd_generate(args):
    model, _ = _load_checkpoint(args.checkpoint)
    for path in args.input:
        px = _read_input(path)
        ids = generate(model, px, args.max_len, video=px.ndim == 4)
        print(model.vocab.decode(ids))


def cmd_macs(args):
    if args.qformer:
        report = costmodel.macs_qformer(stage=args.stage, include_cached_generation=args.cached_generation)
    else:
        run = _run_config(args, RunConfig(connector=costmodel.paper_config()))
        report = costmodel.macs_tomeformer(run.connector, args.L0)
    if args.json:
        doc = report.to_dict()
        doc.pop("schema_version")
        _emit_json(doc)
    else:
        sys.stdout.write(report.to_tsv())


def cmd_ablate_r(args):
    try:
        r_list = [int(x) for x in args.r_list.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--r-list must be comma-separated integers, got {args.r_list!r}") from None
    if not r_list:
        raise UsageError("--r-list is empty")
    run = _run_config(args, RunConfig(connector=costmodel.paper_config()))
    rows = costmodel.ablate_r(run.connector, args.L0, r_list)
    if args.json:
        _emit_json({"kind": "ablate_r", "L0": args.L0, "convention": costmodel.CONVENTION, "rows": rows})
    else:
        print("r\ttotal_macs\tfinal_tokens")
        for row in rows:
            print(f"{row['r']}\t{row['total_macs']}\t{row['final_tokens']}")


def cmd_merge_viz(args):
    from .pipeline import build_model, merge_overlay

    px = _read_input(args.input)
    if args.checkpoint:
        model, _ = _load_checkpoint(args.checkpoint)
    else:
        run = _run_config(args)
        model = build_model(run, video=px.ndim == 4)
    overlay, n_colors = merge_overlay(model, px)
    write_ppm(args.out, overlay)
    print(f"{n_colors} merged tokens; overlay written to {args.out}")


def cmd_temporal_check(args):
    from .pipeline import temporal_checks

    run = _run_config(args)
    results = temporal_checks(run, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if r.status == "fail"]
    if failed:
        raise PropertyFailure(f"{len(failed)} temporal propert{'y' if len(failed) == 1 else 'ies'} failed")


# -- wiring --------------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. connector.r=16")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tomevl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--video", type=int, metavar="N", help="frames per clip (omit for images)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pre-train stand-ins, train the connector, save checkpoint and log")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", help="held-out corpus to report exact-match accuracy on")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy captions for PPM images or frame directories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--max-len", type=int, default=8)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("macs", help="analytical MACs report")
    _add_config(p)
    p.add_argument("--qformer", action="store_true", help="report the Q-Former reference instead")
    p.add_argument("--stage", type=int, choices=(1, 2), default=2)
    p.add_argument("--cached-generation", action="store_true", help="add the cached-key generation pass to stage 1")
    p.add_argument("--L0", type=int, default=256, help="patch tokens entering the connector")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("ablate-r", help="MACs and final token count over merge quotas")
    _add_config(p)
    p.add_argument("--r-list", default="10,13,16,19,22,25")
    p.add_argument("--L0", type=int, default=256)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate_r)

    p = sub.add_parser("merge-viz", help="color each patch by the merged token it ends in")
    _add_config(p)
    p.add_argument("--checkpoint", help="trained model (omit for random init)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge_viz)

    p = sub.add_parser("temporal-check", help="static-frame and permutation properties")
    _add_config(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_temporal_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tomevl: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CorpusError, CheckpointError) as exc:
        print(f"tomevl: data error: {exc}", file=sys.stderr)
        return 2
    except PropertyFailure as exc:
        print(f"tomevl: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
