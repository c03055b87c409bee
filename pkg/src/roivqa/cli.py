"""``roivqa`` command line: validate, reconstruct, split, eval, fuse-check.

Exit codes: 0 success, 1 validation error, 2 aborted run, 3 usage error.
Every flag can also be set through ``ROIVQA_<FLAG>`` (dashes become
underscores, e.g. ``ROIVQA_OUT_DIR``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

from roivqa import corpus, fusion, harness, roiqa
from roivqa.compositor import AlphaPolicy

EXIT_OK, EXIT_INVALID, EXIT_ABORTED, EXIT_USAGE = 0, 1, 2, 3
ENV_PREFIX = "ROIVQA_"

log = logging.getLogger("roivqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _truthy(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def _apply_env(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub)
            continue
        if not action.option_strings or action.dest in ("help",):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _truthy(raw)
            if isinstance(action, argparse._StoreFalseAction):
                value = not value
        elif action.type is not None:
            value = action.type(raw)
        else:
            value = raw
        action.default = value
        action.required = False


def _fraction(text: str) -> Fraction:
    return Fraction(text)


def _common(p: argparse.ArgumentParser, seed_required: bool) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None,
                   help="64-bit seed" + (" (required)" if seed_required else ""))
    g.add_argument("--lenient", dest="strict", action="store_false", default=True,
                   help="keep unknown manifest fields instead of rejecting them")
    g.add_argument("--out-dir", type=Path, default=Path("roivqa-out"), help="all outputs go here")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker pool size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roivqa", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("validate", help="check a manifest and print diagnostics")
    p.add_argument("manifest", type=Path)
    _common(p, seed_required=False)

    p = subs.add_parser("reconstruct", help="add RoI QA items and composites to a dataset")
    p.add_argument("manifest", type=Path)
    p.add_argument("--types", default=",".join(roiqa.ROI_TYPES),
                   help="comma-separated subset of " + ",".join(roiqa.ROI_TYPES))
    p.add_argument("--alpha", default="dynamic", help="0|96|128|255|dynamic (or any 0..255, dynamic:LO:HI)")
    p.add_argument("--bbox-in-prompt", dest="bbox_in_prompt", action="store_true", default=True,
                   help="emit coordinate-in-prompt items (default)")
    p.add_argument("--no-bbox-in-prompt", dest="bbox_in_prompt", action="store_false")
    p.add_argument("--quota", type=int, default=0, help="max items per type per image (0 = unlimited)")
    p.add_argument("--thickness", type=int, default=roiqa.DEFAULT_THICKNESS, help="outline thickness in pixels")
    _common(p, seed_required=True)

    p = subs.add_parser("split", help="seeded train/test split grouped by image")
    p.add_argument("manifest", type=Path)
    p.add_argument("--fraction", type=_fraction, default=Fraction(4, 5), help="train fraction, e.g. 0.8 or 4/5")
    _common(p, seed_required=True)

    p = subs.add_parser("eval", help="run a model adapter over a split and score it")
    p.add_argument("manifest", type=Path)
    p.add_argument("--adapter", choices=["mock", "subprocess", "http"], default="mock")
    p.add_argument("--target", default="", help="fixture path, command line, or endpoint URL")
    p.add_argument("--max-in-flight", type=int, default=None, help="concurrent requests (default: --workers)")
    p.add_argument("--timeout", type=float, default=30.0, help="per-item timeout in seconds")
    _common(p, seed_required=True)

    p = subs.add_parser("fuse-check", help="gradient check of the fusion projector")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--o", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    _common(p, seed_required=False)

    _apply_env(parser)
    return parser


def _effective_config(args: argparse.Namespace) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, (Path, Fraction)):
            v = str(v)
        cfg[k] = v
    return cfg


def _emit_config(args: argparse.Namespace) -> None:
    cfg = _effective_config(args)
    print("# effective config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / f"effective_config.{args.command}.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_validate(args) -> int:
    errors: list[corpus.ManifestError] = []
    try:
        d = corpus.load_dataset(args.manifest, strict=args.strict, errors=errors)
    except corpus.ManifestError as first:
        for e in errors or [first]:
            print(f"{args.manifest}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"{args.manifest}: {e}", file=sys.stderr)
        return EXIT_INVALID
    n_regions = sum(len(v) for v in d.regions.values())
    print(f"{args.manifest}: OK ({len(d.images)} images, {n_regions} regions, {len(d.qa)} qa)")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    types = tuple(t.strip() for t in args.types.split(",") if t.strip())
    try:
        policy = AlphaPolicy.parse(args.alpha)
        cfg = roiqa.GenerationConfig(
            enabled_types=types,
            per_type_quota={t: args.quota for t in types},
            seed=args.seed,
            alpha_policy=policy,
            bbox_in_prompt=args.bbox_in_prompt,
            thickness=args.thickness,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    d = corpus.load_dataset(args.manifest, strict=args.strict)
    rec = roiqa.reconstruct_dataset(d, cfg, workers=args.workers)
    manifest = roiqa.write_reconstruction(rec, args.out_dir)
    counts = ", ".join(f"{t}={n}" for t, n in rec.report["per_type_counts"].items())
    print(f"wrote {manifest} ({counts}; {len(rec.report['skipped'])} skipped)")
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        spec = corpus.SplitSpec(args.seed, args.fraction)
    except ValueError as e:
        raise UsageError(str(e)) from None
    d = corpus.load_dataset(args.manifest, strict=args.strict)
    train, test = corpus.split_dataset(d, spec)
    for part, name in ((train, "train"), (test, "test")):
        path = corpus.save_dataset(part, args.out_dir / f"{name}.jsonl")
        print(f"wrote {path} ({len(part.images)} images, {len(part.qa)} qa)")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = harness.RunConfig(
            split=str(args.manifest),
            adapter=args.adapter,
            target=args.target,
            max_in_flight=args.max_in_flight or args.workers,
            timeout=args.timeout,
            seed=args.seed,
            strict=args.strict,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        report = harness.run_eval(cfg, out_dir=args.out_dir)
    except harness.AdapterUnavailable as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except harness.RunAborted as e:
        print(f"aborted: {e}; partial report in {args.out_dir}", file=sys.stderr)
        return EXIT_ABORTED
    sys.stdout.write((args.out_dir / "report.md").read_text(encoding="utf-8"))
    if report.run_meta.get("failed"):
        print(f"warning: {report.run_meta['failed']} item(s) failed and scored 0", file=sys.stderr)
    return EXIT_OK


def cmd_fuse_check(args) -> int:
    try:
        result = fusion.grad_check(args.d, args.h, args.o, args.seed or 0, args.step, args.tol)
    except ValueError as e:
        raise UsageError(str(e)) from None
    text = json.dumps(result, sort_keys=True, indent=2)
    print(text)
    (args.out_dir / "fuse_check.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "reconstruct": cmd_reconstruct,
    "split": cmd_split,
    "eval": cmd_eval,
    "fuse-check": cmd_fuse_check,
}
SEEDED = {"reconstruct", "split", "eval"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command in SEEDED and args.seed is None:
        parser.print_usage(sys.stderr)
        print(f"roivqa {args.command}: error: --seed is required", file=sys.stderr)
        return EXIT_USAGE
    _emit_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"roivqa {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (corpus.ManifestError, corpus.SplitError, corpus.MergeError) as e:
        print(f"{getattr(args, 'manifest', '')}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
