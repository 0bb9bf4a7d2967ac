"""Command line entry point: ``lgeseg <subcommand> ...``.

Exit codes: 0 when every case succeeded, 1 when any case failed,
2 for an invalid invocation (bad arguments, unreadable config or manifest).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import fileio
from .config import ConfigError, load_config
from .ffdreg import METRICS
from .phantom import PhantomError, PhantomSpec, make_phantom
from .pipeline import (
    StageError,
    compare_metrics,
    evaluate,
    read_manifest,
    read_stored_case,
    run_batch,
    write_phantom_case,
)

log = logging.getLogger("lgeseg")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(path):
    try:
        return load_config(path)
    except (OSError, ConfigError) as exc:
        raise UsageError(f"config: {exc}") from exc


def cmd_segment(args) -> int:
    cfg = _config(args.config)
    try:
        cases = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(f"manifest: {exc}") from exc
    out = args.out or cfg.output_dir
    outcome = run_batch(cases, cfg, out)
    for cid in outcome.succeeded:
        print(f"{cid}\tok")
    for cid, msg in outcome.failed.items():
        print(f"{cid}\tfailed\t{msg}")
    return outcome.exit_code


def cmd_phantom(args) -> int:
    try:
        spec = PhantomSpec.from_text(Path(args.spec).read_text()) if args.spec else PhantomSpec()
    except (OSError, PhantomError) as exc:
        raise UsageError(f"spec: {exc}") from exc
    d = write_phantom_case(make_phantom(spec, args.seed), args.out, seed=args.seed)
    print(d / "manifest.tsv")
    return EXIT_OK


def _pair_in(d: Path):
    for name in ("pair.meta", "truth_pair.meta"):
        if (d / name).exists():
            return fileio.read_pair(d / name)
    return None


def cmd_evaluate(args) -> int:
    auto, manual = Path(args.auto), Path(args.manual)
    if not auto.is_dir() or not manual.is_dir():
        raise UsageError("--auto and --manual must be directories")
    # a single case directory, or a batch output directory of case folders
    if _pair_in(auto) is not None:
        jobs = [(auto.name, auto, manual)]
    else:
        jobs = [(d.name, d, manual / d.name) for d in sorted(auto.iterdir()) if d.is_dir()]
    records, failed = [], 0
    for cid, a, m in jobs:
        try:
            pa, pm = _pair_in(a), _pair_in(m)
            if pa is None or pm is None:
                raise fileio.FormatError(f"no contour pair in {a if pa is None else m}")
            records.append(evaluate(pa, pm).to_record(case=cid))
        except ValueError as exc:
            log.error("case %s: %s", cid, exc)
            failed += 1
    if not jobs:
        raise UsageError(f"no cases found under {auto}")
    fileio.atomic_write(args.out, "".join(r + "\n" for r in records))
    print(f"{len(records)} evaluated, {failed} failed -> {args.out}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_compare_metrics(args) -> int:
    cfg = _config(args.config)
    try:
        case = read_stored_case(args.case)
    except (StageError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    if case.truth is None:
        raise UsageError(f"{args.case} has no truth_pair.meta to score against")
    try:
        report = compare_metrics(
            case.cine, case.lge, case.endo, case.epi, case.truth, cfg, metrics=args.metrics, prealign=args.prealign
        )
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    text = report.to_text()
    if args.out:
        fileio.atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgeseg", description="Segment LGE slices by propagating cine contours.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="run the pipeline on every case of a manifest")
    p.add_argument("--manifest", required=True, help="tab-separated cine, lge, endo, epi, id lines")
    p.add_argument("--config", help="key=value config file (defaults otherwise)")
    p.add_argument("--out", help="output directory (config output_dir otherwise)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("phantom", help="render a synthetic cine/LGE case")
    p.add_argument("--spec", help="phantom spec file in key=value form")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("evaluate", help="score automatic contours against manual ones")
    p.add_argument("--auto", required=True, help="case output directory, or a batch output directory")
    p.add_argument("--manual", required=True)
    p.add_argument("--out", required=True, help="JSON lines report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-metrics", help="FFD registration error per similarity metric")
    p.add_argument("--case", required=True, help="case directory as written by the phantom command")
    p.add_argument("--config")
    p.add_argument("--metrics", nargs="+", choices=METRICS, default=list(METRICS))
    p.add_argument("--prealign", action="store_true", help="normalize and affinely align before the FFD runs")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_compare_metrics)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lgeseg: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
