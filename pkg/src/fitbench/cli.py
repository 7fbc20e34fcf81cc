"""Command line: ``fitbench run <config>``, ``fitbench report <dir>``, ``fitbench verify <dir>``.

Exit codes: 0 ok, 1 validation problem (bad config, failed check), 2 compute error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigurationError, FitBenchError, InputError, StageError

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE = 0, 1, 2


def _cmd_run(args) -> int:
    from .pipeline import run

    pipe = run(args.config, args.out, args.workers, force=args.force or ())
    computed = [s for s, how in pipe.invocation.items() if how == "computed"]
    print(f"run directory: {pipe.out}")
    print(f"stages computed: {', '.join(computed) or 'none (all reused)'}")
    print(f"total seconds this invocation: {pipe.manifest['timings'].get('total_invocation', 0):.1f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .pipeline import open_run

    pipe = open_run(args.dir, args.workers)
    pipe.run(force=("report",))
    print(f"reports written to {pipe.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .pipeline import open_run
    from .verify import verify_run

    pipe = open_run(args.dir)
    pipe.load_all()
    failed = 0
    for name, problem in verify_run(pipe):
        print(f"{'FAIL' if problem else 'ok  '}  {name}" + (f": {problem}" if problem else ""))
        failed += problem is not None
    return EXIT_VALIDATION if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fitbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run or resume every stage of a config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides output_dir in the config)")
    r.add_argument("--workers", type=int, default=None, help="worker processes (default: $FITBENCH_WORKERS or 1)")
    r.add_argument("--force", nargs="*", metavar="STAGE", help="recompute these stages even if up to date")
    r.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help="rewrite the report files of a finished run")
    rep.add_argument("dir")
    rep.add_argument("--workers", type=int, default=None)
    rep.set_defaults(fn=_cmd_report)

    v = sub.add_parser("verify", help="re-check invariants over persisted tables")
    v.add_argument("dir")
    v.set_defaults(fn=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except StageError as exc:
        cause = exc.cause
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, (ConfigurationError, InputError)) and exc.stage in ("dataset", "filter"):
            return EXIT_VALIDATION
        return EXIT_COMPUTE
    except (ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FitBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
