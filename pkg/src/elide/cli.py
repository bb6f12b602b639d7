"""Command line front door.

Subcommands mirror the pipeline stages: ``analyze`` prints the selection
report, ``transform`` prints (and optionally writes) the rewrite diff,
``run`` executes a program under the deterministic scheduler, ``verify``
checks a transform diff for behavioral containment, and ``explain``
prints the per-site outcome with points-to targets.

Everything written to stdout is a pure function of the inputs, the flags
and the seed, so golden tests can compare bytes.  ANSI color is used
only when stdout is a terminal and ELIDE_NO_COLOR is unset.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pairing, pipeline
from .errors import ElideError
from .harness import Schedule
from .profiles import load_profile
from .runtime import EngineConfig


def _color_enabled() -> bool:
    if os.environ.get("ELIDE_NO_COLOR"):
        return False
    return sys.stdout.isatty()


def _paint(code: str, text: str) -> str:
    if not _color_enabled():
        return text
    return f"\x1b[{code}m{text}\x1b[0m"


def _green(text: str) -> str:
    return _paint("32", text)


def _red(text: str) -> str:
    return _paint("31", text)


def _load_config(path: str | None) -> EngineConfig | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return EngineConfig.from_json(fh.read())


def _add_source_args(p: argparse.ArgumentParser):
    p.add_argument("paths", nargs="+", metavar="PATH",
                   help=".mgo files or directories")
    p.add_argument("--profile", metavar="FILE",
                   help="JSON execution profile; cold functions are skipped")


def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("--workers", type=int, default=2, metavar="N",
                   help="scheduler worker slots (default 2)")
    p.add_argument("--seed", type=int, default=0, metavar="S",
                   help="schedule seed (default 0)")
    p.add_argument("--max-steps", type=int, default=200000, metavar="K",
                   help="statement budget per execution")
    p.add_argument("--config", metavar="FILE",
                   help="engine config JSON (attempts, capacity, decay...)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="elide",
        description="Source-to-source transactional lock elision for mgo "
                    "programs, with a deterministic execution harness.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("analyze", help="report which LU-pairs are eligible")
    _add_source_args(p)
    p.add_argument("--json", action="store_true",
                   help="machine-readable report")
    p.add_argument("--dump-cfg", action="store_true",
                   help="emit graphviz CFGs with region nesting")
    p.add_argument("--dump-pts", action="store_true",
                   help="emit the points-to solution as JSON")

    p = sub.add_parser("transform", help="print the elision diff")
    _add_source_args(p)
    p.add_argument("-o", "--output", metavar="DIR",
                   help="also write rewritten files into DIR")
    p.add_argument("--in-place", action="store_true",
                   help="rewrite the source files in place")

    p = sub.add_parser("run", help="execute a program deterministically")
    _add_source_args(p)
    _add_run_args(p)
    p.add_argument("--exhaustive", action="store_true",
                   help="enumerate schedules instead of running one")
    p.add_argument("--max-interleavings", type=int, default=100000,
                   metavar="K", help="schedule budget for --exhaustive")

    p = sub.add_parser("verify",
                       help="check a transform diff for equivalence")
    p.add_argument("original", metavar="ORIG",
                   help="original .mgo file or directory")
    p.add_argument("patch", metavar="PATCH", help="unified diff to apply")
    _add_run_args(p)
    p.add_argument("--exhaustive", action="store_true",
                   help="use the full schedule budget")
    p.add_argument("--max-interleavings", type=int, default=100000,
                   metavar="K", help="schedule budget with --exhaustive")

    p = sub.add_parser("explain",
                       help="per-site outcomes with points-to targets")
    _add_source_args(p)
    return ap


def _profile_of(args):
    return load_profile(args.profile) if args.profile else None


def _cmd_analyze(args) -> int:
    pipe = pipeline.analyze(pipeline.collect_sources(args.paths),
                            _profile_of(args))
    if args.dump_cfg:
        sys.stdout.write(pipeline.dump_cfgs(pipe))
    if args.dump_pts:
        sys.stdout.write(json.dumps(pipe.pts.dump(), indent=2,
                                    sort_keys=True) + "\n")
    if args.json:
        sys.stdout.write(pipe.report.to_json())
    elif not (args.dump_cfg or args.dump_pts):
        sys.stdout.write(pipe.report.render())
    return 0 if not pipe.plan.empty else 1


def _cmd_transform(args) -> int:
    sources = pipeline.collect_sources(args.paths)
    pipe = pipeline.analyze(sources, _profile_of(args))
    patch = pipe.patch()
    sys.stdout.write(patch.diff)
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        for path, text in patch.rewritten.items():
            dest = os.path.join(args.output, os.path.basename(path))
            with open(dest, "w", encoding="utf-8") as fh:
                fh.write(text)
    if args.in_place:
        for path, text in patch.rewritten.items():
            if text != patch.originals[path]:
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write(text)
    return 0 if not patch.empty else 1


def _cmd_run(args) -> int:
    sources = pipeline.collect_sources(args.paths)
    config = _load_config(args.config)
    if args.exhaustive:
        ex = pipeline.explore_sources(
            sources, worker_count=args.workers, config=config,
            max_interleavings=args.max_interleavings,
            max_steps=args.max_steps)
        fps = sorted(ex.footprints.values(),
                     key=lambda fp: (fp.status, fp.digest))
        sys.stdout.write(f"footprints {len(fps)}\n")
        for fp in fps:
            sys.stdout.write(f"  {fp.digest} {fp.status}\n")
        sys.stdout.write(f"executions {ex.executions}\n")
        sys.stdout.write(f"partial {'true' if ex.partial else 'false'}\n")
        return 0 if ex.statuses() == {"done"} else 1
    sched = Schedule(seed=args.seed, worker_count=args.workers,
                     max_steps=args.max_steps)
    res = pipeline.run_sources(sources, sched, config)
    sys.stdout.write(f"status {res.status}\n")
    if res.error is not None and getattr(res.error, "diagnosis", None):
        for line in res.error.diagnosis:
            sys.stdout.write(f"  {line}\n")
    sys.stdout.write(f"footprint {res.footprint.digest}\n")
    for wid, text in res.footprint.output:
        sys.stdout.write(f"[w{wid}] {text}\n")
    sys.stdout.write(res.stats.to_json() + "\n")
    return 0 if res.status == "done" else 1


def _cmd_verify(args) -> int:
    sources = pipeline.collect_sources([args.original])
    with open(args.patch, encoding="utf-8") as fh:
        diff = fh.read()
    budget = args.max_interleavings if args.exhaustive else 10000
    rep = pipeline.verify_patch(sources, diff, worker_count=args.workers,
                                config=_load_config(args.config),
                                max_interleavings=budget,
                                max_steps=args.max_steps)
    verdict = _green("EQUIVALENT") if rep.ok else _red("DIVERGENT")
    sys.stdout.write(verdict + "\n")
    sys.stdout.write(rep.render() + "\n")
    return 0 if rep.ok else 1


def _cmd_explain(args) -> int:
    pipe = pipeline.analyze(pipeline.collect_sources(args.paths),
                            _profile_of(args))
    sys.stdout.write(pairing.explain(pipe.units, pipe.pts))
    return 0


_DISPATCH = {
    "analyze": _cmd_analyze,
    "transform": _cmd_transform,
    "run": _cmd_run,
    "verify": _cmd_verify,
    "explain": _cmd_explain,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.cmd](args)
    except ElideError as e:
        sys.stderr.write(f"elide: error: {e}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"elide: error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
