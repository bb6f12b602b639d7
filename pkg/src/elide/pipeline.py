"""Whole-program orchestration: sources in, report/diff/verdict out.

The stages are parse, resolve, points-to, per-function pair selection,
optional profile filtering, and rewrite planning.  The command line is a
thin shell over this module so each stage stays importable on its own.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from . import cfg as cfgmod
from . import pairing, pointsto, rewrite
from .errors import ElideError
from .harness import Schedule, check_equivalence, explore, run
from .parser import parse_program
from .pairing import AnalysisReport, UnitAnalysis
from .pointsto import PointsToResult
from .profiles import ProfileFile
from .resolve import ResolvedProgram, resolve
from .rewrite import Patch, RewritePlan


def collect_sources(paths: list[str]) -> dict[str, str]:
    """Gather .mgo files from file and directory arguments, sorted so the
    program (and any generated names) never depends on filesystem order."""
    found: dict[str, str] = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _dirs, files in os.walk(p):
                for name in sorted(files):
                    if name.endswith(".mgo"):
                        full = os.path.join(root, name)
                        found[os.path.normpath(full)] = _read(full)
        elif os.path.isfile(p):
            found[os.path.normpath(p)] = _read(p)
        else:
            raise ElideError(f"no such file or directory: {p}")
    if not found:
        raise ElideError("no .mgo sources given")
    return dict(sorted(found.items()))


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


@dataclass
class Pipeline:
    resolved: ResolvedProgram
    pts: PointsToResult
    units: list[UnitAnalysis]
    plan: RewritePlan
    report: AnalysisReport | None = None

    def patch(self) -> Patch:
        return rewrite.emit(self.resolved, self.plan)

    def rewritten(self) -> dict[str, str]:
        return rewrite.rewrite_texts(self.resolved, self.plan)


def analyze(sources: dict[str, str],
            profile: ProfileFile | None = None) -> Pipeline:
    resolved = resolve(parse_program(sources))
    pts = pointsto.analyze(resolved)
    units = [pairing.analyze_unit(resolved, pts, name)
             for name in resolved.units]
    pairing.profile_filter(units, profile)
    plan = rewrite.plan(resolved, units)
    report = pairing.build_report(units)
    return Pipeline(resolved, pts, units, plan, report)


def dump_cfgs(pipe: Pipeline) -> str:
    chunks = []
    for ua in pipe.units:
        chunks.append(f"// {ua.unit}\n{cfgmod.dot(ua.cfg, ua.regions)}")
    return "\n".join(chunks)


def run_sources(sources: dict[str, str], schedule: Schedule,
                config=None):
    return run(resolve(parse_program(sources)), schedule, config)


def explore_sources(sources: dict[str, str], worker_count: int = 2,
                    config=None, max_interleavings: int = 100000,
                    max_steps: int = 200000):
    return explore(resolve(parse_program(sources)), worker_count, config,
                   max_interleavings, max_steps)


def verify_patch(sources: dict[str, str], diff: str, worker_count: int = 2,
                 config=None, max_interleavings: int = 100000,
                 max_steps: int = 200000):
    """Apply a transform diff to the given sources and check that every
    behavior of the patched program is a behavior of the original."""
    patched = rewrite.apply_patch_set(sources, diff)
    original = resolve(parse_program(sources))
    transformed = resolve(parse_program(patched))
    return check_equivalence(original, transformed, worker_count, config,
                             max_interleavings, max_steps)
