"""Selection of lock/unlock pairs that are safe to elide.

A spliced pre-pair becomes an accepted pair when, over its guarded
section C (the blocks dominated by the lock and post-dominated by the
unlock, within the pair's region):

1. the lock's and unlock's may-target sets intersect;
2. the lock dominates the unlock and the unlock post-dominates the lock
   (guaranteed by splicing, re-checked);
3. no other lock or unlock site inside C may touch a mutex aliasing
   either end of the pair;
4. no statement in C, nor any function transitively callable from C,
   is transaction-unfriendly (output, panic, I/O, spawn, leftover defer),
   and no callable function's own lock sites alias the pair.

Downward-exposed locks and upward-exposed unlocks are computed by
removal-reachability and offered for diagnostics; conditions 1 and 2
already imply spliced pairs are never exposed.  A profile, when given,
then drops pairs in functions below one percent of cumulative time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import cfg as cfgmod
from .cfg import Cfg, CfgStmt, Dominance, Region
from .errors import (REASON_ACCEPTED, REASON_ALIAS_CONFLICT, REASON_DOMINANCE,
                     REASON_EXPOSURE, REASON_IO, REASON_MULTIPLE_DEFER,
                     REASON_PROFILE_COLD)
from .pointsto import PointsToResult, call_targets, fmt_obj
from .profiles import ProfileFile
from .resolve import ResolvedProgram
from .syntax import MutexExpr


@dataclass
class LuPair:
    lock: MutexExpr
    unlock: MutexExpr
    unit: str
    region: int
    lock_bid: int
    unlock_bid: int
    cs_blocks: frozenset
    via_defer: bool
    rejection: str | None = None
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.rejection is None


@dataclass
class DroppedPoint:
    site: MutexExpr
    reason: str
    detail: str


@dataclass
class UnitAnalysis:
    unit: str
    cfg: Cfg
    regions: list[Region]
    pairs: list[LuPair] = field(default_factory=list)
    dropped: list[DroppedPoint] = field(default_factory=list)
    multi_defer: bool = False

    def accepted_pairs(self) -> list[LuPair]:
        return [p for p in self.pairs if p.accepted]


# ---------------------------------------------------------------------------
# Exposure sets (removal-reachability over the region subgraph)

def _blocked_blocks(cfg: Cfg, region: Region, pts: PointsToResult,
                    mset: frozenset, want_unlock: bool) -> set:
    out = set()
    for bid in region.blocks:
        for cs in cfg.blocks[bid].stmts:
            if not cs.is_lu_point:
                continue
            if want_unlock != cs.is_unlock_point:
                continue
            other = pts.sites.get(cs.mutex.site_id, frozenset())
            if other & mset:
                out.add(bid)
    return out


def _reaches(cfg: Cfg, region: Region, start, goal: int, skip: set) -> bool:
    work = [b for b in start if b not in skip]
    seen = set(work)
    while work:
        b = work.pop()
        if b == goal:
            return True
        for s in cfg.blocks[b].succs:
            if s in region.blocks and s not in skip and s not in seen:
                seen.add(s)
                work.append(s)
    return False


def delock(cfg: Cfg, region: Region, pts: PointsToResult) -> set:
    """Lock sites with a region-exit path free of aliasing unlocks
    (downward exposed)."""
    out = set()
    for bid in region.blocks:
        for cs in cfg.blocks[bid].stmts:
            if not cs.is_lock_point:
                continue
            mset = pts.sites.get(cs.mutex.site_id, frozenset())
            skip = _blocked_blocks(cfg, region, pts, mset, want_unlock=True)
            starts = [s for s in cfg.blocks[bid].succs if s in region.blocks]
            if bid == region.exit or _reaches(cfg, region, starts,
                                              region.exit, skip):
                out.add(bid)
    return out


def ueunlock(cfg: Cfg, region: Region, pts: PointsToResult) -> set:
    """Unlock sites with a region-entry path free of aliasing locks
    (upward exposed)."""
    preds: dict[int, list[int]] = {b: [] for b in region.blocks}
    for b in region.blocks:
        for s in cfg.blocks[b].succs:
            if s in region.blocks:
                preds[s].append(b)
    out = set()
    for bid in region.blocks:
        for cs in cfg.blocks[bid].stmts:
            if not cs.is_unlock_point:
                continue
            mset = pts.sites.get(cs.mutex.site_id, frozenset())
            skip = _blocked_blocks(cfg, region, pts, mset, want_unlock=False)
            if bid == region.entry:
                out.add(bid)
                continue
            work = [p for p in preds[bid] if p not in skip]
            seen = set(work)
            found = False
            while work:
                b = work.pop()
                if b == region.entry:
                    found = True
                    break
                for p in preds[b]:
                    if p not in skip and p not in seen:
                        seen.add(p)
                        work.append(p)
            if found:
                out.add(bid)
    return out


# ---------------------------------------------------------------------------
# Feasibility over one unit

def _mset(pts: PointsToResult, m: MutexExpr) -> frozenset:
    return pts.sites.get(m.site_id, frozenset())


def analyze_unit(resolved: ResolvedProgram, pts: PointsToResult,
                 unit_name: str) -> UnitAnalysis:
    unit = resolved.units[unit_name]
    cfg = cfgmod.lower_unit(unit)
    cfgmod.normalize_defer(cfg)
    regions = cfgmod.build_regions(cfg)
    ua = UnitAnalysis(unit_name, cfg, regions)
    if cfg.multi_defer:
        ua.multi_defer = True
        for m in cfg.source_lu_points():
            ua.dropped.append(DroppedPoint(
                m, REASON_MULTIPLE_DEFER,
                "function has more than one deferred unlock"))
        return ua

    prepairs, splice_drops = cfgmod.splice(cfg, regions)
    dom_cache: dict[int, Dominance] = {}

    def dom_of(rid: int) -> Dominance:
        if rid not in dom_cache:
            dom_cache[rid] = cfgmod.region_dominance(cfg, regions[rid])
        return dom_cache[rid]

    for pp in prepairs:
        region = regions[pp.region]
        dl = dom_of(pp.region)
        pair = LuPair(
            lock=pp.lock.mutex, unlock=pp.unlock.mutex, unit=unit_name,
            region=pp.region, lock_bid=pp.lock_bid, unlock_bid=pp.unlock_bid,
            cs_blocks=frozenset(
                b for b in region.blocks
                if dl.dominates(pp.lock_bid, b)
                and dl.post_dominates(pp.unlock_bid, b)),
            via_defer=pp.unlock.kind == "synthetic-unlock",
        )
        ua.pairs.append(pair)
        _evaluate(pair, pp, cfg, region, dl, pts)

    matched_sites = set()
    for p in ua.pairs:
        matched_sites.add(id(p.lock))
        matched_sites.add(id(p.unlock))
    for m in cfg.source_lu_points():
        if id(m) not in matched_sites:
            why = next((d.why for d in splice_drops if d.stmt.mutex is m),
                       "no dominating lock-point pairs with this site")
            ua.dropped.append(DroppedPoint(m, REASON_DOMINANCE, why))
    return ua


def _evaluate(pair: LuPair, pp, cfg: Cfg, region: Region, dl: Dominance,
              pts: PointsToResult):
    lm = _mset(pts, pair.lock)
    um = _mset(pts, pair.unlock)
    if not (lm & um):
        pair.rejection = REASON_ALIAS_CONFLICT
        pair.detail = "lock and unlock may target disjoint mutexes"
        return
    if not (dl.dominates(pp.lock_bid, pp.unlock_bid)
            and dl.post_dominates(pp.unlock_bid, pp.lock_bid)):
        pair.rejection = REASON_DOMINANCE
        pair.detail = "mutual dominance does not hold"
        return
    if pp.lock_bid in delock(cfg, region, pts) \
            or pp.unlock_bid in ueunlock(cfg, region, pts):
        pair.rejection = REASON_EXPOSURE
        pair.detail = "critical section is exposed at a region boundary"
        return
    both = lm | um
    for bid in sorted(pair.cs_blocks):
        for cs in cfg.blocks[bid].stmts:
            if cs is pp.lock or cs is pp.unlock:
                continue
            if cs.is_lu_point:
                xm = _mset(pts, cs.mutex)
                if xm & both:
                    pair.rejection = REASON_ALIAS_CONFLICT
                    pair.detail = (
                        f"{'.'.join(cs.mutex.path)}.{cs.mutex.op}() inside "
                        "the section may touch the same mutex")
                    return
    for bid in sorted(pair.cs_blocks):
        for cs in cfg.blocks[bid].stmts:
            why = cfgmod.unfriendly_reason(cs)
            if why is not None:
                pair.rejection = REASON_IO
                pair.detail = f"section {why}"
                return
    _interproc(pair, cfg, pts, both)


def _interproc(pair: LuPair, cfg: Cfg, pts: PointsToResult, both: frozenset):
    roots = []
    for bid in sorted(pair.cs_blocks):
        for cs in cfg.blocks[bid].stmts:
            if cs.kind != "stmt" or cs.invisible:
                continue
            for t in call_targets(cs.node):
                if t in pts.callgraph.callable and t not in roots:
                    roots.append(t)
    if not roots:
        return
    closure = pts.callgraph.closure(roots)
    for fname in sorted(closure):
        summ = pts.summaries.get(fname)
        if summ is None:
            continue
        if not summ.htm_fit:
            pair.rejection = REASON_IO
            pair.detail = f"calls {fname}, which {summ.unfit_why}"
            return
        if summ.lu_union & both:
            pair.rejection = REASON_ALIAS_CONFLICT
            pair.detail = (f"calls {fname}, whose lock sites may touch "
                           "the same mutex")
            return


# ---------------------------------------------------------------------------
# Profile filter

def profile_filter(units: list[UnitAnalysis], profile: ProfileFile | None,
                   threshold: float = 0.01):
    if profile is None:
        return
    for ua in units:
        frac = profile.fraction(ua.unit)
        if frac >= threshold:
            continue
        for p in ua.pairs:
            if p.accepted:
                p.rejection = REASON_PROFILE_COLD
                p.detail = (f"function at {frac:.4f} of cumulative time, "
                            f"below {threshold:.2f}")


# ---------------------------------------------------------------------------
# Report

@dataclass
class AnalysisReport:
    lu_points: int = 0
    defer_unlocks: int = 0
    multi_defer_functions: int = 0
    dominance_dropped: int = 0
    candidate_pairs: int = 0
    rejected_io: int = 0
    rejected_alias: int = 0
    accepted_pairs: int = 0
    accepted_via_defer: int = 0
    profile_dropped: int = 0
    transformed_pairs: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        rows = [
            ("LU-points", self.lu_points),
            ("deferred unlocks", self.defer_unlocks),
            ("multiple-defer functions", self.multi_defer_functions),
            ("dropped: dominance", self.dominance_dropped),
            ("candidate pairs", self.candidate_pairs),
            ("rejected: I/O", self.rejected_io),
            ("rejected: alias conflict", self.rejected_alias),
            ("accepted pairs", self.accepted_pairs),
            ("  of which via defer", self.accepted_via_defer),
            ("dropped: cold by profile", self.profile_dropped),
            ("transformed pairs", self.transformed_pairs),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>5}" for k, v in rows) + "\n"


def build_report(units: list[UnitAnalysis]) -> AnalysisReport:
    rep = AnalysisReport()
    for ua in units:
        rep.lu_points += len(ua.cfg.source_lu_points())
        rep.defer_unlocks += sum(1 for m in ua.cfg.source_lu_points()
                                 if m.deferred)
        if ua.multi_defer:
            rep.multi_defer_functions += 1
            continue
        rep.dominance_dropped += sum(1 for d in ua.dropped
                                     if d.reason == REASON_DOMINANCE)
        for p in ua.pairs:
            rep.candidate_pairs += 1
            if p.rejection == REASON_IO:
                rep.rejected_io += 1
            elif p.rejection in (REASON_ALIAS_CONFLICT, REASON_EXPOSURE):
                rep.rejected_alias += 1
            elif p.rejection in (None, REASON_PROFILE_COLD):
                rep.accepted_pairs += 1
                if p.via_defer:
                    rep.accepted_via_defer += 1
                if p.rejection == REASON_PROFILE_COLD:
                    rep.profile_dropped += 1
                else:
                    rep.transformed_pairs += 1
    return rep


# ---------------------------------------------------------------------------
# Site-level outcomes for `elide explain`

@dataclass
class SiteOutcome:
    site: MutexExpr
    status: str
    detail: str
    partner: MutexExpr | None = None


def site_outcomes(units: list[UnitAnalysis]) -> list[SiteOutcome]:
    out = []
    for ua in units:
        for p in ua.pairs:
            status = p.rejection or REASON_ACCEPTED
            out.append(SiteOutcome(p.lock, status, p.detail, p.unlock))
            out.append(SiteOutcome(p.unlock, status, p.detail, p.lock))
        for d in ua.dropped:
            out.append(SiteOutcome(d.site, d.reason, d.detail))
    out.sort(key=lambda s: (s.site.site_id))
    return out


def describe_site(m: MutexExpr) -> str:
    star = "defer " if m.deferred else ""
    return f"{star}{'.'.join(m.path)}.{m.op}() at line {m.line} in {m.unit}"


def explain(units: list[UnitAnalysis], pts: PointsToResult) -> str:
    lines = []
    for s in site_outcomes(units):
        lines.append(f"{describe_site(s.site)}: {s.status}")
        if s.detail:
            lines.append(f"    {s.detail}")
        if s.partner is not None:
            rel = "unlocked by" if s.site.is_lock else "locked by"
            lines.append(f"    {rel} {describe_site(s.partner)}")
        objs = sorted(fmt_obj(o) for o in pts.sites.get(s.site.site_id, ()))
        lines.append(f"    may target: {', '.join(objs) if objs else '?'}")
    return "\n".join(lines) + ("\n" if lines else "")
