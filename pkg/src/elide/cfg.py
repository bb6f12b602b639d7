"""Control-flow graphs with lock-aware block boundaries.

Lowering gives every lock-point and unlock-point its own basic block, so a
lock-point is always the first statement of its block and an unlock-point
the last.  A dedicated exit block collects every return edge.  Deferred
unlocks are normalized by hiding the original statement from analysis and
appending a synthetic unlock block on each edge into the exit, which makes
the usual dominance reasoning apply to ``defer``-style critical sections.

Regions follow the structured syntax: one region for the whole function
body, plus one per loop body.  They nest into a program structure tree
that pairing visits innermost-first.  Straight-line pair splicing matches
each lock-point to its nearest post-dominating unlock-point, accepting the
match only when the reverse lookup lands back on the same lock
(mutual-nearest) and the points-to sets intersect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .resolve import FunctionUnit
from .syntax import (AssignStmt, CallExpr, DeferStmt, ExprStmt, ForStmt,
                     IfStmt, MutexExpr, ReturnStmt, ShortVarStmt, SpawnStmt,
                     VarDeclStmt)


@dataclass
class CfgStmt:
    kind: str                    # "stmt" | "cond" | "synthetic-unlock"
    node: object
    mutex: MutexExpr | None = None
    origin: object = None        # DeferStmt node for synthetic unlocks
    invisible: bool = False

    @property
    def is_lock_point(self) -> bool:
        return (self.kind == "stmt" and self.mutex is not None
                and self.mutex.is_lock and not self.invisible)

    @property
    def is_unlock_point(self) -> bool:
        if self.kind == "synthetic-unlock":
            return True
        return (self.kind == "stmt" and self.mutex is not None
                and not self.mutex.is_lock and not self.invisible)

    @property
    def is_lu_point(self) -> bool:
        return self.is_lock_point or self.is_unlock_point

    def describe(self) -> str:
        if self.kind == "synthetic-unlock":
            return f"~{'.'.join(self.mutex.path)}.{self.mutex.op}()"
        if self.kind == "cond":
            return "branch"
        if self.mutex is not None:
            return f"{'.'.join(self.mutex.path)}.{self.mutex.op}()"
        return type(self.node).__name__


@dataclass
class BasicBlock:
    bid: int
    stmts: list[CfgStmt] = field(default_factory=list)
    succs: list[int] = field(default_factory=list)
    preds: list[int] = field(default_factory=list)


@dataclass
class LoopInfo:
    header: int
    body_entry: int
    body_exit: int
    body_blocks: set[int]


@dataclass
class Region:
    """Single-entry single-exit region used as the pairing scope."""
    rid: int
    kind: str                    # "function" | "loop"
    blocks: set[int]
    entry: int
    exit: int
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    depth: int = 0


@dataclass
class Dominance:
    dom: dict[int, set[int]]     # node -> set of dominators (reflexive)
    pdom: dict[int, set[int]]
    idom: dict[int, int | None]
    ipdom: dict[int, int | None]

    def dominates(self, a: int, b: int) -> bool:
        return a in self.dom.get(b, ())

    def post_dominates(self, a: int, b: int) -> bool:
        return a in self.pdom.get(b, ())


@dataclass
class Cfg:
    unit: str
    blocks: dict[int, BasicBlock]
    entry: int
    exit: int
    loops: list[LoopInfo]
    unreachable_dropped: int = 0
    multi_defer: bool = False
    defer_unlock: CfgStmt | None = None

    def succs_map(self) -> dict[int, list[int]]:
        return {b: list(self.blocks[b].succs) for b in self.blocks}

    def lu_points(self) -> list[tuple[int, CfgStmt]]:
        out = []
        for bid in sorted(self.blocks):
            for cs in self.blocks[bid].stmts:
                if cs.is_lu_point:
                    out.append((bid, cs))
        return out

    def source_lu_points(self) -> list[MutexExpr]:
        """LU points as written, with a deferred unlock counted once."""
        seen = []
        for bid in sorted(self.blocks):
            for cs in self.blocks[bid].stmts:
                if cs.kind == "stmt" and cs.mutex is not None:
                    seen.append(cs.mutex)
                elif cs.kind == "stmt" and isinstance(cs.node, DeferStmt) \
                        and cs.node.call.mutex is not None:
                    seen.append(cs.node.call.mutex)
        return seen


# ---------------------------------------------------------------------------
# Lowering

class _Lowerer:
    def __init__(self, unit: FunctionUnit):
        self.unit = unit
        self.blocks: dict[int, BasicBlock] = {}
        self.next_id = 0
        self.loops: list[LoopInfo] = []
        self.loop_stack: list[set[int]] = []

    def new_block(self) -> BasicBlock:
        b = BasicBlock(self.next_id)
        self.blocks[b.bid] = b
        self.next_id += 1
        for open_body in self.loop_stack:
            open_body.add(b.bid)
        return b

    def edge(self, a: BasicBlock, b: BasicBlock):
        a.succs.append(b.bid)

    def run(self) -> Cfg:
        entry = self.new_block()
        exit_b = self.new_block()
        self.exit = exit_b
        cur = self.lower_block(self.unit.body, entry)
        if cur is not None:
            self.edge(cur, exit_b)
        cfg = Cfg(self.unit.name, self.blocks, entry.bid, exit_b.bid, self.loops)
        _prune_unreachable(cfg)
        _drop_empty_blocks(cfg)
        _recompute_preds(cfg)
        _refresh_loops(cfg)
        return cfg

    def lower_block(self, block, cur: BasicBlock | None) -> BasicBlock | None:
        for s in block.stmts:
            cur = self.lower_stmt(s, cur)
        return cur

    def lower_stmt(self, s, cur: BasicBlock | None) -> BasicBlock | None:
        if cur is None:
            cur = self.new_block()      # unreachable continuation
        if isinstance(s, ExprStmt) and s.expr.mutex is not None:
            lu = self.new_block()
            lu.stmts.append(CfgStmt("stmt", s, mutex=s.expr.mutex))
            self.edge(cur, lu)
            nxt = self.new_block()
            self.edge(lu, nxt)
            return nxt
        if isinstance(s, IfStmt):
            cur.stmts.append(CfgStmt("cond", s.cond))
            then_b = self.new_block()
            self.edge(cur, then_b)
            then_end = self.lower_block(s.then, then_b)
            if isinstance(s.els, IfStmt):
                else_b = self.new_block()
                self.edge(cur, else_b)
                else_end = self.lower_stmt(s.els, else_b)
            elif s.els is not None:
                else_b = self.new_block()
                self.edge(cur, else_b)
                else_end = self.lower_block(s.els, else_b)
            else:
                else_b = None
                else_end = None
            join = self.new_block()
            if else_b is None:
                self.edge(cur, join)
            if then_end is not None:
                self.edge(then_end, join)
            if else_end is not None:
                self.edge(else_end, join)
            return join
        if isinstance(s, ForStmt):
            if s.init is not None:
                cur.stmts.append(CfgStmt("stmt", s.init))
            header = self.new_block()
            header.stmts.append(CfgStmt("cond", s.cond))
            self.edge(cur, header)
            body_set: set[int] = set()
            self.loop_stack.append(body_set)
            body_entry = self.new_block()
            self.edge(header, body_entry)
            body_end = self.lower_block(s.body, body_entry)
            if body_end is not None:
                if s.post is not None:
                    body_end.stmts.append(CfgStmt("stmt", s.post))
                self.edge(body_end, header)
            self.loop_stack.pop()
            after = self.new_block()
            self.edge(header, after)
            self.loops.append(LoopInfo(header.bid, body_entry.bid,
                                       body_end.bid if body_end else body_entry.bid,
                                       body_set))
            return after
        if isinstance(s, ReturnStmt):
            cur.stmts.append(CfgStmt("stmt", s))
            self.edge(cur, self.exit)
            return None
        if isinstance(s, ExprStmt) and isinstance(s.expr, CallExpr) \
                and s.expr.target == ("builtin", "panic"):
            cur.stmts.append(CfgStmt("stmt", s))
            self.edge(cur, self.exit)
            return None
        cur.stmts.append(CfgStmt("stmt", s))
        return cur


def _prune_unreachable(cfg: Cfg):
    seen = {cfg.entry}
    work = [cfg.entry]
    while work:
        b = work.pop()
        for s in cfg.blocks[b].succs:
            if s not in seen:
                seen.add(s)
                work.append(s)
    seen.add(cfg.exit)
    dropped = [b for b in cfg.blocks if b not in seen]
    cfg.unreachable_dropped = sum(1 for b in dropped if cfg.blocks[b].stmts)
    for b in dropped:
        del cfg.blocks[b]
    for b in cfg.blocks.values():
        b.succs = [s for s in b.succs if s in cfg.blocks]


def _drop_empty_blocks(cfg: Cfg):
    changed = True
    while changed:
        changed = False
        for bid in sorted(cfg.blocks):
            b = cfg.blocks[bid]
            if b.stmts or bid == cfg.exit or len(b.succs) != 1:
                continue
            succ = b.succs[0]
            if succ == bid:
                continue
            if bid == cfg.entry:
                cfg.entry = succ
            for other in cfg.blocks.values():
                other.succs = [succ if s == bid else s for s in other.succs]
                deduped = []
                for s in other.succs:
                    if s not in deduped:
                        deduped.append(s)
                other.succs = deduped
            del cfg.blocks[bid]
            changed = True
            break


def _recompute_preds(cfg: Cfg):
    for b in cfg.blocks.values():
        b.preds = []
    for b in sorted(cfg.blocks):
        for s in cfg.blocks[b].succs:
            cfg.blocks[s].preds.append(b)


def _refresh_loops(cfg: Cfg):
    kept = []
    for li in cfg.loops:
        if li.header not in cfg.blocks:
            continue
        body = {b for b in li.body_blocks if b in cfg.blocks}
        header_succs = cfg.blocks[li.header].succs
        entry = next((s for s in header_succs if s in body), None)
        back = next((b for b in sorted(body)
                     if li.header in cfg.blocks[b].succs), None)
        if entry is None or back is None or not body:
            continue
        kept.append(LoopInfo(li.header, entry, back, body))
    cfg.loops = kept


def lower_unit(unit: FunctionUnit) -> Cfg:
    return _Lowerer(unit).run()


# ---------------------------------------------------------------------------
# defer normalization

def normalize_defer(cfg: Cfg):
    """Make deferred unlocks visible to dominance-based pairing.

    The original ``defer m.Unlock()`` statement keeps its place in the
    block (its span is what the rewrite edits) but becomes invisible to
    analysis; a synthetic unlock block is spliced onto every edge into the
    exit.  More than one deferred unlock in a function is beyond what the
    pairing rules can express, so the whole function is flagged instead.
    """
    deferred = []
    for bid in sorted(cfg.blocks):
        for cs in cfg.blocks[bid].stmts:
            if cs.kind != "stmt" or not isinstance(cs.node, DeferStmt):
                continue
            m = cs.node.call.mutex
            if m is not None and m.op in ("Unlock", "RUnlock"):
                deferred.append(cs)
    if not deferred:
        return
    if len(deferred) > 1:
        cfg.multi_defer = True
        return
    target = deferred[0]
    target.invisible = True
    cfg.defer_unlock = target
    mex = target.node.call.mutex
    next_id = max(cfg.blocks) + 1
    exit_preds = list(cfg.blocks[cfg.exit].preds)
    for p in exit_preds:
        nb = BasicBlock(next_id)
        next_id += 1
        nb.stmts.append(CfgStmt("synthetic-unlock", target.node, mutex=mex,
                                origin=target.node))
        cfg.blocks[nb.bid] = nb
        pb = cfg.blocks[p]
        pb.succs = [nb.bid if s == cfg.exit else s for s in pb.succs]
        nb.succs = [cfg.exit]
    _recompute_preds(cfg)


# ---------------------------------------------------------------------------
# Dominance

def compute_dom_sets(succs: dict[int, list[int]], entry: int) -> dict[int, set[int]]:
    """Iterative dataflow dominators: dom(n) = {n} | intersect over preds."""
    preds: dict[int, list[int]] = {n: [] for n in succs}
    for n in succs:
        for s in succs[n]:
            preds[s].append(n)
    order = _rpo(succs, entry)
    allnodes = set(order)
    dom = {n: set(allnodes) for n in order}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for n in order:
            if n == entry:
                continue
            ps = [p for p in preds[n] if p in allnodes]
            new = set.intersection(*(dom[p] for p in ps)) if ps else set()
            new.add(n)
            if new != dom[n]:
                dom[n] = new
                changed = True
    for n in succs:
        if n not in dom:
            dom[n] = set()         # unreachable within this subgraph
    return dom


def _rpo(succs, entry) -> list[int]:
    seen = set()
    post = []

    def dfs(n):
        seen.add(n)
        for s in succs.get(n, ()):
            if s not in seen:
                dfs(s)
        post.append(n)

    dfs(entry)
    return list(reversed(post))


def idoms_from_sets(dom: dict[int, set[int]], entry: int) -> dict[int, int | None]:
    idom: dict[int, int | None] = {}
    for n, ds in dom.items():
        strict = ds - {n}
        if not strict:
            idom[n] = None
            continue
        idom[n] = max(strict, key=lambda d: len(dom[d]))
    idom[entry] = None
    return idom


def subgraph_dominance(succs: dict[int, list[int]], entry: int, exit: int) -> Dominance:
    dom = compute_dom_sets(succs, entry)
    rsuccs: dict[int, list[int]] = {n: [] for n in succs}
    for n in succs:
        for s in succs[n]:
            rsuccs[s].append(n)
    pdom = compute_dom_sets(rsuccs, exit)
    return Dominance(dom, pdom, idoms_from_sets(dom, entry),
                     idoms_from_sets(pdom, exit))


def build_dominance(cfg: Cfg) -> Dominance:
    return subgraph_dominance(cfg.succs_map(), cfg.entry, cfg.exit)


# ---------------------------------------------------------------------------
# Regions and the program structure tree

def build_regions(cfg: Cfg) -> list[Region]:
    regions = [Region(0, "function", set(cfg.blocks), cfg.entry, cfg.exit)]
    loops = sorted(cfg.loops, key=lambda li: len(li.body_blocks))
    for li in loops:
        regions.append(Region(len(regions), "loop", set(li.body_blocks),
                              li.body_entry, li.body_exit))
    # attach each region to the smallest strictly containing one
    for r in regions[1:]:
        best = 0
        for cand in regions[1:]:
            if cand.rid != r.rid and r.blocks < cand.blocks \
                    and len(cand.blocks) < len(regions[best].blocks):
                best = cand.rid
        r.parent = best
        regions[best].children.append(r.rid)
    for r in regions:
        d = 0
        p = r.parent
        while p is not None:
            d += 1
            p = regions[p].parent
        r.depth = d
    return regions


def innermost_region(regions: list[Region], bid: int) -> int:
    best = 0
    for r in regions[1:]:
        if bid in r.blocks and len(r.blocks) < len(regions[best].blocks):
            best = r.rid
    return best


def region_dominance(cfg: Cfg, region: Region) -> Dominance:
    succs = {b: [s for s in cfg.blocks[b].succs if s in region.blocks]
             for b in region.blocks}
    return subgraph_dominance(succs, region.entry, region.exit)


# ---------------------------------------------------------------------------
# Straight-line splicing

@dataclass
class PrePair:
    lock_bid: int
    lock: CfgStmt
    unlock_bid: int
    unlock: CfgStmt
    region: int


@dataclass
class SpliceDrop:
    stmt: CfgStmt
    bid: int
    why: str


def splice(cfg: Cfg, regions: list[Region]) -> tuple[list[PrePair], list[SpliceDrop]]:
    """Match lock-points to unlock-points region by region, innermost first.

    Within a region, lock blocks are visited bottom-up in the dominator
    tree.  Each lock looks up the nearest unmatched post-dominating
    unlock-point; the match holds only if that unlock's nearest unmatched
    dominating lock-point is the original lock (mutual-nearest).  Matched
    blocks drop out of later lookups.  The walk is purely structural; the
    may-alias and fitness conditions are applied to the resulting
    pre-pairs by the selection pass.
    """
    pairs: list[PrePair] = []
    drops: list[SpliceDrop] = []
    matched: set[int] = set()
    lu_by_block = {bid: cs for bid, cs in cfg.lu_points()}

    order = sorted(regions, key=lambda r: (-r.depth, r.rid))
    for region in order:
        local = [bid for bid in lu_by_block
                 if innermost_region(regions, bid) == region.rid]
        if not local:
            continue
        dl = region_dominance(cfg, region)
        lock_bids = [b for b in local if lu_by_block[b].is_lock_point]
        # innermost first: deeper dominator-tree nodes before shallower
        lock_bids.sort(key=lambda b: (-_tree_depth(dl.idom, b), b))
        for lb in lock_bids:
            if lb in matched:
                continue
            unlock_op = {"Lock": "Unlock", "RLock": "RUnlock"}[
                lu_by_block[lb].mutex.op]
            ub = _nearest(dl.ipdom, lb, matched,
                          lambda b: b in lu_by_block
                          and lu_by_block[b].is_unlock_point
                          and lu_by_block[b].mutex.op == unlock_op)
            if ub is None:
                drops.append(SpliceDrop(lu_by_block[lb], lb,
                                        "no post-dominating unlock-point"))
                continue
            lock_op = lu_by_block[lb].mutex.op
            back = _nearest(dl.idom, ub, matched,
                            lambda b: b in lu_by_block
                            and lu_by_block[b].is_lock_point
                            and lu_by_block[b].mutex.op == lock_op)
            if back != lb:
                drops.append(SpliceDrop(lu_by_block[lb], lb,
                                        "nearest-unlock lookup is not mutual"))
                continue
            pairs.append(PrePair(lb, lu_by_block[lb], ub, lu_by_block[ub],
                                 region.rid))
            matched.add(lb)
            matched.add(ub)
    return pairs, drops


def _tree_depth(idom: dict[int, int | None], n: int) -> int:
    d = 0
    while idom.get(n) is not None:
        n = idom[n]
        d += 1
    return d


def _nearest(parent: dict[int, int | None], start: int, matched: set[int],
             want) -> int | None:
    n = parent.get(start)
    while n is not None:
        if n not in matched and want(n):
            return n
        n = parent.get(n)
    return None


# ---------------------------------------------------------------------------
# Statement fitness for transactional execution

def unfriendly_reason(cs: CfgStmt) -> str | None:
    """Why a statement cannot run inside a hardware-style transaction,
    or None if it is harmless (arithmetic, field and map access, locks)."""
    if cs.kind != "stmt" or cs.invisible:
        return None
    node = cs.node
    if isinstance(node, SpawnStmt):
        return "spawns a worker"
    if isinstance(node, DeferStmt):
        return "defers a call"
    call = None
    if isinstance(node, ExprStmt) and isinstance(node.expr, CallExpr):
        call = node.expr
    elif isinstance(node, (ShortVarStmt, VarDeclStmt)):
        init = node.expr if isinstance(node, ShortVarStmt) else node.init
        if isinstance(init, CallExpr):
            call = init
    elif isinstance(node, AssignStmt) and isinstance(node.expr, CallExpr):
        call = node.expr
    if call is None:
        return None
    if call.target == ("builtin", "print"):
        return "prints output"
    if call.target == ("builtin", "panic"):
        return "panics"
    if call.target is not None and call.target[0] == "extern":
        return f"calls I/O function {call.target[1]}"
    return None


def dot(cfg: Cfg, regions: list[Region] | None = None) -> str:
    """Graphviz rendering for --dump-cfg."""
    lines = [f'digraph "{cfg.unit}" {{', "  node [shape=box, fontname=monospace];"]
    for bid in sorted(cfg.blocks):
        b = cfg.blocks[bid]
        label = "\\n".join([f"B{bid}"] + [cs.describe() for cs in b.stmts])
        extra = ""
        if bid == cfg.entry:
            extra = ", color=green"
        elif bid == cfg.exit:
            extra = ", color=red"
        lines.append(f'  b{bid} [label="{label}"{extra}];')
    for bid in sorted(cfg.blocks):
        for s in cfg.blocks[bid].succs:
            lines.append(f"  b{bid} -> b{s};")
    if regions:
        for r in regions:
            if r.kind == "loop":
                members = " ".join(f"b{b}" for b in sorted(r.blocks))
                lines.append(f"  // loop region {r.rid}: {members}")
    lines.append("}")
    return "\n".join(lines) + "\n"
