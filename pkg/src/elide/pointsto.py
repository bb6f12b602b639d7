"""Whole-program may-alias analysis for mutex expressions.

Andersen-style inclusion constraints, context-insensitive and flow-
insensitive but field-sensitive.  Every allocation site (composite
literal behind ``&``, map literal) is one abstract object; variable
storages are objects too, so a value-held mutex is identified by the
variable or field that holds it.  Struct fields are distinguished; map
elements are smashed into a single cell per map object.

Functions that nobody calls are analysis entry points: their pointer and
map parameters receive synthetic objects so every reachable lock site
ends with a non-empty target set.  Synthetic pointees materialize lazily
as access paths are walked and cycle back on themselves at depth two,
which keeps linked-structure traversals finite.

The same pass derives the static call graph (direct calls plus spawned
closures, with methods of never-instantiated types pruned) and a local
summary per function: whether the body itself is transaction-friendly,
and the union of target sets over its own lock and unlock sites.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .resolve import ResolvedProgram, deref, struct_field_type
from .syntax import (AssignStmt, CallExpr, CompositeLit, DeferStmt, ExprStmt,
                     FieldExpr, Ident, IndexExpr, MutexExpr, ReturnStmt,
                     ShortVarStmt, SpawnStmt, UnaryExpr, VarDeclStmt,
                     walk_exprs, walk_stmts)

SYN_DEPTH_LIMIT = 2


def fmt_obj(o: tuple) -> str:
    tag = o[0]
    if tag == "var":
        if o[1] == "g":
            return o[2]
        return f"{o[2]}.{o[3]}"
    if tag == "lit":
        return f"{o[1]}@{o[2]}:{o[3]}"
    if tag == "syn":
        return f"~{o[1]}.{o[2]}" if o[1] else f"~{o[2]}"
    if tag == "syn*":
        return fmt_cell(o[1]) + "^"
    if tag == "nil":
        return "nil@" + fmt_cell(o[1])
    return fmt_cell(o)


def fmt_cell(c: tuple) -> str:
    tag = c[0]
    if tag == "field":
        return f"{fmt_obj(c[1])}.{c[2]}"
    if tag == "elem":
        return f"{fmt_obj(c[1])}[*]"
    if tag == "tmp":
        return f"{c[1]}#t{c[2]}"
    if tag == "ret":
        return f"{c[1]}#ret"
    return fmt_obj(c)


@dataclass
class CallGraph:
    """Static call edges between function units, by unit name."""
    edges: dict[str, list[str]]
    spawn_edges: dict[str, list[str]]
    callable: set[str]
    entries: list[str]

    def closure(self, roots) -> set[str]:
        seen = set()
        work = list(roots)
        while work:
            f = work.pop()
            if f in seen:
                continue
            seen.add(f)
            work.extend(self.edges.get(f, ()))
        return seen


@dataclass
class FnSummary:
    unit: str
    htm_fit: bool
    unfit_why: str | None
    lu_union: frozenset


@dataclass
class PointsToResult:
    sites: dict[str, frozenset]          # LU site_id -> target object set
    callgraph: CallGraph
    summaries: dict[str, FnSummary]
    cells: dict[tuple, set]              # raw solver state, for tests/dumps

    def dump(self) -> dict:
        out = {}
        for sid in sorted(self.sites):
            out[sid] = sorted(fmt_obj(o) for o in self.sites[sid])
        return out


class _Solver:
    def __init__(self, resolved: ResolvedProgram):
        self.r = resolved
        self.pts: dict[tuple, set] = {}
        self.copy_edges: dict[tuple, list[tuple]] = {}
        self.fieldaddrs: dict[tuple, list[tuple]] = {}   # A -> [(fname, B)]
        self.elemaddrs: dict[tuple, list[tuple]] = {}    # A -> [B]
        self.derefcopies: dict[tuple, list[tuple]] = {}  # A -> [dst]
        self.derefstores: dict[tuple, list[tuple]] = {}  # A -> [src]
        self.obj_type: dict[tuple, object] = {}
        self.instantiated: set[str] = set()
        self.work: list[tuple] = []
        self.tmp_n = 0

    # -- cells --------------------------------------------------------------

    def cell_of(self, info) -> tuple:
        c = ("var",) + tuple(info.var_id)
        if c not in self.obj_type:
            self.obj_type[c] = info.type
            if info.type is not None and info.type[0] == "struct":
                self.instantiated.add(info.type[1])
        return c

    def tmp(self, unit: str) -> tuple:
        self.tmp_n += 1
        return ("tmp", unit, self.tmp_n)

    def type_of_cell(self, c: tuple):
        if c in self.obj_type:
            return self.obj_type[c]
        if c[0] == "field":
            bt = self.type_of_cell(c[1])
            bt = deref(bt)
            if bt is not None and bt[0] == "struct":
                return struct_field_type(self.r.structs, bt[1], c[2])
            return None
        if c[0] == "elem":
            bt = self.type_of_cell(c[1])
            if bt is not None and bt[0] == "map":
                return bt[2]
            return None
        return None

    # -- constraint primitives ----------------------------------------------

    def seed(self, cell: tuple, objs):
        cur = self.pts.setdefault(cell, set())
        new = set(objs) - cur
        if new:
            cur.update(new)
            self.work.append(cell)

    def copy(self, src: tuple, dst: tuple):
        if dst == src:
            return
        lst = self.copy_edges.setdefault(src, [])
        if dst not in lst:
            lst.append(dst)
            if self.pts.get(src):
                self.seed(dst, self.pts[src])

    def fieldaddr(self, a: tuple, fname: str, b: tuple):
        self.fieldaddrs.setdefault(a, []).append((fname, b))
        for o in list(self.pts.get(a, ())):
            self.seed(b, [("field", o, fname)])

    def elemaddr(self, a: tuple, b: tuple):
        self.elemaddrs.setdefault(a, []).append(b)
        for o in list(self.pts.get(a, ())):
            self.seed(b, [("elem", o)])

    def derefcopy(self, a: tuple, dst: tuple):
        self.derefcopies.setdefault(a, []).append(dst)
        for c in list(self.pts.get(a, ())):
            self._materialize(c)
            self.copy(c, dst)

    def derefstore(self, a: tuple, src: tuple):
        self.derefstores.setdefault(a, []).append(src)
        for c in list(self.pts.get(a, ())):
            self.copy(src, c)

    # -- synthetic worlds ---------------------------------------------------

    def _syn_rooted(self, c: tuple) -> bool:
        if c[0] in ("syn", "syn*"):
            return True
        if c[0] in ("field", "elem"):
            return self._syn_rooted(c[1])
        return False

    def _syn_depth(self, c: tuple) -> int:
        if c[0] == "syn*":
            return 1 + self._syn_depth(c[1])
        if c[0] in ("field", "elem"):
            return self._syn_depth(c[1])
        return 0

    def _materialize(self, c: tuple):
        """Give an empty synthetic-rooted pointer cell something to point
        at, cycling back to a same-typed ancestor past the depth limit."""
        if self.pts.get(c) or not self._syn_rooted(c):
            return
        t = self.type_of_cell(c)
        if t is None or t[0] not in ("ptr", "map"):
            return
        target_t = t[1] if t[0] == "ptr" else t
        if self._syn_depth(c) >= SYN_DEPTH_LIMIT:
            anc = self._ancestor_typed(c, target_t)
            if anc is not None:
                self.seed(c, [anc])
                return
        child = ("syn*", c)
        self.obj_type[child] = target_t
        if target_t[0] == "struct":
            self.instantiated.add(target_t[1])
        self.seed(c, [child])

    def _ancestor_typed(self, c: tuple, want):
        probe = c
        while True:
            if probe[0] in ("field", "elem"):
                probe = probe[1]
            elif probe[0] == "syn*":
                if self.obj_type.get(probe) == want:
                    return probe
                probe = probe[1]
            else:
                if self.obj_type.get(probe) == want:
                    return probe
                return None

    def syn_root(self, owner: str, name: str, t) -> tuple:
        o = ("syn", owner, name)
        self.obj_type[o] = t
        if t is not None and t[0] == "struct":
            self.instantiated.add(t[1])
        return o

    # -- fixpoint -----------------------------------------------------------

    def solve(self):
        while self.work:
            cell = self.work.pop()
            objs = self.pts.get(cell, set())
            for dst in self.copy_edges.get(cell, ()):
                self.seed(dst, objs)
            for fname, b in self.fieldaddrs.get(cell, ()):
                self.seed(b, [("field", o, fname) for o in objs])
            for b in self.elemaddrs.get(cell, ()):
                self.seed(b, [("elem", o) for o in objs])
            for dst in self.derefcopies.get(cell, ()):
                for c in list(objs):
                    self._materialize(c)
                    self.copy(c, dst)
            for src in self.derefstores.get(cell, ()):
                for c in list(objs):
                    self.copy(src, c)


class _Gen:
    """Constraint generation for one function unit (or the globals)."""

    def __init__(self, solver: _Solver, unit_name: str, file: str = ""):
        self.s = solver
        self.unit = unit_name
        self.file = file or solver.r.file_of_unit.get(unit_name, "")

    def stmt(self, st):
        s = self.s
        if isinstance(st, (ShortVarStmt, VarDeclStmt)):
            init = st.expr if isinstance(st, ShortVarStmt) else st.init
            if init is None or st.decl is None:
                return
            dst = s.cell_of(st.decl)
            self.init_into(init, dst, st.decl.type)
        elif isinstance(st, AssignStmt):
            if isinstance(st.expr, CallExpr):
                t = s.tmp(self.unit)
                self.call(st.expr, t)
                self.write(st.target, t)
            else:
                t = s.tmp(self.unit)
                self.read(st.expr, t)
                self.write(st.target, t)
        elif isinstance(st, ExprStmt):
            if isinstance(st.expr, CallExpr):
                self.call(st.expr, None)
        elif isinstance(st, DeferStmt):
            self.call(st.call, None)
        elif isinstance(st, ReturnStmt):
            if st.expr is not None:
                if isinstance(st.expr, CallExpr):
                    self.call(st.expr, ("ret", self.unit))
                else:
                    self.read(st.expr, ("ret", self.unit))

    def init_into(self, init, dst: tuple, decl_type):
        s = self.s
        if isinstance(init, CompositeLit):
            t = init.typ
            if t is not None and t[0] == "map":
                obj = self.lit_obj(init, t)
                s.seed(dst, [obj])
            elif t is not None and t[0] == "struct":
                s.instantiated.add(t[1])
            # value struct / mutex literal: the variable storage is the object
            return
        if isinstance(init, CallExpr):
            self.call(init, dst)
            return
        self.read(init, dst)

    def lit_obj(self, lit: CompositeLit, t) -> tuple:
        from .resolve import fmt_type
        obj = ("lit", fmt_type(t), self.file, lit.span.start)
        self.s.obj_type[obj] = t
        if t[0] == "struct":
            self.s.instantiated.add(t[1])
        return obj

    # place of an lvalue as an address set held in a cell
    def addr_of(self, e) -> tuple:
        s = self.s
        a = s.tmp(self.unit)
        if isinstance(e, Ident):
            s.seed(a, [s.cell_of(e.binding)])
            return a
        if isinstance(e, FieldExpr):
            bt = e.base.typ
            if bt is not None and bt[0] == "ptr":
                p = s.tmp(self.unit)
                self.read(e.base, p)
                s.fieldaddr(p, e.name, a)
            else:
                ab = self.addr_of(e.base)
                s.fieldaddr(ab, e.name, a)
            return a
        if isinstance(e, IndexExpr):
            p = s.tmp(self.unit)
            self.read(e.base, p)
            s.elemaddr(p, a)
            return a
        return a

    def read(self, e, dst: tuple):
        s = self.s
        if isinstance(e, (Ident, FieldExpr, IndexExpr)):
            a = self.addr_of(e)
            s.derefcopy(a, dst)
            return
        if isinstance(e, UnaryExpr) and e.op == "&":
            if isinstance(e.operand, CompositeLit):
                t = e.operand.typ
                obj = self.lit_obj(e.operand, deref(t) if t else None)
                s.seed(dst, [obj])
            else:
                a = self.addr_of(e.operand)
                s.copy(a, dst)
            return
        # literals, arithmetic, comparisons: no pointer flow

    def write(self, target, src: tuple):
        s = self.s
        if isinstance(target, Ident):
            s.copy(src, s.cell_of(target.binding))
            return
        a = self.addr_of(target)
        s.derefstore(a, src)

    def call(self, call: CallExpr, dst: tuple | None):
        s = self.s
        if call.mutex is not None or call.fast is not None:
            return
        if call.target is None:
            return
        kind, name = call.target
        if kind in ("builtin", "extern"):
            return
        if kind not in ("func", "method"):
            return
        unit = s.r.units.get(name)
        if unit is None:
            return
        if kind == "method" and isinstance(call.callee, FieldExpr):
            recv_cell = s.cell_of(unit.receiver_decl)
            self.read(call.callee.base, recv_cell)
        for arg, pd in zip(call.args, unit.param_decls):
            self.read(arg, s.cell_of(pd))
        if dst is not None:
            s.copy(("ret", name), dst)


# ---------------------------------------------------------------------------

def _collect_calls(stmt) -> list[CallExpr]:
    roots = []
    if isinstance(stmt, ExprStmt):
        roots = [stmt.expr]
    elif isinstance(stmt, (ShortVarStmt,)):
        roots = [stmt.expr]
    elif isinstance(stmt, VarDeclStmt):
        roots = [stmt.init] if stmt.init is not None else []
    elif isinstance(stmt, AssignStmt):
        roots = [stmt.expr]
    elif isinstance(stmt, DeferStmt):
        roots = [stmt.call]
    elif isinstance(stmt, ReturnStmt):
        roots = [stmt.expr] if stmt.expr is not None else []
    out = []
    for r in roots:
        for e in walk_exprs(r):
            if isinstance(e, CallExpr):
                out.append(e)
    return out


def call_targets(stmt) -> list[str]:
    """Unit names of functions a statement may call directly."""
    out = []
    for c in _collect_calls(stmt):
        if c.target is not None and c.target[0] in ("func", "method"):
            out.append(c.target[1])
    return out


def _build_callgraph(resolved: ResolvedProgram, instantiated: set[str]) -> CallGraph:
    edges: dict[str, list[str]] = {u: [] for u in resolved.units}
    spawns: dict[str, list[str]] = {u: [] for u in resolved.units}
    for uname in resolved.unit_names_in_order():
        unit = resolved.units[uname]
        for st in walk_stmts(unit.body):
            if isinstance(st, SpawnStmt):
                spawns[uname].append(st.closure.unit_name)
                continue
            for callee in call_targets(st):
                if callee not in edges[uname]:
                    edges[uname].append(callee)
    callable_units = set()
    for uname, unit in resolved.units.items():
        if unit.receiver_decl is not None:
            rtype = deref(unit.receiver_decl.type)
            if rtype[1] not in instantiated:
                continue
        callable_units.add(uname)
    for uname in edges:
        edges[uname] = [c for c in edges[uname] if c in callable_units]
    called = {c for cs in edges.values() for c in cs}
    called |= {c for cs in spawns.values() for c in cs}
    entries = [u for u in resolved.unit_names_in_order() if u not in called]
    return CallGraph(edges, spawns, callable_units, entries)


def _unfriendly_stmt_reason(st, in_unit_defers: int) -> str | None:
    if isinstance(st, SpawnStmt):
        return "spawns a worker"
    if isinstance(st, DeferStmt):
        m = st.call.mutex
        if m is not None and m.op in ("Unlock", "RUnlock"):
            return "multiple deferred unlocks" if in_unit_defers > 1 else None
        return "defers a call"
    for c in _collect_calls(st):
        if c.target == ("builtin", "print"):
            return "prints output"
        if c.target == ("builtin", "panic"):
            return "may panic"
        if c.target is not None and c.target[0] == "extern":
            return f"calls I/O function {c.target[1]}"
    return None


def _summaries(resolved: ResolvedProgram,
               sites: dict[str, frozenset]) -> dict[str, FnSummary]:
    by_unit: dict[str, list[MutexExpr]] = {u: [] for u in resolved.units}
    for m in resolved.lu_points:
        by_unit.setdefault(m.unit, []).append(m)
    out = {}
    for uname, unit in resolved.units.items():
        defers = sum(1 for st in walk_stmts(unit.body)
                     if isinstance(st, DeferStmt) and st.call.mutex is not None
                     and st.call.mutex.op in ("Unlock", "RUnlock"))
        why = None
        for st in walk_stmts(unit.body):
            why = _unfriendly_stmt_reason(st, defers)
            if why is not None:
                break
        union = frozenset().union(*(sites.get(m.site_id, frozenset())
                                    for m in by_unit.get(uname, ())),
                                  frozenset())
        out[uname] = FnSummary(uname, why is None, why, union)
    return out


def _site_set(solver: _Solver, m: MutexExpr) -> frozenset:
    if m.root is None:
        return frozenset([("syn", "site", m.site_id)])
    cells = {solver.cell_of(m.root)}
    cur_t = m.root.type
    for fname in m.path[1:]:
        if cur_t is not None and cur_t[0] == "ptr":
            objs = set()
            for c in cells:
                solver._materialize(c)
                objs |= solver.pts.get(c, set())
            cells = {("field", o, fname) for o in objs}
            cur_t = cur_t[1]
        else:
            cells = {("field", c, fname) for c in cells}
        bt = deref(cur_t)
        if bt is not None and bt[0] == "struct":
            cur_t = struct_field_type(solver.r.structs, bt[1], fname)
        else:
            cur_t = None
    if m.addressness == "addr":
        objs = set()
        for c in cells:
            solver._materialize(c)
            got = solver.pts.get(c, set())
            if got:
                objs |= got
            else:
                # never-assigned pointer cell: identify the target by the
                # cell itself so both ends of a pair on the same path alias
                objs.add(("nil", c))
        result = objs
    else:
        result = cells
    if not result:
        result = {("syn", "site", m.site_id)}
    return frozenset(result)


def analyze(resolved: ResolvedProgram) -> PointsToResult:
    solver = _Solver(resolved)

    # globals: declared storages, initializers as a pseudo-unit
    file_of_global = {}
    for f in resolved.program.files:
        for d in f.decls:
            file_of_global[id(d)] = f.path
    for name, g in resolved.globals.items():
        cell = solver.cell_of(g.decl)
        gen = _Gen(solver, "", file_of_global.get(id(g), ""))
        if g.init is not None:
            gen.init_into(g.init, cell, g.decl.type)
        elif g.decl.type is not None and g.decl.type[0] in ("ptr", "map"):
            t = g.decl.type
            syn = solver.syn_root("", name, t[1] if t[0] == "ptr" else t)
            solver.seed(cell, [syn])

    for uname in resolved.unit_names_in_order():
        gen = _Gen(solver, uname)
        for st in walk_stmts(resolved.units[uname].body):
            gen.stmt(st)

    pre_graph = _build_callgraph(resolved, set(resolved.structs))
    for uname in pre_graph.entries:
        unit = resolved.units[uname]
        params = list(unit.param_decls)
        if unit.receiver_decl is not None:
            params.append(unit.receiver_decl)
        for pd in params:
            t = pd.type
            if t is None or t[0] not in ("ptr", "map"):
                continue
            syn = solver.syn_root(uname, pd.name, t[1] if t[0] == "ptr" else t)
            solver.seed(solver.cell_of(pd), [syn])

    solver.solve()

    sites = {}
    for m in resolved.lu_points:
        sites[m.site_id] = _site_set(solver, m)
    solver.solve()          # materialization during site walks may add facts
    for m in resolved.lu_points:
        sites[m.site_id] = _site_set(solver, m)

    graph = _build_callgraph(resolved, solver.instantiated)
    summaries = _summaries(resolved, sites)
    return PointsToResult(sites, graph, summaries, solver.pts)
