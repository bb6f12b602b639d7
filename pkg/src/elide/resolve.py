"""Name and type resolution.

Binds every identifier to its declaration, infers expression types, lifts
spawned closures into standalone function units, and annotates every
lock/unlock call site with a ``MutexExpr``.  Resolution is idempotent:
re-running it recomputes the same annotations in place.

Types are plain tuples: ``("int",)``, ``("mutex",)``, ``("ptr", T)``,
``("map", K, V)``, ``("struct", name)``, ``("optilock",)``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .errors import ResolveError, UnsupportedConstruct
from .syntax import (AssignStmt, BinaryExpr, Block, BoolLit, CallExpr,
                     ClosureExpr, CompositeLit, DeclInfo, DeferStmt,
                     ExprStmt, ExternDecl, FastExpr, FieldExpr, ForStmt,
                     FuncDecl, GlobalVarDecl, Ident, IfStmt, IndexExpr,
                     IntLit, MapType, MutexExpr, NamedType, PointerType,
                     Program, ReturnStmt, ShortVarStmt, SpawnStmt, StrLit,
                     StructDecl, UnaryExpr, VarDeclStmt)

T_INT = ("int",)
T_BOOL = ("bool",)
T_STRING = ("string",)
T_MUTEX = ("mutex",)
T_RWMUTEX = ("rwmutex",)
T_OPTILOCK = ("optilock",)

LU_OPS = ("Lock", "Unlock", "RLock", "RUnlock")
FAST_OPS = ("FastLock", "FastUnlock", "FastRLock", "FastRUnlock")
BUILTIN_FUNCS = ("print", "panic", "delete", "len")


def fmt_type(t) -> str:
    if t is None:
        return "<none>"
    head = t[0]
    if head == "ptr":
        return "*" + fmt_type(t[1])
    if head == "map":
        return f"map[{fmt_type(t[1])}]{fmt_type(t[2])}"
    if head == "struct":
        return t[1]
    return head


def deref(t):
    while t is not None and t[0] == "ptr":
        t = t[1]
    return t


def is_copy_restricted(t) -> bool:
    """Mutexes and structs may not be copied by value; pass pointers."""
    return t is not None and t[0] in ("mutex", "rwmutex", "struct", "optilock")


def type_from_syntax(te, structs):
    if isinstance(te, PointerType):
        return ("ptr", type_from_syntax(te.elem, structs))
    if isinstance(te, MapType):
        return ("map", type_from_syntax(te.key, structs),
                type_from_syntax(te.value, structs))
    name = te.name
    builtin = {"int": T_INT, "bool": T_BOOL, "string": T_STRING,
               "Mutex": T_MUTEX, "RWMutex": T_RWMUTEX,
               "OptiLock": T_OPTILOCK}
    if name in builtin:
        return builtin[name]
    if name in structs:
        return ("struct", name)
    raise ResolveError(f"unknown type {name!r}")


def struct_field_type(structs, struct_name: str, fname: str):
    sd = structs.get(struct_name)
    if sd is None:
        return None
    for fd in sd.fields:
        if fd.name == fname:
            return type_from_syntax(fd.type_expr, structs)
    if sd.embed is not None and fname == sd.embed.field_name:
        base = T_MUTEX if sd.embed.kind == "mutex" else T_RWMUTEX
        return ("ptr", base) if sd.embed.pointer else base
    return None


@dataclass
class FunctionUnit:
    """One analyzable body: a top-level function, a method, or a lifted
    spawned closure."""
    name: str
    body: Block
    file: str
    decl: object                       # FuncDecl or ClosureExpr
    parent: str | None = None
    param_decls: list[DeclInfo] = field(default_factory=list)
    receiver_decl: DeclInfo | None = None
    closures: list[str] = field(default_factory=list)
    span_start: int = 0

    @property
    def is_closure(self) -> bool:
        return self.parent is not None

    @property
    def top_level_name(self) -> str:
        return self.name.split("$", 1)[0]


@dataclass
class ResolvedProgram:
    program: Program
    units: dict[str, FunctionUnit]
    structs: dict[str, StructDecl]
    globals: dict[str, GlobalVarDecl]
    externs: dict[str, ExternDecl]
    lu_points: list[MutexExpr]
    file_of_unit: dict[str, str]

    def unit_names_in_order(self) -> list[str]:
        return sorted(self.units, key=lambda n: (self.file_of_unit[n],
                                                 self.units[n].span_start))


class _Scope:
    def __init__(self, parent=None):
        self.parent = parent
        self.names: dict[str, DeclInfo] = {}

    def declare(self, info: DeclInfo):
        if info.name in self.names:
            raise ResolveError(f"{info.name!r} redeclared in this scope")
        self.names[info.name] = info

    def lookup(self, name: str) -> DeclInfo | None:
        s = self
        while s is not None:
            if name in s.names:
                return s.names[name]
            s = s.parent
        return None


class Resolver:
    def __init__(self, program: Program):
        self.program = program
        self.structs: dict[str, StructDecl] = {}
        self.funcs: dict[str, FuncDecl] = {}
        self.externs: dict[str, ExternDecl] = {}
        self.globals: dict[str, GlobalVarDecl] = {}
        self.global_scope = _Scope()
        self.units: dict[str, FunctionUnit] = {}
        self.file_of_unit: dict[str, str] = {}
        self.lu_points: list[MutexExpr] = []
        self.path = ""
        self.line_starts: list[int] = []
        self.unit_name = ""
        self.closure_counter: dict[str, int] = {}

    # -- public entry -------------------------------------------------------

    def run(self) -> ResolvedProgram:
        for f in self.program.files:
            for d in f.decls:
                if isinstance(d, StructDecl):
                    self._declare_top(self.structs, d.name, d, "struct")
                elif isinstance(d, FuncDecl):
                    self._declare_top(self.funcs, d.qual_name, d, "func")
                elif isinstance(d, ExternDecl):
                    self._declare_top(self.externs, d.name, d, "extern func")
                elif isinstance(d, GlobalVarDecl):
                    self._declare_top(self.globals, d.name, d, "global")
        for sd in self.structs.values():
            for fd in sd.fields:
                self.type_of(fd.type_expr)
        for f in self.program.files:
            self._set_file(f)
            for d in f.decls:
                if isinstance(d, GlobalVarDecl):
                    self.resolve_global(d)
        for f in self.program.files:
            self._set_file(f)
            for d in f.decls:
                if isinstance(d, FuncDecl):
                    self.resolve_func(d)
        return ResolvedProgram(self.program, self.units, self.structs,
                               self.globals, self.externs, self.lu_points,
                               self.file_of_unit)

    def _declare_top(self, table, name, decl, what):
        for t in (self.structs, self.funcs, self.externs, self.globals):
            if name in t:
                raise ResolveError(f"duplicate top-level name {name!r} ({what})")
        table[name] = decl

    def _set_file(self, f):
        self.path = f.path
        self.line_starts = [0]
        for i, ch in enumerate(f.text):
            if ch == "\n":
                self.line_starts.append(i + 1)

    def line_of(self, offset: int) -> int:
        return bisect.bisect_right(self.line_starts, offset)

    # -- types --------------------------------------------------------------

    def type_of(self, te):
        return type_from_syntax(te, self.structs)

    def field_type(self, struct_name: str, fname: str):
        return struct_field_type(self.structs, struct_name, fname)

    # -- globals ------------------------------------------------------------

    def resolve_global(self, d: GlobalVarDecl):
        self.unit_name = ""
        t = None
        if d.type_expr is not None:
            t = self.type_of(d.type_expr)
        if d.init is not None:
            it = self.infer(d.init, self.global_scope)
            self._check_init_copy(d.init, it)
            if t is None:
                t = it
        if t is None:
            raise ResolveError(f"global {d.name!r} needs a type or initializer")
        info = DeclInfo(d.name, "", "global", ("g", d.name), t)
        d.decl = info
        self.global_scope.declare(info)

    # -- functions ----------------------------------------------------------

    def resolve_func(self, d: FuncDecl):
        name = d.qual_name
        unit = FunctionUnit(name, d.body, self.path, d,
                            span_start=d.span.start)
        self.units[name] = unit
        self.file_of_unit[name] = self.path
        self.closure_counter[name] = 0
        scope = _Scope(self.global_scope)
        if d.receiver is not None:
            if d.receiver.type_name not in self.structs:
                raise ResolveError(f"receiver type {d.receiver.type_name!r} is not a struct")
            if not d.receiver.pointer:
                raise UnsupportedConstruct(
                    f"receiver {d.receiver.name!r}: structs may hold mutexes "
                    "and cannot be copied; use a pointer receiver")
            rt = ("ptr", ("struct", d.receiver.type_name))
            info = DeclInfo(d.receiver.name, name, "receiver",
                            ("v", name, d.receiver.name, d.receiver.span.start), rt)
            scope.declare(info)
            unit.receiver_decl = info
        for p in d.params:
            pt = self.type_of(p.type_expr)
            if is_copy_restricted(pt):
                raise UnsupportedConstruct(
                    f"parameter {p.name!r}: pass {fmt_type(pt)} by pointer")
            info = DeclInfo(p.name, name, "param",
                            ("v", name, p.name, p.span.start), pt)
            scope.declare(info)
            unit.param_decls.append(info)
        prev = self.unit_name
        self.unit_name = name
        self.resolve_block(d.body, scope)
        self.unit_name = prev

    def lift_closure(self, c: ClosureExpr, scope: _Scope) -> str:
        parent = self.unit_name
        idx = self.closure_counter.get(parent, 0) + 1
        self.closure_counter[parent] = idx
        name = f"{parent}${idx}"
        c.unit_name = name
        unit = FunctionUnit(name, c.body, self.path, c, parent=parent,
                            span_start=c.span.start)
        self.units[name] = unit
        self.file_of_unit[name] = self.path
        self.units[parent].closures.append(name)
        self.closure_counter[name] = 0
        prev = self.unit_name
        self.unit_name = name
        self.resolve_block(c.body, _Scope(scope))
        self.unit_name = prev
        return name

    # -- statements ---------------------------------------------------------

    def resolve_block(self, b: Block, scope: _Scope):
        inner = _Scope(scope)
        for s in b.stmts:
            self.resolve_stmt(s, inner)

    def resolve_stmt(self, s, scope: _Scope):
        if isinstance(s, ShortVarStmt):
            t = self.infer_rhs(s.expr, scope)
            self._check_init_copy(s.expr, t)
            info = DeclInfo(s.name, self.unit_name, "local",
                            ("v", self.unit_name, s.name, s.span.start), t)
            scope.declare(info)
            s.decl = info
        elif isinstance(s, VarDeclStmt):
            t = self.type_of(s.type_expr) if s.type_expr is not None else None
            if s.init is not None:
                it = self.infer_rhs(s.init, scope)
                self._check_init_copy(s.init, it)
                if t is None:
                    t = it
            if t is None:
                raise ResolveError(f"var {s.name!r} needs a type or initializer")
            info = DeclInfo(s.name, self.unit_name, "local",
                            ("v", self.unit_name, s.name, s.span.start), t)
            scope.declare(info)
            s.decl = info
        elif isinstance(s, AssignStmt):
            tt = self.infer(s.target, scope)
            rt = self.infer_rhs(s.expr, scope)
            if is_copy_restricted(tt):
                raise UnsupportedConstruct(
                    f"cannot assign {fmt_type(tt)} by value")
            if tt is not None and rt is not None and tt != rt:
                raise ResolveError(
                    f"cannot assign {fmt_type(rt)} to {fmt_type(tt)}")
        elif isinstance(s, ExprStmt):
            if not isinstance(s.expr, CallExpr):
                raise ResolveError("expression statement must be a call")
            self.resolve_call(s.expr, scope)
        elif isinstance(s, IfStmt):
            ct = self.infer(s.cond, scope)
            if ct != T_BOOL:
                raise ResolveError("if condition must be bool")
            self.resolve_block(s.then, scope)
            if isinstance(s.els, Block):
                self.resolve_block(s.els, scope)
            elif isinstance(s.els, IfStmt):
                self.resolve_stmt(s.els, scope)
        elif isinstance(s, ForStmt):
            loop_scope = _Scope(scope)
            if s.init is not None:
                self.resolve_stmt(s.init, loop_scope)
            ct = self.infer(s.cond, loop_scope)
            if ct != T_BOOL:
                raise ResolveError("for condition must be bool")
            if s.post is not None:
                self.resolve_stmt(s.post, loop_scope)
            self.resolve_block(s.body, loop_scope)
        elif isinstance(s, ReturnStmt):
            if s.expr is not None:
                t = self.infer(s.expr, scope)
                if is_copy_restricted(t):
                    raise UnsupportedConstruct(
                        f"cannot return {fmt_type(t)} by value")
        elif isinstance(s, DeferStmt):
            self.resolve_call(s.call, scope, deferred=True)
        elif isinstance(s, SpawnStmt):
            self.lift_closure(s.closure, scope)
        else:
            raise ResolveError(f"unhandled statement {type(s).__name__}")

    def _check_init_copy(self, e, t):
        if is_copy_restricted(t) and not isinstance(e, CompositeLit):
            raise UnsupportedConstruct(
                f"cannot copy {fmt_type(t)} by value; use a pointer")

    def infer_rhs(self, e, scope):
        if isinstance(e, CallExpr):
            return self.resolve_call(e, scope)
        return self.infer(e, scope)

    # -- calls --------------------------------------------------------------

    def resolve_call(self, call: CallExpr, scope: _Scope, deferred=False):
        call.mutex = None
        call.fast = None
        call.target = None
        callee = call.callee
        if isinstance(callee, Ident):
            return self._resolve_named_call(call, callee, scope)
        if isinstance(callee, FieldExpr):
            return self._resolve_selector_call(call, callee, scope, deferred)
        raise ResolveError("cannot call this expression")

    def _resolve_named_call(self, call, callee: Ident, scope):
        name = callee.name
        for arg in call.args:
            at = self.infer_rhs_arg(arg, scope)
            if is_copy_restricted(at):
                raise UnsupportedConstruct(
                    f"cannot pass {fmt_type(at)} by value; use a pointer")
        if name in BUILTIN_FUNCS:
            call.target = ("builtin", name)
            if name == "panic" and len(call.args) != 1:
                raise ResolveError("panic takes one argument")
            if name == "delete":
                if len(call.args) != 2 or (call.args[0].typ or ("",))[0] != "map":
                    raise ResolveError("delete takes a map and a key")
            if name == "len":
                if len(call.args) != 1 or \
                        (call.args[0].typ or ("",))[0] not in ("map", "string"):
                    raise ResolveError("len takes a map or string")
                call.typ = T_INT
            return call.typ
        if name in self.externs:
            ext = self.externs[name]
            if len(call.args) != len(ext.params):
                raise ResolveError(f"{name} expects {len(ext.params)} args")
            call.target = ("extern", name)
            return None
        if name in self.funcs:
            fd = self.funcs[name]
            if fd.receiver is not None:
                raise ResolveError(f"{name!r} is a method")
            self._check_args(call, fd)
            call.target = ("func", name)
            call.typ = self.type_of(fd.ret) if fd.ret is not None else None
            return call.typ
        raise ResolveError(f"unknown function {name!r}")

    def _resolve_selector_call(self, call, callee: FieldExpr, scope, deferred):
        recv = callee.base
        mname = callee.name
        rt = self.infer(recv, scope)
        base = deref(rt)
        if base in (T_MUTEX, T_RWMUTEX) and mname in LU_OPS:
            self._make_mutex_expr(call, recv, base, mname, rt, (), False, deferred)
            return None
        if base == T_OPTILOCK and mname in FAST_OPS:
            if len(call.args) != 1:
                raise ResolveError(f"{mname} takes one mutex argument")
            at = self.infer(call.args[0], scope)
            if deref(at) not in (T_MUTEX, T_RWMUTEX):
                raise ResolveError(f"{mname} argument must be a mutex")
            call.fast = FastExpr(mname, call.span, self.unit_name)
            call.target = ("fast", mname)
            return None
        if base is not None and base[0] == "struct":
            sname = base[1]
            qual = f"{sname}.{mname}"
            if qual in self.funcs:
                fd = self.funcs[qual]
                for arg in call.args:
                    at = self.infer_rhs_arg(arg, scope)
                    if is_copy_restricted(at):
                        raise UnsupportedConstruct(
                            f"cannot pass {fmt_type(at)} by value")
                self._check_args(call, fd)
                call.target = ("method", qual)
                call.typ = self.type_of(fd.ret) if fd.ret is not None else None
                return call.typ
            sd = self.structs[sname]
            if sd.embed is not None and mname in LU_OPS:
                ekind = T_MUTEX if sd.embed.kind == "mutex" else T_RWMUTEX
                self._make_mutex_expr(call, recv, ekind, mname, rt,
                                      (sd.embed.field_name,), True, deferred,
                                      embed_pointer=sd.embed.pointer)
                return None
            raise ResolveError(f"{sname} has no method {mname!r}")
        raise ResolveError(f"cannot call {mname!r} on {fmt_type(rt)}")

    def infer_rhs_arg(self, arg, scope):
        if isinstance(arg, CallExpr):
            raise UnsupportedConstruct("calls may not be nested in expressions")
        return self.infer(arg, scope)

    def _check_args(self, call, fd: FuncDecl):
        if len(call.args) != len(fd.params):
            raise ResolveError(f"{fd.qual_name} expects {len(fd.params)} args")
        for arg, p in zip(call.args, fd.params):
            pt = self.type_of(p.type_expr)
            if arg.typ is not None and arg.typ != pt:
                raise ResolveError(
                    f"argument to {fd.qual_name}: expected {fmt_type(pt)}, "
                    f"got {fmt_type(arg.typ)}")

    def _make_mutex_expr(self, call, recv, mkind, op, recv_type, extra_path,
                         via_anon, deferred, embed_pointer=False):
        if call.args:
            raise ResolveError(f"{op} takes no arguments")
        if mkind == T_MUTEX and op in ("RLock", "RUnlock"):
            raise ResolveError(f"{op} requires an RWMutex")
        path = self._path_of(recv)
        if path is None:
            raise UnsupportedConstruct(
                "lock receiver must be a variable or field path")
        if via_anon:
            addressness = "addr" if embed_pointer else "value"
        else:
            addressness = "addr" if recv_type[0] == "ptr" else "value"
        line = self.line_of(call.span.start)
        m = MutexExpr(
            op=op,
            kind="mutex" if mkind == T_MUTEX else "rwmutex",
            path=path + tuple(extra_path),
            addressness=addressness,
            via_anonymous=via_anon,
            deferred=deferred,
            span=call.span,
            recv_span=recv.span,
            unit=self.unit_name,
            site_id=f"{self.path}:{line}:{call.span.start}",
            line=line,
            root=self._root_binding(recv),
        )
        call.mutex = m
        call.target = ("lu", op)
        self.lu_points.append(m)

    def _root_binding(self, e):
        while isinstance(e, FieldExpr):
            e = e.base
        return e.binding if isinstance(e, Ident) else None

    def _path_of(self, e) -> tuple[str, ...] | None:
        parts: list[str] = []
        while True:
            if isinstance(e, Ident):
                parts.append(e.name)
                return tuple(reversed(parts))
            if isinstance(e, FieldExpr):
                parts.append(e.name)
                e = e.base
                continue
            return None

    # -- expressions --------------------------------------------------------

    def infer(self, e, scope: _Scope):
        t = self._infer(e, scope)
        e.typ = t
        return t

    def _infer(self, e, scope):
        if isinstance(e, IntLit):
            return T_INT
        if isinstance(e, BoolLit):
            return T_BOOL
        if isinstance(e, StrLit):
            return T_STRING
        if isinstance(e, Ident):
            info = scope.lookup(e.name)
            if info is None:
                raise ResolveError(f"unknown identifier {e.name!r}")
            e.binding = info
            return info.type
        if isinstance(e, FieldExpr):
            bt = deref(self.infer(e.base, scope))
            if bt is None or bt[0] != "struct":
                raise ResolveError(
                    f"field access on non-struct {fmt_type(bt)}")
            ft = self.field_type(bt[1], e.name)
            if ft is None:
                raise ResolveError(f"{bt[1]} has no field {e.name!r}")
            return ft
        if isinstance(e, IndexExpr):
            bt = self.infer(e.base, scope)
            if bt is None or bt[0] != "map":
                raise ResolveError("indexing requires a map")
            kt = self.infer(e.index, scope)
            if kt != bt[1]:
                raise ResolveError("map key type mismatch")
            return bt[2]
        if isinstance(e, UnaryExpr):
            if e.op == "&":
                return self._infer_addr(e, scope)
            ot = self.infer(e.operand, scope)
            if e.op == "!":
                if ot != T_BOOL:
                    raise ResolveError("! requires bool")
                return T_BOOL
            if ot != T_INT:
                raise ResolveError("unary - requires int")
            return T_INT
        if isinstance(e, BinaryExpr):
            lt = self.infer(e.left, scope)
            rt = self.infer(e.right, scope)
            op = e.op
            if op in ("&&", "||"):
                if lt != T_BOOL or rt != T_BOOL:
                    raise ResolveError(f"{op} requires bool operands")
                return T_BOOL
            if op in ("==", "!="):
                if lt != rt:
                    raise ResolveError("comparison of mismatched types")
                return T_BOOL
            if op in ("<", "<=", ">", ">="):
                if lt != T_INT or rt != T_INT:
                    raise ResolveError(f"{op} requires int operands")
                return T_BOOL
            if lt != T_INT or rt != T_INT:
                raise ResolveError(f"{op} requires int operands")
            return T_INT
        if isinstance(e, CompositeLit):
            t = self.type_of(e.type_expr)
            if t[0] not in ("mutex", "rwmutex", "optilock", "struct", "map"):
                raise ResolveError(f"cannot construct {fmt_type(t)} literal")
            return t
        if isinstance(e, CallExpr):
            raise UnsupportedConstruct("calls may not be nested in expressions")
        if isinstance(e, ClosureExpr):
            raise UnsupportedConstruct("closures are only allowed under spawn")
        raise ResolveError(f"unhandled expression {type(e).__name__}")

    def _infer_addr(self, e: UnaryExpr, scope):
        inner = e.operand
        if isinstance(inner, CompositeLit):
            t = self.infer(inner, scope)
            if t[0] == "map":
                raise UnsupportedConstruct("&map literal is not supported")
            return ("ptr", t)
        if isinstance(inner, (Ident, FieldExpr)):
            t = self.infer(inner, scope)
            if t is None or t[0] not in ("mutex", "rwmutex", "struct"):
                raise UnsupportedConstruct(
                    "& is only supported on mutex or struct storage")
            return ("ptr", t)
        raise UnsupportedConstruct("& requires a variable, field, or literal")


def resolve(program: Program) -> ResolvedProgram:
    return Resolver(program).run()
