"""AST for the subject language.

Every node carries a half-open span ``[start, end)`` of offsets into the
file it was parsed from.  The rewriter works purely with spans and string
splicing, so the parse keeps the original text around and never
pretty-prints: serializing an unmodified program is the identity.

Invariants:
  - spans of sibling nodes never overlap;
  - a node's span contains the spans of all of its children;
  - ``MutexExpr`` annotations are attached by ``resolve`` and their spans
    cover the whole call expression (``a.Lock()``, not just ``Lock``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Union


@dataclass(frozen=True)
class Span:
    start: int
    end: int

    def slice(self, text: str) -> str:
        return text[self.start:self.end]


# ---------------------------------------------------------------------------
# Types

@dataclass
class NamedType:
    name: str
    span: Span


@dataclass
class PointerType:
    elem: "TypeExpr"
    span: Span


@dataclass
class MapType:
    key: "TypeExpr"
    value: "TypeExpr"
    span: Span


TypeExpr = Union[NamedType, PointerType, MapType]


# ---------------------------------------------------------------------------
# Expressions

@dataclass
class IntLit:
    value: int
    span: Span
    typ: object = None


@dataclass
class StrLit:
    value: str
    span: Span
    typ: object = None


@dataclass
class BoolLit:
    value: bool
    span: Span
    typ: object = None


@dataclass
class Ident:
    name: str
    span: Span
    typ: object = None
    binding: object = None          # filled by resolve: DeclInfo or ("func", name) etc.


@dataclass
class FieldExpr:
    base: "Expr"
    name: str
    span: Span
    typ: object = None


@dataclass
class IndexExpr:
    base: "Expr"
    index: "Expr"
    span: Span
    typ: object = None


@dataclass
class UnaryExpr:
    op: str                          # "!", "-", "&"
    operand: "Expr"
    span: Span
    typ: object = None


@dataclass
class BinaryExpr:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span
    typ: object = None


@dataclass
class CompositeLit:
    """``Mutex{}``, ``OptiLock{}``, ``AStruct{}``, ``map[int]int{}``."""
    type_expr: TypeExpr
    span: Span
    typ: object = None


@dataclass
class CallExpr:
    callee: "Expr"
    args: list["Expr"]
    span: Span
    typ: object = None
    mutex: Optional["MutexExpr"] = None   # set by resolve when this is an LU op
    fast: Optional["FastExpr"] = None     # set by resolve for FastLock family
    target: object = None                 # ("func"|"method"|"extern"|"builtin", name)


@dataclass
class ClosureExpr:
    """Anonymous ``func() { ... }``; only legal directly under ``spawn``."""
    body: "Block"
    span: Span
    unit_name: str = ""              # assigned by resolve, e.g. "main$1"
    typ: object = None


Expr = Union[IntLit, StrLit, BoolLit, Ident, FieldExpr, IndexExpr,
             UnaryExpr, BinaryExpr, CompositeLit, CallExpr, ClosureExpr]


# ---------------------------------------------------------------------------
# Statements

@dataclass
class Block:
    stmts: list["Stmt"]
    span: Span                       # covers both braces


@dataclass
class ShortVarStmt:
    name: str
    expr: Expr
    span: Span
    decl: object = None              # DeclInfo from resolve


@dataclass
class VarDeclStmt:
    name: str
    type_expr: Optional[TypeExpr]
    init: Optional[Expr]
    span: Span
    decl: object = None


@dataclass
class AssignStmt:
    target: Expr                     # Ident / FieldExpr / IndexExpr chain
    expr: Expr
    span: Span


@dataclass
class ExprStmt:
    expr: Expr                       # call in statement position
    span: Span


@dataclass
class IfStmt:
    cond: Expr
    then: Block
    els: Union[Block, "IfStmt", None]
    span: Span


@dataclass
class ForStmt:
    init: Optional["Stmt"]
    cond: Expr
    post: Optional["Stmt"]
    body: Block
    span: Span


@dataclass
class ReturnStmt:
    expr: Optional[Expr]
    span: Span


@dataclass
class DeferStmt:
    call: CallExpr
    span: Span


@dataclass
class SpawnStmt:
    closure: ClosureExpr
    span: Span


Stmt = Union[ShortVarStmt, VarDeclStmt, AssignStmt, ExprStmt, IfStmt,
             ForStmt, ReturnStmt, DeferStmt, SpawnStmt]


# ---------------------------------------------------------------------------
# Declarations

@dataclass
class FieldDecl:
    name: str
    type_expr: TypeExpr
    span: Span


@dataclass
class EmbedDecl:
    """Anonymous mutex embedding inside a struct: ``Mutex`` / ``*RWMutex``."""
    kind: str                        # "mutex" | "rwmutex"
    pointer: bool
    span: Span

    @property
    def field_name(self) -> str:
        return "Mutex" if self.kind == "mutex" else "RWMutex"


@dataclass
class StructDecl:
    name: str
    fields: list[FieldDecl]
    embed: Optional[EmbedDecl]
    span: Span


@dataclass
class Param:
    name: str
    type_expr: TypeExpr
    span: Span


@dataclass
class Receiver:
    name: str
    type_name: str
    pointer: bool
    span: Span


@dataclass
class FuncDecl:
    name: str
    receiver: Optional[Receiver]
    params: list[Param]
    ret: Optional[TypeExpr]
    body: Block
    span: Span

    @property
    def qual_name(self) -> str:
        if self.receiver is not None:
            return f"{self.receiver.type_name}.{self.name}"
        return self.name


@dataclass
class GlobalVarDecl:
    name: str
    type_expr: Optional[TypeExpr]
    init: Optional[Expr]
    span: Span
    decl: object = None


@dataclass
class ExternDecl:
    """``extern io func name(params)``: declared but not defined; calling it
    is treated as I/O and is hostile to transactional execution."""
    name: str
    params: list[Param]
    span: Span


Decl = Union[StructDecl, FuncDecl, GlobalVarDecl, ExternDecl]


# ---------------------------------------------------------------------------
# Files and programs

@dataclass
class SourceFile:
    path: str
    text: str
    decls: list[Decl]


@dataclass
class Program:
    files: list[SourceFile]

    def render(self) -> dict[str, str]:
        """Serialize back to text.  With no edits this is the identity."""
        return {f.path: f.text for f in self.files}


# ---------------------------------------------------------------------------
# Resolution products

@dataclass(frozen=True)
class DeclInfo:
    """One variable declaration site (global, param, receiver, or local)."""
    name: str
    unit: str                        # "" for globals
    kind: str                        # "global" | "param" | "receiver" | "local"
    var_id: tuple
    type: object = dataclasses.field(compare=False, default=None, hash=False)


@dataclass
class MutexExpr:
    """A resolved lock or unlock call site (an LU-point candidate).

    ``path`` is the receiver access path as written, extended with the
    implicit embedded field name when the call goes through an anonymous
    mutex embed.  ``addressness`` records whether the final mutex is
    reached by address ("addr": receiver already is a ``*Mutex``) or held
    by value ("value": the rewrite must prefix ``&``).
    """
    op: str                          # "Lock" | "Unlock" | "RLock" | "RUnlock"
    kind: str                        # "mutex" | "rwmutex"
    path: tuple[str, ...]
    addressness: str                 # "addr" | "value"
    via_anonymous: bool
    deferred: bool
    span: Span                       # whole call expression
    recv_span: Span                  # just the receiver expression
    unit: str
    site_id: str
    line: int
    root: object = None              # DeclInfo of the path's first segment

    @property
    def is_lock(self) -> bool:
        return self.op in ("Lock", "RLock")


@dataclass
class FastExpr:
    """A resolved FastLock/FastUnlock-family call.  Never an LU-point."""
    op: str                          # "FastLock" | "FastUnlock" | "FastRLock" | "FastRUnlock"
    span: Span
    unit: str


def walk_stmts(block: Block):
    """Yield every statement in a block, recursing into nested blocks but
    not into closures (closures are separate function units)."""
    for s in block.stmts:
        yield s
        if isinstance(s, IfStmt):
            yield from walk_stmts(s.then)
            if isinstance(s.els, Block):
                yield from walk_stmts(s.els)
            elif isinstance(s.els, IfStmt):
                yield from walk_stmts(_wrap(s.els))
        elif isinstance(s, ForStmt):
            if s.init is not None:
                yield s.init
            if s.post is not None:
                yield s.post
            yield from walk_stmts(s.body)


def _wrap(stmt: IfStmt) -> Block:
    return Block([stmt], stmt.span)


def walk_exprs(e: Expr):
    """Yield an expression and all of its subexpressions."""
    yield e
    children: list[Expr] = []
    if isinstance(e, (FieldExpr,)):
        children = [e.base]
    elif isinstance(e, IndexExpr):
        children = [e.base, e.index]
    elif isinstance(e, UnaryExpr):
        children = [e.operand]
    elif isinstance(e, BinaryExpr):
        children = [e.left, e.right]
    elif isinstance(e, CallExpr):
        children = [e.callee] + list(e.args)
    for c in children:
        yield from walk_exprs(c)
