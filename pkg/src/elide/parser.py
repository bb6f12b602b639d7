"""Recursive-descent parser producing the span-carrying AST.

Statements are newline-terminated.  Composite literals (``T{}``) are not
recognized inside ``if``/``for`` header expressions, mirroring how Go
resolves the same ambiguity.
"""

from __future__ import annotations

from .errors import ParseError
from .lexer import Token, tokenize, unescape
from .syntax import (AssignStmt, BinaryExpr, Block, BoolLit, CallExpr,
                     ClosureExpr, CompositeLit, DeferStmt, EmbedDecl,
                     ExprStmt, ExternDecl, FieldDecl, FieldExpr, ForStmt,
                     FuncDecl, GlobalVarDecl, Ident, IfStmt, IndexExpr,
                     IntLit, MapType, NamedType, Param, PointerType, Program,
                     Receiver, ReturnStmt, ShortVarStmt, SourceFile, Span,
                     SpawnStmt, StrLit, StructDecl, UnaryExpr, VarDeclStmt)

_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")


class Parser:
    def __init__(self, text: str, path: str):
        self.text = text
        self.path = path
        self.toks = tokenize(text, path)
        self.i = 0
        self.no_composite = 0       # >0 while parsing an if/for header

    # -- token helpers ------------------------------------------------------

    def peek(self, off: int = 0) -> Token:
        return self.toks[min(self.i + off, len(self.toks) - 1)]

    def at(self, kind: str) -> bool:
        return self.peek().kind == kind

    def take(self) -> Token:
        tok = self.toks[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def expect(self, kind: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            self.fail(f"expected {kind!r}, found {tok.kind!r}")
        return self.take()

    def fail(self, msg: str):
        tok = self.peek()
        raise ParseError(msg, self.path, tok.line, tok.col)

    def skip_newlines(self):
        while self.at("newline"):
            self.take()

    def end_stmt(self):
        if self.at("newline"):
            self.take()
            self.skip_newlines()
        elif self.at("}") or self.at("eof"):
            pass
        else:
            self.fail("expected end of statement")

    # -- declarations -------------------------------------------------------

    def parse_file(self) -> SourceFile:
        decls = []
        self.skip_newlines()
        while not self.at("eof"):
            decls.append(self.parse_decl())
            self.skip_newlines()
        return SourceFile(self.path, self.text, decls)

    def parse_decl(self):
        if self.at("func"):
            return self.parse_func()
        if self.at("type"):
            return self.parse_struct()
        if self.at("var"):
            return self.parse_global_var()
        if self.at("extern"):
            return self.parse_extern()
        self.fail("expected declaration")

    def parse_func(self) -> FuncDecl:
        start = self.expect("func")
        receiver = None
        if self.at("("):
            self.take()
            rname = self.expect("ident").text
            pointer = False
            if self.at("*"):
                self.take()
                pointer = True
            rtype = self.expect("ident").text
            self.expect(")")
            receiver = Receiver(rname, rtype, pointer,
                                Span(start.start, self.peek().start))
        name = self.expect("ident").text
        params = self.parse_params()
        ret = None
        if not self.at("{") and not self.at("newline"):
            ret = self.parse_type()
        self.skip_newlines()
        body = self.parse_block()
        return FuncDecl(name, receiver, params, ret, body,
                        Span(start.start, body.span.end))

    def parse_params(self) -> list[Param]:
        self.expect("(")
        params = []
        while not self.at(")"):
            nt = self.expect("ident")
            t = self.parse_type()
            params.append(Param(nt.text, t, Span(nt.start, self.peek().start)))
            if self.at(","):
                self.take()
        self.expect(")")
        return params

    def parse_struct(self):
        start = self.expect("type")
        name = self.expect("ident").text
        self.expect("struct")
        self.expect("{")
        self.skip_newlines()
        fields: list[FieldDecl] = []
        embed = None
        while not self.at("}"):
            if self.at("*") or (self.at("ident") and self.peek().text in ("Mutex", "RWMutex")
                                and self.peek(1).kind == "newline"):
                first = self.peek()
                pointer = False
                if self.at("*"):
                    self.take()
                    pointer = True
                tname = self.expect("ident")
                if tname.text not in ("Mutex", "RWMutex"):
                    self.fail("only Mutex or RWMutex may be embedded")
                if embed is not None:
                    self.fail("at most one anonymous mutex embed per struct")
                kind = "mutex" if tname.text == "Mutex" else "rwmutex"
                embed = EmbedDecl(kind, pointer, Span(first.start, tname.end))
            else:
                nt = self.expect("ident")
                t = self.parse_type()
                fields.append(FieldDecl(nt.text, t, Span(nt.start, self.peek().start)))
            self.skip_newlines()
        end = self.expect("}")
        return StructDecl(name, fields, embed, Span(start.start, end.end))

    def parse_global_var(self) -> GlobalVarDecl:
        start = self.expect("var")
        name = self.expect("ident").text
        type_expr = None
        init = None
        if not self.at("=") and not self.at("newline"):
            type_expr = self.parse_type()
        if self.at("="):
            self.take()
            init = self.parse_expr()
        end = self.toks[self.i - 1].end
        return GlobalVarDecl(name, type_expr, init, Span(start.start, end))

    def parse_extern(self) -> ExternDecl:
        start = self.expect("extern")
        self.expect("io")
        self.expect("func")
        name = self.expect("ident").text
        params = self.parse_params()
        return ExternDecl(name, params, Span(start.start, self.toks[self.i - 1].end))

    # -- types --------------------------------------------------------------

    def parse_type(self):
        tok = self.peek()
        if tok.kind == "*":
            self.take()
            elem = self.parse_type()
            return PointerType(elem, Span(tok.start, elem.span.end))
        if tok.kind == "map":
            self.take()
            self.expect("[")
            key = self.parse_type()
            self.expect("]")
            value = self.parse_type()
            return MapType(key, value, Span(tok.start, value.span.end))
        if tok.kind == "ident":
            self.take()
            return NamedType(tok.text, Span(tok.start, tok.end))
        self.fail("expected type")

    # -- statements ---------------------------------------------------------

    def parse_block(self) -> Block:
        lb = self.expect("{")
        self.skip_newlines()
        stmts = []
        while not self.at("}"):
            stmts.append(self.parse_stmt())
        rb = self.expect("}")
        return Block(stmts, Span(lb.start, rb.end))

    def parse_stmt(self):
        tok = self.peek()
        if tok.kind == "var":
            s = self.parse_var_stmt()
            self.end_stmt()
            return s
        if tok.kind == "if":
            s = self.parse_if()
            self.end_stmt()
            return s
        if tok.kind == "for":
            s = self.parse_for()
            self.end_stmt()
            return s
        if tok.kind == "return":
            self.take()
            expr = None
            if not self.at("newline") and not self.at("}"):
                expr = self.parse_expr()
            s = ReturnStmt(expr, Span(tok.start, self.toks[self.i - 1].end))
            self.end_stmt()
            return s
        if tok.kind == "defer":
            self.take()
            call = self.parse_expr()
            if not isinstance(call, CallExpr):
                self.fail("defer requires a call")
            s = DeferStmt(call, Span(tok.start, call.span.end))
            self.end_stmt()
            return s
        if tok.kind == "spawn":
            self.take()
            if not self.at("func"):
                self.fail("spawn requires an anonymous func() closure")
            closure = self.parse_closure()
            self.expect("(")
            end = self.expect(")")
            s = SpawnStmt(closure, Span(tok.start, end.end))
            self.end_stmt()
            return s
        s = self.parse_simple_stmt()
        self.end_stmt()
        return s

    def parse_var_stmt(self) -> VarDeclStmt:
        start = self.expect("var")
        name = self.expect("ident").text
        type_expr = None
        init = None
        if not self.at("=") and not self.at("newline"):
            type_expr = self.parse_type()
        if self.at("="):
            self.take()
            init = self.parse_expr()
        return VarDeclStmt(name, type_expr, init,
                           Span(start.start, self.toks[self.i - 1].end))

    def parse_simple_stmt(self):
        """Short var decl, assignment, or expression statement."""
        tok = self.peek()
        if tok.kind == "ident" and self.peek(1).kind == ":=":
            self.take()
            self.take()
            expr = self.parse_expr()
            return ShortVarStmt(tok.text, expr, Span(tok.start, expr.span.end))
        expr = self.parse_expr()
        if self.at("="):
            self.take()
            rhs = self.parse_expr()
            if not isinstance(expr, (Ident, FieldExpr, IndexExpr)):
                self.fail("cannot assign to this expression")
            return AssignStmt(expr, rhs, Span(expr.span.start, rhs.span.end))
        if not isinstance(expr, CallExpr):
            self.fail("expression is not a statement")
        return ExprStmt(expr, Span(expr.span.start, expr.span.end))

    def parse_if(self) -> IfStmt:
        start = self.expect("if")
        self.no_composite += 1
        cond = self.parse_expr()
        self.no_composite -= 1
        then = self.parse_block()
        els = None
        if self.at("else"):
            self.take()
            if self.at("if"):
                els = self.parse_if()
            else:
                els = self.parse_block()
        end = els.span.end if els is not None else then.span.end
        return IfStmt(cond, then, els, Span(start.start, end))

    def parse_for(self) -> ForStmt:
        start = self.expect("for")
        self.no_composite += 1
        init = None
        post = None
        if self.at(";"):
            self.take()
            cond = self.parse_expr()
            self.expect(";")
            if not self.at("{"):
                post = self.parse_simple_stmt()
        else:
            first = self.parse_simple_stmt_or_expr()
            if self.at(";"):
                self.take()
                if isinstance(first, _ExprMarker):
                    self.fail("for-loop init must be a statement")
                init = first
                cond = self.parse_expr()
                self.expect(";")
                if not self.at("{"):
                    post = self.parse_simple_stmt()
            else:
                if not isinstance(first, _ExprMarker):
                    self.fail("for-loop condition must be an expression")
                cond = first.expr
        self.no_composite -= 1
        body = self.parse_block()
        return ForStmt(init, cond, post, body, Span(start.start, body.span.end))

    def parse_simple_stmt_or_expr(self):
        tok = self.peek()
        if tok.kind == "ident" and self.peek(1).kind == ":=":
            return self.parse_simple_stmt()
        expr = self.parse_expr()
        if self.at("="):
            self.take()
            rhs = self.parse_expr()
            return AssignStmt(expr, rhs, Span(expr.span.start, rhs.span.end))
        return _ExprMarker(expr)

    def parse_closure(self) -> ClosureExpr:
        start = self.expect("func")
        self.expect("(")
        self.expect(")")
        save = self.no_composite
        self.no_composite = 0
        self.skip_newlines()
        body = self.parse_block()
        self.no_composite = save
        return ClosureExpr(body, Span(start.start, body.span.end))

    # -- expressions --------------------------------------------------------

    def parse_expr(self):
        return self.parse_or()

    def parse_or(self):
        left = self.parse_and()
        while self.at("||"):
            self.take()
            right = self.parse_and()
            left = BinaryExpr("||", left, right, Span(left.span.start, right.span.end))
        return left

    def parse_and(self):
        left = self.parse_cmp()
        while self.at("&&"):
            self.take()
            right = self.parse_cmp()
            left = BinaryExpr("&&", left, right, Span(left.span.start, right.span.end))
        return left

    def parse_cmp(self):
        left = self.parse_add()
        while self.peek().kind in _CMP_OPS:
            op = self.take().kind
            right = self.parse_add()
            left = BinaryExpr(op, left, right, Span(left.span.start, right.span.end))
        return left

    def parse_add(self):
        left = self.parse_mul()
        while self.peek().kind in ("+", "-"):
            op = self.take().kind
            right = self.parse_mul()
            left = BinaryExpr(op, left, right, Span(left.span.start, right.span.end))
        return left

    def parse_mul(self):
        left = self.parse_unary()
        while self.peek().kind in ("*", "/", "%"):
            op = self.take().kind
            right = self.parse_unary()
            left = BinaryExpr(op, left, right, Span(left.span.start, right.span.end))
        return left

    def parse_unary(self):
        tok = self.peek()
        if tok.kind in ("!", "-", "&"):
            self.take()
            operand = self.parse_unary()
            return UnaryExpr(tok.kind, operand, Span(tok.start, operand.span.end))
        return self.parse_postfix()

    def parse_postfix(self):
        expr = self.parse_primary()
        while True:
            if self.at("."):
                self.take()
                name = self.expect("ident")
                expr = FieldExpr(expr, name.text, Span(expr.span.start, name.end))
            elif self.at("("):
                self.take()
                args = []
                while not self.at(")"):
                    args.append(self.parse_expr())
                    if self.at(","):
                        self.take()
                end = self.expect(")")
                expr = CallExpr(expr, args, Span(expr.span.start, end.end))
            elif self.at("["):
                self.take()
                index = self.parse_expr()
                end = self.expect("]")
                expr = IndexExpr(expr, index, Span(expr.span.start, end.end))
            else:
                return expr

    def parse_primary(self):
        tok = self.peek()
        if tok.kind == "int":
            self.take()
            return IntLit(int(tok.text), Span(tok.start, tok.end))
        if tok.kind == "string":
            self.take()
            return StrLit(unescape(tok.text), Span(tok.start, tok.end))
        if tok.kind in ("true", "false"):
            self.take()
            return BoolLit(tok.kind == "true", Span(tok.start, tok.end))
        if tok.kind == "map":
            t = self.parse_type()
            self.expect("{")
            end = self.expect("}")
            return CompositeLit(t, Span(t.span.start, end.end))
        if tok.kind == "ident":
            self.take()
            if self.at("{") and self.no_composite == 0:
                self.take()
                end = self.expect("}")
                t = NamedType(tok.text, Span(tok.start, tok.end))
                return CompositeLit(t, Span(tok.start, end.end))
            return Ident(tok.text, Span(tok.start, tok.end))
        if tok.kind == "(":
            self.take()
            inner = self.parse_expr()
            self.expect(")")
            return inner
        self.fail(f"unexpected token {tok.kind!r}")


class _ExprMarker:
    def __init__(self, expr):
        self.expr = expr


def parse_file(text: str, path: str = "<input>") -> SourceFile:
    return Parser(text, path).parse_file()


def parse_program(sources: dict[str, str]) -> Program:
    return Program([parse_file(text, path) for path, text in sources.items()])
