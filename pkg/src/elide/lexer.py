"""Tokenizer for the subject language.

Newlines are significant: they terminate statements, so the lexer emits
NEWLINE tokens (collapsing blank runs) instead of discarding them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ParseError

KEYWORDS = {
    "func", "type", "struct", "var", "extern", "io", "if", "else", "for",
    "return", "defer", "spawn", "map", "true", "false",
}

TOKEN_REGEX = re.compile(
    r"""
    (?P<comment>//[^\n]*)
  | (?P<newline>\n)
  | (?P<ws>[ \t\r]+)
  | (?P<int>[0-9]+)
  | (?P<string>"(?:\\.|[^"\\\n])*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|==|!=|<=|>=|&&|\|\||[-+*/%!<>=&.,;(){}\[\]])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


@dataclass(frozen=True)
class Token:
    kind: str          # "int" | "string" | "ident" | keyword | operator | "newline" | "eof"
    text: str
    start: int
    end: int
    line: int
    col: int


def unescape(raw: str) -> str:
    body = raw[1:-1]
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            out.append(_ESCAPES.get(body[i + 1], body[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def tokenize(text: str, path: str = "<input>") -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    line = 1
    line_start = 0
    n = len(text)
    while pos < n:
        m = TOKEN_REGEX.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", path, line,
                             pos - line_start + 1)
        kind = m.lastgroup
        tok_text = m.group()
        start, end = m.start(), m.end()
        col = start - line_start + 1
        if kind == "newline":
            if tokens and tokens[-1].kind not in ("newline",):
                tokens.append(Token("newline", "\n", start, end, line, col))
            line += 1
            line_start = end
        elif kind in ("ws", "comment"):
            pass
        elif kind == "ident":
            k = tok_text if tok_text in KEYWORDS else "ident"
            tokens.append(Token(k, tok_text, start, end, line, col))
        elif kind == "op":
            tokens.append(Token(tok_text, tok_text, start, end, line, col))
        else:
            tokens.append(Token(kind, tok_text, start, end, line, col))
        pos = end
    tokens.append(Token("eof", "", n, n, line, n - line_start + 1))
    return tokens
