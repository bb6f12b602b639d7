"""Source patching: turn accepted pairs into FastLock/FastUnlock calls.

Each rewritten function (or spawned closure) gets one or more OptiLock
variables declared at the top of its body.  Pairs whose source intervals
do not overlap share a variable; nested or interleaved pairs get their
own, because an OptiLock tracks a single in-flight acquisition.  The
mutex argument is the receiver exactly as written: pointers pass through,
values gain a leading ``&``, and calls through an anonymous embed gain
the implicit field name, so ``a.Lock()`` on an embedded mutex becomes
``l.FastLock(a.Mutex)``.

The result is an ordinary unified diff; ``apply_patch`` replays one onto
original text and is what ``--in-place`` and the verifier use.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field

from .errors import PatchError, ScopeConflict
from .pairing import LuPair, UnitAnalysis
from .resolve import ResolvedProgram
from .syntax import MutexExpr

_FAST_OP = {"Lock": "FastLock", "Unlock": "FastUnlock",
            "RLock": "FastRLock", "RUnlock": "FastRUnlock"}


@dataclass
class Edit:
    path: str
    start: int
    end: int
    text: str


@dataclass
class PairRewrite:
    pair: LuPair
    var: str
    lock_edit: Edit
    unlock_edit: Edit


@dataclass
class RewritePlan:
    edits: list[Edit] = field(default_factory=list)
    pair_rewrites: list[PairRewrite] = field(default_factory=list)
    vars_by_unit: dict[str, list[str]] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.edits


@dataclass
class Patch:
    diff: str
    originals: dict[str, str]
    rewritten: dict[str, str]

    @property
    def empty(self) -> bool:
        return not self.diff.strip()


def _mutex_arg(m: MutexExpr, text: str) -> str:
    recv = text[m.recv_span.start:m.recv_span.end]
    if m.via_anonymous:
        recv = f"{recv}.{m.path[-1]}"
    if m.addressness == "value":
        recv = "&" + recv
    return recv


def _fresh_names(file_text: str, count: int, taken: set[str]) -> list[str]:
    names = []
    n = 1
    while len(names) < count:
        cand = f"__elide_l{n}"
        n += 1
        if cand in taken or re.search(rf"\b{re.escape(cand)}\b", file_text):
            if n > 10000:
                raise ScopeConflict("cannot find a free OptiLock variable name")
            continue
        taken.add(cand)
        names.append(cand)
    return names


def _assign_vars(pairs: list[LuPair]) -> list[list[LuPair]]:
    """First-fit sharing: a variable serves pairs whose guarded source
    intervals are pairwise disjoint."""
    groups: list[list[LuPair]] = []
    spans: list[list[tuple[int, int]]] = []
    for p in sorted(pairs, key=lambda p: p.lock.span.start):
        iv = (p.lock.span.start, p.unlock.span.end)
        placed = False
        for gi, g in enumerate(groups):
            if all(iv[1] <= s or iv[0] >= e for s, e in spans[gi]):
                g.append(p)
                spans[gi].append(iv)
                placed = True
                break
        if not placed:
            groups.append([p])
            spans.append([iv])
    return groups


def _body_insertion_point(text: str, body_span) -> tuple[int, str]:
    brace = text.index("{", body_span.start)
    nl = text.index("\n", brace)
    at = nl + 1
    line_end = text.find("\n", at)
    line = text[at:line_end if line_end != -1 else len(text)]
    indent = line[:len(line) - len(line.lstrip())] if line.strip() else "\t"
    return at, indent


def plan(resolved: ResolvedProgram, units: list[UnitAnalysis]) -> RewritePlan:
    out = RewritePlan()
    texts = {f.path: f.text for f in resolved.program.files}
    taken_by_file: dict[str, set[str]] = {}
    for ua in sorted(units, key=lambda u: (resolved.file_of_unit[u.unit],
                                           resolved.units[u.unit].span_start)):
        accepted = ua.accepted_pairs()
        if not accepted:
            continue
        unit = resolved.units[ua.unit]
        path = resolved.file_of_unit[ua.unit]
        text = texts[path]
        groups = _assign_vars(accepted)
        taken = taken_by_file.setdefault(path, set())
        names = _fresh_names(text, len(groups), taken)
        out.vars_by_unit[ua.unit] = names
        at, indent = _body_insertion_point(text, unit.body.span)
        decl = "".join(f"{indent}{v} := OptiLock{{}}\n" for v in names)
        out.edits.append(Edit(path, at, at, decl))
        for var, group in zip(names, groups):
            for p in group:
                arg = _mutex_arg(p.lock, text)
                le = Edit(path, p.lock.span.start, p.lock.span.end,
                          f"{var}.{_FAST_OP[p.lock.op]}({arg})")
                uarg = _mutex_arg(p.unlock, text)
                ue = Edit(path, p.unlock.span.start, p.unlock.span.end,
                          f"{var}.{_FAST_OP[p.unlock.op]}({uarg})")
                out.edits.append(le)
                out.edits.append(ue)
                out.pair_rewrites.append(PairRewrite(p, var, le, ue))
    return out


def rewrite_texts(resolved: ResolvedProgram, plan_: RewritePlan) -> dict[str, str]:
    texts = {f.path: f.text for f in resolved.program.files}
    by_file: dict[str, list[Edit]] = {}
    for e in plan_.edits:
        by_file.setdefault(e.path, []).append(e)
    for path, edits in by_file.items():
        edits.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(edits, edits[1:]):
            if b.start < a.end:
                raise PatchError(f"{path}: overlapping edits at {a.start}")
        text = texts[path]
        for e in reversed(edits):
            text = text[:e.start] + e.text + text[e.end:]
        texts[path] = text
    return texts


def emit(resolved: ResolvedProgram, plan_: RewritePlan) -> Patch:
    originals = {f.path: f.text for f in resolved.program.files}
    rewritten = rewrite_texts(resolved, plan_)
    chunks = []
    for path in sorted(originals):
        if originals[path] == rewritten[path]:
            continue
        diff = difflib.unified_diff(
            originals[path].splitlines(keepends=True),
            rewritten[path].splitlines(keepends=True),
            fromfile="a/" + path, tofile="b/" + path, n=3)
        chunks.append("".join(diff))
    return Patch("".join(chunks), originals, rewritten)


# ---------------------------------------------------------------------------
# Unified diff application

_HUNK_RE = re.compile(r"@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


def split_patch(diff: str) -> dict[str, list[str]]:
    """Per-target-file hunk line lists, keyed by the b/ path."""
    out: dict[str, list[str]] = {}
    cur: list[str] | None = None
    for line in diff.splitlines(keepends=True):
        if line.startswith("--- "):
            cur = None
            continue
        if line.startswith("+++ "):
            name = line[4:].split("\t")[0].strip()
            if name.startswith("b/"):
                name = name[2:]
            cur = out.setdefault(name, [])
            continue
        if cur is not None:
            cur.append(line)
    return out


def apply_patch(original: str, hunks: list[str], path: str = "<patch>") -> str:
    src = original.splitlines(keepends=True)
    dst: list[str] = []
    pos = 0
    i = 0
    while i < len(hunks):
        m = _HUNK_RE.match(hunks[i])
        if m is None:
            i += 1
            continue
        old_start = int(m.group(1))
        old_len = int(m.group(2) or "1")
        start = old_start - 1 if old_len else old_start
        if start < pos:
            raise PatchError(f"{path}: overlapping hunks")
        dst.extend(src[pos:start])
        pos = start
        i += 1
        while i < len(hunks) and not hunks[i].startswith("@@"):
            line = hunks[i]
            tag, body = line[:1], line[1:]
            if tag == "\\":
                pass                     # "\ No newline at end of file"
            elif tag in (" ", "-"):
                if pos >= len(src) or src[pos].rstrip("\n") != body.rstrip("\n"):
                    got = src[pos].rstrip("\n") if pos < len(src) else "<eof>"
                    raise PatchError(
                        f"{path}: hunk mismatch at line {pos + 1}: "
                        f"expected {body.rstrip()!r}, found {got!r}")
                if tag == " ":
                    dst.append(src[pos])
                pos += 1
            elif tag == "+":
                dst.append(body)
            i += 1
    dst.extend(src[pos:])
    return "".join(dst)


def apply_patch_set(originals: dict[str, str], diff: str) -> dict[str, str]:
    out = dict(originals)
    for path, hunks in split_patch(diff).items():
        if path not in out:
            raise PatchError(f"patch targets unknown file {path!r}")
        out[path] = apply_patch(out[path], hunks, path)
    return out
