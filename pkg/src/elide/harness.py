"""Deterministic concurrent execution of subject programs.

The interpreter is an explicit machine: each worker holds a stack of
activations, each activation a stack of block cursors, and one scheduler
step executes exactly one statement of one runnable worker.  All shared
state (globals, locals, struct fields, map entries, mutex state words)
lives in engine cells, so transactional buffering and conflict dooming
from the runtime module apply uniformly; rolling a transaction back is
restoring a control snapshot plus discarding the write buffer.

Worker model: worker 0 runs main after globals initialize; spawn creates
workers in program order; the program ends when every worker finishes
(as if main joined them all).  A panic halts the whole program at once;
deferred calls run only on normal function exit, LIFO, with operands
evaluated at defer time.  Blocked workers are not runnable; a write to a
mutex state word wakes all its waiters.  If nothing is runnable while
some worker is blocked, the run ends in Deadlock with a held-lock
diagnosis.

Behavioral equivalence is judged on footprints: the canonical final
values of globals (following pointers, with first-visit numbering so raw
allocation order never leaks in) plus the ordered log of print and
extern-call output, plus the terminal status.  ``explore`` enumerates
schedules by stateless re-execution: it replays a prefix of decisions,
takes the first runnable worker afterwards, and branches depth-first on
every decision point, deduplicating footprints, up to an interleaving
budget.

Every mutex value carries the allocation tag the static may-alias pass
would assign it, so a run can check that each executed lock site touches
only statically predicted objects.
"""

from __future__ import annotations

import gc
import hashlib
import random
from dataclasses import dataclass, field

from .errors import Deadlock, RuntimePanic
from .resolve import ResolvedProgram, deref, fmt_type, struct_field_type
from .runtime import (ABORT_UNFRIENDLY, FREE, Engine, EngineConfig,
                      FastLockRec, TxAbort)
from .syntax import (AssignStmt, BinaryExpr, Block, BoolLit, CallExpr,
                     CompositeLit, DeferStmt, ExprStmt, FieldExpr, ForStmt,
                     Ident, IfStmt, IndexExpr, IntLit, ReturnStmt,
                     ShortVarStmt, SpawnStmt, StrLit, UnaryExpr, VarDeclStmt)


class _Sentinel:
    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name


NIL = _Sentinel("nil")
ABSENT = _Sentinel("<absent>")


@dataclass(frozen=True, slots=True)
class Ptr:
    cell: tuple


@dataclass(frozen=True, slots=True)
class StructRef:
    oid: int
    type_name: str
    tag: tuple


@dataclass(frozen=True, slots=True)
class MapRef:
    mid: int
    value_type: tuple
    tag: tuple


@dataclass(frozen=True, slots=True)
class MutexVal:
    serial: int
    kind: str                        # "mutex" | "rwmutex"
    tag: tuple


@dataclass(frozen=True, slots=True)
class OptiLockVal:
    key: int
    site: int                        # declaration offset, the context feature


# ---------------------------------------------------------------------------
# Schedules, results

@dataclass(slots=True)
class Schedule:
    seed: int = 0
    worker_count: int = 2
    max_steps: int = 200000


@dataclass(frozen=True)
class Footprint:
    globals: tuple                   # ((name, canonical-value), ...)
    output: tuple                    # ((worker, text), ...)
    status: str                      # "done" | "deadlock" | "bound" | "panic: .."

    @property
    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    footprint: Footprint
    stats: object
    steps: int
    trace: list
    decisions: list                  # (choice-count, chosen-index) pairs
    error: object = None
    observations: list = field(default_factory=list)   # (site_id, mutex tag)

    @property
    def status(self) -> str:
        return self.footprint.status


@dataclass
class ExploreResult:
    footprints: dict                 # canonical footprint -> Footprint
    executions: int
    partial: bool

    def statuses(self) -> set:
        return {fp.status for fp in self.footprints.values()}


@dataclass
class EquivalenceReport:
    ok: bool
    original_count: int
    transformed_count: int
    missing: list                    # transformed footprints absent originally
    partial: bool

    def render(self) -> str:
        if self.ok:
            return (f"equivalent: {self.transformed_count} transformed "
                    f"footprint(s) within {self.original_count} original")
        lines = [f"behavioral divergence: {len(self.missing)} transformed "
                 f"footprint(s) not reachable in the original"]
        fp = self.missing[0]
        lines.append(f"  first divergence (status {fp.status}):")
        for name, val in fp.globals:
            lines.append(f"    {name} = {val}")
        for wid, text in fp.output:
            lines.append(f"    [w{wid}] {text}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Machine state

@dataclass(slots=True)
class BlockCur:
    block: Block
    pc: int = 0


@dataclass(slots=True)
class ForCur:
    stmt: ForStmt
    phase: str                       # "init" | "test" | "after-body"


@dataclass(slots=True)
class DeferredCall:
    kind: str                        # "lu" | "fast" | "call"
    data: tuple


class Activation:
    __slots__ = ("unit", "vars", "captured", "cursors", "defers",
                 "ret_cell", "ret_value", "state")

    def __init__(self, unit, captured=(), ret_cell=None):
        self.unit = unit
        self.vars: dict = {}
        self.captured = captured
        self.cursors: list = [BlockCur(unit.body)]
        self.defers: list = []
        self.ret_cell = ret_cell
        self.ret_value = None
        self.state = "run"

    def copy(self) -> "Activation":
        a = Activation.__new__(Activation)
        a.unit = self.unit
        a.vars = dict(self.vars)
        a.captured = self.captured
        a.cursors = [BlockCur(c.block, c.pc) if type(c) is BlockCur
                     else ForCur(c.stmt, c.phase) for c in self.cursors]
        a.defers = list(self.defers)
        a.ret_cell = self.ret_cell
        a.ret_value = self.ret_value
        a.state = self.state
        return a


@dataclass(slots=True)
class Pending:
    kind: str                        # "fast" | "lock"
    rec: FastLockRec | None = None
    serial: int = 0
    mode: str = "w"
    on_done: str = "pc"              # "pc" | "for-init" | "for-post" | "defer"

    def copy(self) -> "Pending":
        return Pending(self.kind, self.rec.clone() if self.rec else None,
                       self.serial, self.mode, self.on_done)


class Worker:
    __slots__ = ("wid", "frames", "status", "pending", "blocked_cell")

    def __init__(self, wid: int, act: Activation):
        self.wid = wid
        self.frames = [act]
        self.status = "runnable"     # "runnable" | "blocked" | "done"
        self.pending: Pending | None = None
        self.blocked_cell = None


class _Checkpoint:
    __slots__ = ("frames", "pending")

    def __init__(self, frames, pending):
        self.frames = frames
        self.pending = pending


# ---------------------------------------------------------------------------

class Machine:
    def __init__(self, resolved: ResolvedProgram, schedule: Schedule,
                 config: EngineConfig | None = None, step_hook=None,
                 replay: list | None = None, record: bool = True,
                 boot: tuple | None = None):
        if "main" not in resolved.units:
            raise RuntimePanic("program has no main function")
        self.r = resolved
        self.schedule = schedule
        self.engine = Engine(config, schedule.worker_count)
        # replay mode picks the first runnable worker beyond the prefix and
        # never consults the generator, so skip seeding it
        self.rng = None if replay is not None else random.Random(schedule.seed)
        self.replay = replay         # decision indices; None = seeded random
        self.step_hook = step_hook
        self.record = record         # keep per-step trace and observations
        self.boot = boot             # pre-initialized globals image
        self.workers: list[Worker] = []
        self.output: list = []
        self.trace: list = []
        self.decisions: list = []
        self.observations: list = []
        self.steps = 0
        self.error = None
        self._next_cell = 0
        self._next_oid = 0
        self._boot_file = None       # file of the global currently initializing

    # -- identity helpers ---------------------------------------------------

    def _cell(self) -> tuple:
        self._next_cell += 1
        return ("l", self._next_cell)

    def _oid(self) -> int:
        self._next_oid += 1
        return self._next_oid

    def _file_of(self, act: Activation) -> str:
        return self.r.file_of_unit.get(act.unit.name, "")

    # -- program setup ------------------------------------------------------

    def _init_globals(self):
        boot = Activation.__new__(Activation)
        boot.unit = self.r.units["main"]
        boot.vars = {}
        boot.captured = ()
        boot.cursors = []
        boot.defers = []
        boot.ret_cell = None
        boot.ret_value = None
        boot.state = "run"
        file_of = {}
        for f in self.r.program.files:
            for d in f.decls:
                file_of[id(d)] = f.path
        for f in self.r.program.files:
            for d in f.decls:
                g = self.r.globals.get(getattr(d, "name", None))
                if g is None or g is not d:
                    continue
                cell = ("g", g.name)
                tag = ("var",) + tuple(g.decl.var_id)
                self._boot_file = file_of[id(d)]
                if g.init is not None:
                    val = self._eval(g.init, 0, boot, tag_hint=tag)
                else:
                    val = self._zero(g.decl.type, tag)
                self.engine.write(0, cell, val)
        self._boot_file = None

    def run(self) -> RunResult:
        if self.boot is None:
            self._init_globals()
        else:
            store, ncell, noid, serial = self.boot
            self.engine.store.update(store)
            self._next_cell = ncell
            self._next_oid = noid
            self.engine._serial = serial
        main = Activation(self.r.units["main"])
        w0 = Worker(0, main)
        self.workers.append(w0)
        self.engine.register_worker(0)
        status = self._loop()
        fp = self._footprint(status)
        return RunResult(fp, self.engine.stats, self.steps, self.trace,
                         self.decisions, self.error, self.observations)

    def boot_image(self) -> tuple:
        """Run globals initialization once; the result can seed further
        machines for the same program (initializers are deterministic and
        every produced value is immutable)."""
        self._init_globals()
        return (dict(self.engine.store), self._next_cell, self._next_oid,
                self.engine._serial)

    def _loop(self) -> str:
        workers = self.workers
        engine = self.engine
        trace = self.trace
        max_steps = self.schedule.max_steps
        hook = self.step_hook
        record = self.record
        pick = self._pick
        step = self._step
        while True:
            first = None
            rest = None
            for w in workers:
                if w.status == "runnable":
                    if first is None:
                        first = w
                    elif rest is None:
                        rest = [first, w]
                    else:
                        rest.append(w)
            if first is None:
                blocked = [w for w in workers if w.status == "blocked"]
                if not blocked:
                    return "done"
                self.error = Deadlock("no runnable worker",
                                      self._diagnose(blocked))
                return "deadlock"
            if self.steps >= max_steps:
                return "bound"
            w = first if rest is None else pick(rest)
            if record:
                trace.append(w.wid)
            self.steps += 1
            try:
                step(w)
            except TxAbort as a:
                self._abort(w, a.code)
            except RuntimePanic as p:
                self.error = p
                return f"panic: {p}"
            if engine.pending_wakeups:
                for wid in engine.drain_wakeups():
                    ww = workers[wid]
                    if ww.status == "blocked":
                        ww.status = "runnable"
                        ww.blocked_cell = None
            if hook is not None:
                hook(self)

    def _pick(self, runnable: list) -> Worker:
        n = len(runnable)
        if n == 1:
            return runnable[0]
        d = self.decisions
        r = self.replay
        if r is not None:
            idx = r[len(d)] if len(d) < len(r) else 0
        else:
            idx = self.rng.randrange(n)
        if idx >= n:
            idx = n - 1
        d.append((n, idx))
        return runnable[idx]

    def _diagnose(self, blocked: list) -> list:
        out = []
        for w in blocked:
            cell = w.blocked_cell
            if cell is not None and cell[0] == "mx":
                st = self.engine.mutex_state(cell[1])
                if st == FREE:
                    held = "now free"
                elif st[0] == "w":
                    held = f"held by worker {st[1]}"
                else:
                    held = f"read-held by workers {sorted(st[1])}"
                out.append(f"worker {w.wid} waits on mutex #{cell[1]} ({held})")
            else:
                out.append(f"worker {w.wid} blocked")
        return out

    # -- abort and rollback -------------------------------------------------

    def _abort(self, w: Worker, code: str):
        # The checkpoint's frames and pending are private copies made at
        # transaction begin, and the record holding them was just popped,
        # so the worker can adopt them outright.
        ckpt = self.engine.take_abort(w.wid, code)
        w.frames = ckpt.frames
        w.pending = ckpt.pending
        w.blocked_cell = None
        if w.pending is not None and w.pending.rec is not None:
            w.pending.rec.pending_abort = code

    def _make_checkpoint(self, w: Worker) -> _Checkpoint:
        return _Checkpoint([a.copy() for a in w.frames],
                           w.pending.copy() if w.pending else None)

    # -- one scheduler step -------------------------------------------------

    def _step(self, w: Worker):
        if w.pending is not None:
            self._resume_pending(w)
            return
        # Settle first: pop exhausted cursors and finished activations until
        # there is a real action to take.
        frames = w.frames
        while True:
            if not frames:
                w.status = "done"
                return
            act = frames[-1]
            if act.state == "exit":
                if act.defers:
                    self._run_defer(w, act)
                    return
                self._finish_activation(w, act)
                continue
            curs = act.cursors
            if not curs:
                act.state = "exit"
                continue
            cur = curs[-1]
            if type(cur) is BlockCur:
                stmts = cur.block.stmts
                if cur.pc < len(stmts):
                    break
                curs.pop()
                continue
            self._step_for(w, act, cur)
            return
        res = self._exec_stmt(w, act, stmts[cur.pc], "pc")
        if res == "ok":
            cur.pc += 1

    def _finish_activation(self, w: Worker, act: Activation):
        if act.ret_cell is not None and act.ret_value is not None:
            self.engine.write(w.wid, act.ret_cell, act.ret_value)
        w.frames.pop()

    def _step_for(self, w: Worker, act: Activation, cur: ForCur):
        st = cur.stmt
        if cur.phase == "init":
            res = self._exec_stmt(w, act, st.init, "for-init")
            if res == "ok":
                cur.phase = "test"
            return
        if cur.phase == "after-body":
            if st.post is not None:
                res = self._exec_stmt(w, act, st.post, "for-post")
                if res == "ok":
                    cur.phase = "test"
                return
            cur.phase = "test"
        if self._truthy(self._eval(st.cond, w.wid, act), w.wid):
            cur.phase = "after-body"
            act.cursors.append(BlockCur(st.body))
        else:
            act.cursors.pop()

    def _truthy(self, v, wid: int) -> bool:
        if isinstance(v, bool):
            return v
        self._fail(wid, "condition is not a bool")
        return False

    # -- deferred calls at exit ---------------------------------------------

    def _run_defer(self, w: Worker, act: Activation):
        dc = act.defers.pop()
        if dc.kind == "lu":
            op, serial, mode = dc.data
            if op in ("Unlock", "RUnlock"):
                self.engine.mutex_release(w.wid, serial, mode)
            else:
                got = self.engine.mutex_acquire(w.wid, serial, mode)
                if got == "block":
                    self._block_on_mutex(w, serial, Pending(
                        "lock", serial=serial, mode=mode, on_done="defer"))
        elif dc.kind == "fast":
            op, ol, serial, kind, mode = dc.data
            if op in ("FastUnlock", "FastRUnlock"):
                self.engine.fast_unlock(w.wid, ol.key, serial, mode)
            else:
                rec = FastLockRec(ol.key, ol.site, serial, kind, mode)
                w.pending = Pending("fast", rec=rec, on_done="defer")
                self._fast_step(w)
        elif dc.kind == "builtin":
            name, vals = dc.data
            self._builtin_vals(w.wid, name, vals)
        elif dc.kind == "extern":
            name, vals = dc.data
            self._extern_call(w.wid, name, vals)
        else:
            unit_name, recv, args = dc.data
            self._push_call(w, unit_name, recv, args, None)

    # -- statement execution ------------------------------------------------

    def _exec_stmt(self, w: Worker, act: Activation, stmt, done: str) -> str:
        fn = _STMT_OPS.get(type(stmt))
        if fn is None:
            self._fail(w.wid, f"cannot execute {type(stmt).__name__}")
        return fn(self, w, act, stmt, done)

    def _ex_decl(self, w: Worker, act: Activation, stmt, done: str) -> str:
        wid = w.wid
        info = stmt.decl
        cell = self._cell()
        act.vars[info.var_id] = cell
        init = stmt.expr if type(stmt) is ShortVarStmt else stmt.init
        if init is not None and isinstance(init, CallExpr):
            return self._call_stmt(w, act, init, cell, done)
        tag = stmt.__dict__.get("_var_tag")
        if tag is None:
            tag = ("var",) + tuple(info.var_id)
            stmt._var_tag = tag
        if init is None:
            val = self._zero(info.type, tag)
        else:
            val = self._eval(init, wid, act, tag_hint=tag)
        self.engine.write(wid, cell, val)
        return "ok"

    def _ex_assign(self, w: Worker, act: Activation, stmt, done: str) -> str:
        wid = w.wid
        if isinstance(stmt.expr, CallExpr):
            cell = self._lvalue(stmt.target, wid, act)
            return self._call_stmt(w, act, stmt.expr, cell, done)
        val = self._eval(stmt.expr, wid, act)
        cell = self._lvalue(stmt.target, wid, act)
        self.engine.write(wid, cell, val)
        return "ok"

    def _ex_expr(self, w: Worker, act: Activation, stmt, done: str) -> str:
        return self._call_stmt(w, act, stmt.expr, None, done)

    def _ex_if(self, w: Worker, act: Activation, stmt, done: str) -> str:
        taken = self._truthy(self._eval(stmt.cond, w.wid, act), w.wid)
        self._complete(act, done)
        if taken:
            act.cursors.append(BlockCur(stmt.then))
        elif isinstance(stmt.els, Block):
            act.cursors.append(BlockCur(stmt.els))
        elif isinstance(stmt.els, IfStmt):
            act.cursors.append(BlockCur(Block([stmt.els], stmt.els.span)))
        return "pushed"

    def _ex_for(self, w: Worker, act: Activation, stmt, done: str) -> str:
        # the enclosing cursor moves past the loop now; the loop cursor
        # cleans itself up when the condition turns false
        self._complete(act, done)
        cur = ForCur(stmt, "init" if stmt.init is not None else "test")
        act.cursors.append(cur)
        self._step_for(w, act, cur)
        return "pushed"

    def _ex_return(self, w: Worker, act: Activation, stmt, done: str) -> str:
        if stmt.expr is not None:
            act.ret_value = self._eval(stmt.expr, w.wid, act)
        act.cursors.clear()
        act.state = "exit"
        return "pushed"

    def _ex_defer(self, w: Worker, act: Activation, stmt, done: str) -> str:
        self._defer(w, act, stmt.call)
        return "ok"

    def _ex_spawn(self, w: Worker, act: Activation, stmt, done: str) -> str:
        if self.engine.in_tx(w.wid):
            self.engine.self_abort(w.wid, ABORT_UNFRIENDLY)
        unit = self.r.units[stmt.closure.unit_name]
        captured = (act.vars,) + tuple(act.captured)
        child = Worker(len(self.workers), Activation(unit, captured))
        self.workers.append(child)
        self.engine.register_worker(child.wid)
        return "ok"

    def _defer(self, w: Worker, act: Activation, call: CallExpr):
        wid = w.wid
        if call.mutex is not None:
            m = call.mutex
            mv = self._mutex_of_call(call, wid, act)
            mode = "r" if m.op in ("RLock", "RUnlock") else "w"
            if self.record:
                self.observations.append((m.site_id, mv.tag))
            act.defers.append(DeferredCall("lu", (m.op, mv.serial, mode)))
            return
        if call.fast is not None:
            ol = self._eval(call.callee.base, wid, act)
            mv = self._mutex_arg(call.args[0], wid, act)
            mode = "r" if call.fast.op in ("FastRLock", "FastRUnlock") else "w"
            act.defers.append(DeferredCall(
                "fast", (call.fast.op, ol, mv.serial, mv.kind, mode)))
            return
        kind, name = call.target
        if kind in ("builtin", "extern"):
            vals = [self._eval(a, wid, act) for a in call.args]
            act.defers.append(DeferredCall(kind, (name, vals)))
            return
        recv = None
        if kind == "method":
            recv = self._receiver_value(call.callee.base, wid, act)
        args = [self._eval(a, wid, act) for a in call.args]
        act.defers.append(DeferredCall("call", (name, recv, args)))

    # -- calls --------------------------------------------------------------

    def _call_stmt(self, w: Worker, act: Activation, call: CallExpr,
                   ret_cell, done: str) -> str:
        wid = w.wid
        kind, name = call.target
        if kind == "lu":
            return self._lu_op(w, act, call, done)
        if kind == "fast":
            return self._fast_op(w, act, call, done)
        if kind == "builtin":
            val = self._builtin(w, act, call, name)
            if ret_cell is not None:
                self.engine.write(wid, ret_cell, val)
            return "ok"
        if kind == "extern":
            vals = [self._eval(a, wid, act) for a in call.args]
            self._extern_call(wid, name, vals)
            return "ok"
        # user function or method: evaluate operands, push the activation
        recv = None
        if kind == "method":
            recv = self._receiver_value(call.callee.base, wid, act)
        args = [self._eval(a, wid, act) for a in call.args]
        self._complete(act, done)
        self._push_call(w, name, recv, args, ret_cell)
        return "pushed"

    def _push_call(self, w: Worker, unit_name: str, recv, args, ret_cell):
        unit = self.r.units[unit_name]
        callee = Activation(unit, ret_cell=ret_cell)
        if unit.receiver_decl is not None:
            cell = self._cell()
            callee.vars[unit.receiver_decl.var_id] = cell
            self.engine.write(w.wid, cell, recv)
        for info, val in zip(unit.param_decls, args):
            cell = self._cell()
            callee.vars[info.var_id] = cell
            self.engine.write(w.wid, cell, val)
        w.frames.append(callee)

    def _receiver_value(self, base, wid: int, act: Activation):
        t = base.typ
        if t is not None and t[0] == "ptr":
            return self._eval(base, wid, act)
        return Ptr(self._lvalue(base, wid, act))

    def _lu_op(self, w: Worker, act: Activation, call: CallExpr, done: str) -> str:
        wid = w.wid
        m = call.mutex
        mv = self._mutex_of_call(call, wid, act)
        meta = m.__dict__.get("_op_meta")
        if meta is None:
            meta = (m.op in ("Lock", "RLock"),
                    "r" if m.op in ("RLock", "RUnlock") else "w")
            m._op_meta = meta
        is_lock, mode = meta
        if self.record:
            self.observations.append((m.site_id, mv.tag))
        if is_lock:
            got = self.engine.mutex_acquire(wid, mv.serial, mode)
            if got == "block":
                self._block_on_mutex(w, mv.serial, Pending(
                    "lock", serial=mv.serial, mode=mode, on_done=done))
                return "block"
            return "ok"
        self.engine.mutex_release(wid, mv.serial, mode)
        return "ok"

    def _fast_op(self, w: Worker, act: Activation, call: CallExpr, done: str) -> str:
        wid = w.wid
        f = call.fast
        meta = f.__dict__.get("_op_meta")
        if meta is None:
            meta = (f.op in ("FastUnlock", "FastRUnlock"),
                    "r" if f.op in ("FastRLock", "FastRUnlock") else "w")
            f._op_meta = meta
        is_unlock, mode = meta
        ol = self._eval(call.callee.base, wid, act)
        mv = self._mutex_arg(call.args[0], wid, act)
        if is_unlock:
            self.engine.fast_unlock(wid, ol.key, mv.serial, mode)
            return "ok"
        rec = FastLockRec(ol.key, ol.site, mv.serial, mv.kind, mode)
        w.pending = Pending("fast", rec=rec, on_done=done)
        return self._fast_step(w)

    def _fast_step(self, w: Worker) -> str:
        p = w.pending
        res = self.engine.fast_lock(w.wid, p.rec,
                                    lambda: self._make_checkpoint(w))
        if res == "block":
            w.status = "blocked"
            w.blocked_cell = p.rec.wait_cell
            return "block"
        w.pending = None
        self._complete(w.frames[-1], p.on_done)
        return "pushed"

    def _block_on_mutex(self, w: Worker, serial: int, pending: Pending):
        self.engine.block_on(w.wid, ("mx", serial))
        w.pending = pending
        w.status = "blocked"
        w.blocked_cell = ("mx", serial)

    def _resume_pending(self, w: Worker):
        p = w.pending
        if p.kind == "fast":
            self._fast_step(w)
            return
        got = self.engine.mutex_acquire(w.wid, p.serial, p.mode)
        if got == "block":
            self.engine.block_on(w.wid, ("mx", p.serial))
            w.status = "blocked"
            w.blocked_cell = ("mx", p.serial)
            return
        w.pending = None
        self._complete(w.frames[-1], p.on_done)

    def _complete(self, act: Activation, done: str):
        """Advance control past a statement that just finished.  Deferred
        calls have no cursor to move; the exit loop simply continues."""
        if done == "pc":
            act.cursors[-1].pc += 1
        elif done in ("for-init", "for-post"):
            act.cursors[-1].phase = "test"

    # -- builtins -----------------------------------------------------------

    def _builtin(self, w: Worker, act: Activation, call: CallExpr, name: str):
        vals = [self._eval(a, w.wid, act) for a in call.args]
        return self._builtin_vals(w.wid, name, vals)

    def _builtin_vals(self, wid: int, name: str, vals: list):
        if name == "print":
            if self.engine.in_tx(wid):
                self.engine.self_abort(wid, ABORT_UNFRIENDLY)
            self.output.append((wid, " ".join(self._fmt(v) for v in vals)))
            return None
        if name == "panic":
            if self.engine.in_tx(wid):
                self.engine.self_abort(wid, ABORT_UNFRIENDLY)
            raise RuntimePanic(self._fmt(vals[0]), wid)
        if name == "len":
            v = vals[0]
            if isinstance(v, str):
                return len(v)
            if v is NIL:
                return 0
            if isinstance(v, MapRef):
                return self.engine.read(wid, ("ml", v.mid), 0)
            self._fail(wid, "len of non-map, non-string value")
        if name == "delete":
            v = vals[0]
            if v is NIL:
                return None
            cell = ("e", v.mid, vals[1])
            if self.engine.read(wid, cell, ABSENT) is not ABSENT:
                n = self.engine.read(wid, ("ml", v.mid), 0)
                self.engine.write(wid, ("ml", v.mid), n - 1)
                self.engine.write(wid, cell, ABSENT)
            return None
        self._fail(wid, f"unknown builtin {name}")
        return None

    def _extern_call(self, wid: int, name: str, vals: list):
        if self.engine.in_tx(wid):
            self.engine.self_abort(wid, ABORT_UNFRIENDLY)
        args = ", ".join(self._fmt(v) for v in vals)
        self.output.append((wid, f"io {name}({args})"))

    # -- values -------------------------------------------------------------

    def _fail(self, wid: int, msg: str):
        if self.engine.in_tx(wid):
            self.engine.self_abort(wid, ABORT_UNFRIENDLY)
        raise RuntimePanic(msg, wid)

    def _zero(self, t, tag: tuple):
        if t is None:
            return None
        head = t[0]
        if head == "int":
            return 0
        if head == "bool":
            return False
        if head == "string":
            return ""
        if head in ("ptr", "map"):
            return NIL
        if head in ("mutex", "rwmutex"):
            return MutexVal(self.engine.fresh_serial(), head, tag)
        if head == "struct":
            return StructRef(self._oid(), t[1], tag)
        if head == "optilock":
            site = tag[-1] if tag and isinstance(tag[-1], int) else 0
            return OptiLockVal(self._oid(), site)
        return None

    def _construct(self, lit: CompositeLit, wid: int, act, tag: tuple):
        t = lit.typ
        if t[0] == "map":
            mid = self._oid()
            self.engine.write(wid, ("ml", mid), 0)
            return MapRef(mid, t[2], tag)
        if t[0] in ("mutex", "rwmutex"):
            return MutexVal(self.engine.fresh_serial(), t[0], tag)
        if t[0] == "struct":
            return StructRef(self._oid(), t[1], tag)
        if t[0] == "optilock":
            return OptiLockVal(self._oid(), lit.span.start)
        self._fail(wid, f"cannot construct {fmt_type(t)}")
        return None

    def _lit_tag(self, lit: CompositeLit, act: Activation) -> tuple:
        file = self._boot_file or self._file_of(act)
        return ("lit", fmt_type(lit.typ), file, lit.span.start)

    def _eval(self, e, wid: int, act: Activation, tag_hint: tuple | None = None):
        fn = _EVAL_OPS.get(type(e))
        if fn is None:
            self._fail(wid, f"cannot evaluate {type(e).__name__}")
        return fn(self, e, wid, act, tag_hint)

    def _ev_lit(self, e, wid, act, tag_hint):
        return e.value

    def _ev_ident(self, e, wid, act, tag_hint):
        cell = e.__dict__.get("_cell_memo")
        if cell is None:
            b = e.binding
            if b.kind == "global":
                cell = ("g", b.name)
                e._cell_memo = cell     # global cells never move
            else:
                cell = self._var_cell(b, wid, act)
        return self.engine.read(wid, cell)

    def _ev_field(self, e, wid, act, tag_hint):
        base = self._eval(e.base, wid, act)
        return self._field_read(base, e.name, e.typ, wid)

    def _ev_index(self, e, wid, act, tag_hint):
        m = self._eval(e.base, wid, act)
        if m is NIL:
            return self._zero(e.typ, ("nil",))
        key = self._eval(e.index, wid, act)
        v = self.engine.read(wid, ("e", m.mid, key), ABSENT)
        if v is ABSENT:
            return self._zero(e.typ, ("elem", m.tag))
        return v

    def _ev_unary(self, e, wid, act, tag_hint):
        if e.op == "&":
            p = e.__dict__.get("_amp_memo")
            if p is not None:
                return p
            if isinstance(e.operand, CompositeLit):
                tag = self._lit_tag(e.operand, act)
                val = self._construct(e.operand, wid, act, tag)
                cell = ("h", self._oid())
                self.engine.write(wid, cell, val)
                return Ptr(cell)
            p = Ptr(self._lvalue(e.operand, wid, act))
            if type(e.operand) is Ident and e.operand.binding.kind == "global":
                e._amp_memo = p       # the address of a global never varies
            return p
        v = self._eval(e.operand, wid, act)
        if e.op == "!":
            return not v
        return -v

    def _ev_binary(self, e, wid, act, tag_hint):
        return self._binary(e, wid, act)

    def _ev_composite(self, e, wid, act, tag_hint):
        tag = tag_hint if tag_hint is not None else self._lit_tag(e, act)
        return self._construct(e, wid, act, tag)

    def _ev_call(self, e, wid, act, tag_hint):
        self._fail(wid, "call in expression position")

    def _binary(self, e: BinaryExpr, wid: int, act: Activation):
        op = e.op
        if op == "&&":
            return (self._truthy(self._eval(e.left, wid, act), wid)
                    and self._truthy(self._eval(e.right, wid, act), wid))
        if op == "||":
            return (self._truthy(self._eval(e.left, wid, act), wid)
                    or self._truthy(self._eval(e.right, wid, act), wid))
        l = self._eval(e.left, wid, act)
        r = self._eval(e.right, wid, act)
        if op == "==":
            return l == r
        if op == "!=":
            return l != r
        if op == "<":
            return l < r
        if op == "<=":
            return l <= r
        if op == ">":
            return l > r
        if op == ">=":
            return l >= r
        if op == "+":
            return l + r
        if op == "-":
            return l - r
        if op == "*":
            return l * r
        if op in ("/", "%"):
            if r == 0:
                self._fail(wid, "integer divide by zero")
            q = abs(l) // abs(r)
            if (l < 0) != (r < 0):
                q = -q
            return q if op == "/" else l - q * r
        self._fail(wid, f"unknown operator {op}")
        return None

    def _var_cell(self, info, wid: int, act: Activation) -> tuple:
        if info.kind == "global":
            return ("g", info.name)
        vid = info.var_id
        cell = act.vars.get(vid)
        if cell is not None:
            return cell
        for d in act.captured:
            cell = d.get(vid)
            if cell is not None:
                return cell
        self._fail(wid, f"variable {info.name!r} used before declaration")
        return ("g", "?")

    def _lvalue(self, e, wid: int, act: Activation) -> tuple:
        if isinstance(e, Ident):
            return self._var_cell(e.binding, wid, act)
        if isinstance(e, FieldExpr):
            base = self._eval(e.base, wid, act)
            sr = self._as_struct(base, wid)
            # materialize the field so a pointer taken to it sees a value
            self._field_read(sr, e.name, e.typ, wid)
            return ("f", sr.oid, e.name)
        if isinstance(e, IndexExpr):
            m = self._eval(e.base, wid, act)
            if m is NIL:
                self._fail(wid, "assignment to entry in nil map")
            key = self._eval(e.index, wid, act)
            cell = ("e", m.mid, key)
            if self.engine.read(wid, cell, ABSENT) is ABSENT:
                n = self.engine.read(wid, ("ml", m.mid), 0)
                self.engine.write(wid, ("ml", m.mid), n + 1)
            return cell
        self._fail(wid, "not an assignable place")
        return ("g", "?")

    def _as_struct(self, v, wid: int) -> StructRef:
        while isinstance(v, Ptr):
            v = self.engine.read(wid, v.cell)
        if v is NIL or v is None:
            self._fail(wid, "nil pointer dereference")
        if not isinstance(v, StructRef):
            self._fail(wid, "field access on non-struct value")
        return v

    def _field_read(self, base, fname: str, ftype, wid: int):
        sr = self._as_struct(base, wid)
        cell = ("f", sr.oid, fname)
        v = self.engine.read(wid, cell, ABSENT)
        if v is not ABSENT:
            return v
        ft = ftype
        if ft is None:
            ft = struct_field_type(self.r.structs, sr.type_name, fname)
        zv = self._zero(ft, ("field", sr.tag, fname))
        self.engine.write(wid, cell, zv)
        return zv

    def _mutex_of_call(self, call: CallExpr, wid: int, act: Activation) -> MutexVal:
        """Resolve the receiver of m.Lock()/a.Unlock()/... to its mutex."""
        v = self._eval(call.callee.base, wid, act)
        m = call.mutex
        if m.via_anonymous:
            v = self._field_read(v, m.path[-1], None, wid)
        while type(v) is Ptr:
            v = self.engine.read(wid, v.cell)
        if type(v) is MutexVal:
            return v
        if v is NIL or v is None:
            self._fail(wid, "nil mutex dereference")
        self._fail(wid, "lock operation on a non-mutex value")

    def _mutex_arg(self, arg, wid: int, act: Activation) -> MutexVal:
        v = self._eval(arg, wid, act)
        while type(v) is Ptr:
            v = self.engine.read(wid, v.cell)
        if type(v) is MutexVal:
            return v
        if v is NIL or v is None:
            self._fail(wid, "nil mutex dereference")
        self._fail(wid, "FastLock argument is not a mutex")

    # -- output formatting and footprints -----------------------------------

    def _fmt(self, v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, int):
            return str(v)
        if isinstance(v, str):
            return v
        if v is NIL:
            return "nil"
        if isinstance(v, Ptr):
            return "<ptr>"
        if isinstance(v, StructRef):
            return f"<{v.type_name}>"
        if isinstance(v, MapRef):
            return "<map>"
        if isinstance(v, MutexVal):
            return "<mutex>"
        return repr(v)

    def _footprint(self, status: str) -> Footprint:
        names = sorted(self.r.globals)
        memo: dict = {}
        out = tuple((n, self._canon(self.engine.store.get(("g", n)), memo))
                    for n in names)
        return Footprint(out, tuple(self.output), status)

    def _canon(self, v, memo: dict):
        if v is None:
            return "?"
        if isinstance(v, bool) or isinstance(v, int) or isinstance(v, str):
            return v
        if v is NIL:
            return "nil"
        if isinstance(v, Ptr):
            return ("ptr", self._canon(self.engine.store.get(v.cell), memo))
        if isinstance(v, MutexVal):
            st = self.engine.mutex_state(v.serial)
            if st == FREE:
                return ("mutex", "free")
            if st[0] == "w":
                return ("mutex", f"held:w{st[1]}")
            return ("mutex", "held:" + ",".join(f"w{r}" for r in sorted(st[1])))
        if isinstance(v, StructRef):
            if v.oid in memo:
                return ("cycle", memo[v.oid])
            memo[v.oid] = len(memo)
            sd = self.r.structs.get(v.type_name)
            fields = []
            fnames = [f.name for f in sd.fields] if sd else []
            if sd is not None and sd.embed is not None:
                fnames.append(sd.embed.field_name)
            for fn in fnames:
                fv = self.engine.store.get(("f", v.oid, fn), ABSENT)
                if fv is ABSENT:
                    fields.append((fn, "zero"))
                else:
                    fields.append((fn, self._canon(fv, memo)))
            return ("struct", v.type_name, tuple(fields))
        if isinstance(v, MapRef):
            items = []
            for cell, val in self.engine.store.items():
                if cell[0] == "e" and cell[1] == v.mid and val is not ABSENT:
                    items.append((cell[2], self._canon(val, memo)))
            items.sort(key=lambda kv: (str(type(kv[0])), kv[0]))
            return ("map", tuple(items))
        if isinstance(v, OptiLockVal):
            return "optilock"
        return repr(v)


# Type-keyed dispatch; the interpreter loop is the hot path under explore().
_STMT_OPS = {
    ShortVarStmt: Machine._ex_decl,
    VarDeclStmt: Machine._ex_decl,
    AssignStmt: Machine._ex_assign,
    ExprStmt: Machine._ex_expr,
    IfStmt: Machine._ex_if,
    ForStmt: Machine._ex_for,
    ReturnStmt: Machine._ex_return,
    DeferStmt: Machine._ex_defer,
    SpawnStmt: Machine._ex_spawn,
}

_EVAL_OPS = {
    IntLit: Machine._ev_lit,
    StrLit: Machine._ev_lit,
    BoolLit: Machine._ev_lit,
    Ident: Machine._ev_ident,
    FieldExpr: Machine._ev_field,
    IndexExpr: Machine._ev_index,
    UnaryExpr: Machine._ev_unary,
    BinaryExpr: Machine._ev_binary,
    CompositeLit: Machine._ev_composite,
    CallExpr: Machine._ev_call,
}


# ---------------------------------------------------------------------------
# public entry points

def run(resolved: ResolvedProgram, schedule: Schedule | None = None,
        config: EngineConfig | None = None, step_hook=None,
        replay: list | None = None) -> RunResult:
    m = Machine(resolved, schedule or Schedule(), config, step_hook, replay)
    return m.run()


def explore(resolved: ResolvedProgram, worker_count: int = 2,
            config: EngineConfig | None = None,
            max_interleavings: int = 100000, max_steps: int = 200000,
            step_hook=None, on_run=None) -> ExploreResult:
    """Depth-first schedule enumeration by stateless re-execution."""
    footprints: dict = {}
    stack: list[list] = [[]]
    executions = 0
    partial = False
    sched = Schedule(seed=0, worker_count=worker_count, max_steps=max_steps)
    config = config or EngineConfig()
    boot = Machine(resolved, sched, config, record=False).boot_image()
    gc_was = gc.isenabled()
    gc.disable()
    try:
        while stack:
            if executions >= max_interleavings:
                partial = True
                break
            prefix = stack.pop()
            m = Machine(resolved, sched, config, step_hook, replay=prefix,
                        record=False, boot=boot)
            res = m.run()
            executions += 1
            if not executions & 0xfff:
                gc.collect(1)
            if on_run is not None:
                on_run(res)
            fp = res.footprint
            footprints.setdefault((fp.globals, fp.output, fp.status), fp)
            chosen = [c for _, c in res.decisions]
            for i in range(len(res.decisions) - 1, len(prefix) - 1, -1):
                n, _ = res.decisions[i]
                for alt in range(n - 1, 0, -1):
                    stack.append(chosen[:i] + [alt])
    finally:
        if gc_was:
            gc.enable()
    return ExploreResult(footprints, executions, partial)


def check_equivalence(original: ResolvedProgram, transformed: ResolvedProgram,
                      worker_count: int = 2,
                      config: EngineConfig | None = None,
                      max_interleavings: int = 100000,
                      max_steps: int = 200000) -> EquivalenceReport:
    """Every behavior of the transformed program must already be a behavior
    of the original (footprint containment)."""
    orig = explore(original, worker_count, config, max_interleavings, max_steps)
    trans = explore(transformed, worker_count, config, max_interleavings,
                    max_steps)
    missing = [fp for key, fp in trans.footprints.items()
               if key not in orig.footprints]
    missing.sort(key=repr)
    return EquivalenceReport(not missing, len(orig.footprints),
                             len(trans.footprints), missing,
                             orig.partial or trans.partial)


def mutual_exclusion_violations(machine: Machine) -> list[str]:
    """With eager conflict detection, a published mutex holder implies every
    transaction subscribed to that mutex is already doomed."""
    out = []
    eng = machine.engine
    store = eng.store
    inflight = eng.inflight
    for wid, t in eng.tx.items():
        if t.doomed:
            continue
        for rec in inflight[wid].values():
            if rec.fast:
                st = store.get(("mx", rec.m_serial), FREE)
                if st != FREE:
                    out.append(f"worker {wid} runs a live transaction on "
                               f"mutex #{rec.m_serial} while its state is "
                               f"{st}")
    return out
