"""The optimistic-lock engine behind FastLock/FastUnlock.

Hardware transactions are emulated at word granularity: every piece of
shared state the interpreter touches (globals, locals, fields, map
entries, and crucially each mutex's state word) is an engine cell.  A
transaction buffers its writes privately, records its reads, and detects
conflicts eagerly: the acting operation succeeds and dooms any other
active transaction it collides with, so a doomed transaction aborts at
its next engine operation or at commit.

Mutex state lives in one cell per mutex, which is what makes elision
compose: a FastLock fastpath merely *reads* the state word (the
subscription), so concurrent elided sections on one mutex proceed in
parallel, while any real acquisition writes the word and dooms every
subscriber.  An untransformed Lock() running inside a transaction is a
buffered read-modify-write of the same cell and so serializes against
everyone at commit.

FastLock follows the retry state machine sketched by the usual elision
pseudocode: consult the hashed perceptron, then up to max_attempts
transactional tries, falling back to the real mutex on a non-retryable
abort or an exhausted budget.  Two deliberate readings of that sketch:
every abort, including LockHeldError, consumes one attempt (the sketch
decrements before classifying); and finding the mutex held at attempt
entry records the LockHeldError abort immediately and then waits for the
word to change, since under statement-atomic steps the in-transaction
held check could otherwise never fire.  FastLock also clears slow_path
and htm_failed on entry so one OptiLock variable can serve any number of
sequential pairs.

Nesting is flattened: an inner FastLock inside an active transaction
only deepens a counter, and any abort rewinds to the outermost
checkpoint.  The checkpoint itself is an opaque snapshot the interpreter
provides; the engine pairs it with its own copy of the worker's in-flight
acquisition table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import RuntimePanic, UnmatchedUnlock

FREE = ("free",)

_MISS = object()

ABORT_CONFLICT = "Conflict"
ABORT_CAPACITY = "Capacity"
ABORT_LOCK_HELD = "LockHeldError"
ABORT_MISMATCH = "MutexMismatchError"
ABORT_UNFRIENDLY = "ExplicitUnfriendly"

RETRYABLE = {ABORT_CONFLICT, ABORT_LOCK_HELD}

WEIGHT_MIN, WEIGHT_MAX = -16, 15


class TxAbort(Exception):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass
class EngineConfig:
    max_attempts: int = 3
    capacity_bound: int = 1024
    decay_threshold: int = 1000
    table_size: int = 4096
    disable_elision: bool = False

    @classmethod
    def from_json(cls, text: str) -> "EngineConfig":
        data = json.loads(text)
        cfg = cls()
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown engine config key {k!r}")
            setattr(cfg, k, v)
        return cfg


@dataclass
class Stats:
    tx_begins: int = 0
    commits: int = 0
    aborts: dict = field(default_factory=dict)
    slow_acquires: int = 0            # perceptron-lock or degraded fastpath
    bypass_acquires: int = 0          # single-worker or elision disabled
    decisions: dict = field(default_factory=lambda: {"transactional": 0,
                                                     "lock": 0})
    decision_log: list = field(default_factory=list)   # (idx_a, idx_b, kind)
    decay_resets: int = 0
    cs_log: list = field(default_factory=list)         # "fast"|"slow"|"bypass"

    def abort(self, code: str):
        self.aborts[code] = self.aborts.get(code, 0) + 1

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["decision_log"] = len(self.decision_log)
        d["cs_log"] = {k: self.cs_log.count(k)
                       for k in ("fast", "slow", "bypass")}
        return json.dumps(d, indent=2, sort_keys=True)


class Perceptron:
    """Two hashed weight tables voting on elide-vs-lock per
    (calling context, mutex) feature pair.

    Tables are logically ``table_size`` wide but stored sparsely: absent
    entries read as zero, and a single run only ever touches the few
    index pairs its lock sites hash to.
    """

    def __init__(self, table_size: int):
        self.size = table_size
        self.mask = table_size - 1
        self.weights_a: dict = {}
        self.weights_b: dict = {}
        self.counters_a: dict = {}
        self.counters_b: dict = {}

    def indices(self, ol_site: int, mutex_serial: int) -> tuple[int, int]:
        return ol_site & self.mask, (mutex_serial ^ ol_site) & self.mask

    def sum_at(self, ia: int, ib: int) -> int:
        return self.weights_a.get(ia, 0) + self.weights_b.get(ib, 0)

    def bump(self, ia: int, ib: int, delta: int):
        self.weights_a[ia] = _sat(self.weights_a.get(ia, 0) + delta)
        self.weights_b[ib] = _sat(self.weights_b.get(ib, 0) + delta)


def _sat(w: int) -> int:
    return max(WEIGHT_MIN, min(WEIGHT_MAX, w))


@dataclass(slots=True)
class TxRec:
    wid: int
    depth: int
    checkpoint: object
    inflight_snapshot: dict
    read_set: set = field(default_factory=set)
    write_buf: dict = field(default_factory=dict)
    touched: set = field(default_factory=set)    # read_set | write_buf keys
    doomed: bool = False


@dataclass(slots=True)
class FastLockRec:
    """One FastLock invocation in progress (and, once returned, the
    OptiLock's in-flight acquisition state until FastUnlock)."""
    ol_key: object                  # storage identity of the OptiLock
    ol_site: int                    # declaration-site feature
    m_serial: int
    m_kind: str                     # "mutex" | "rwmutex"
    mode: str                       # "w" | "r"
    trial: int = 0
    slow: bool = False
    htm_failed: bool = False
    bypass: bool = False
    fast: bool = False
    decided: bool = False
    pending_abort: str | None = None
    wait_cell: tuple | None = None

    def clone(self) -> "FastLockRec":
        c = FastLockRec(self.ol_key, self.ol_site, self.m_serial, self.m_kind,
                        self.mode, self.trial, self.slow, self.htm_failed,
                        self.bypass, self.fast, self.decided)
        c.pending_abort = self.pending_abort
        return c


def _mx_cell(serial: int) -> tuple:
    return ("mx", serial)


def _compatible(state: tuple, mode: str) -> bool:
    if state == FREE:
        return True
    return mode == "r" and state[0] == "r"


class Engine:
    def __init__(self, config: EngineConfig | None = None,
                 worker_count: int = 1):
        self.cfg = config or EngineConfig()
        self.worker_count = worker_count
        self.store: dict = {}
        self.tx: dict[int, TxRec] = {}
        self.inflight: dict[int, dict] = {}
        self.waiters: dict[tuple, list[int]] = {}
        self.pending_wakeups: list[int] = []
        self.perceptron = Perceptron(self.cfg.table_size)
        self.stats = Stats()
        self._serial = 0
        self._bypass = self.cfg.disable_elision or worker_count == 1

    # -- identities ---------------------------------------------------------

    def fresh_serial(self) -> int:
        self._serial += 1
        return self._serial

    def register_worker(self, wid: int):
        self.inflight.setdefault(wid, {})

    # -- plain and transactional memory -------------------------------------

    def in_tx(self, wid: int) -> bool:
        return wid in self.tx

    def read(self, wid: int, cell: tuple, default=None):
        t = self.tx.get(wid)
        if t is None:
            return self.store.get(cell, default)
        if t.doomed:
            raise TxAbort(ABORT_CONFLICT)
        v = t.write_buf.get(cell, _MISS)
        if v is not _MISS:
            return v
        rs = t.read_set
        if cell not in rs:
            # first read: charge capacity and doom writers; later reads of
            # the same cell change neither the footprint nor any conflict
            touched = t.touched
            if len(touched) >= self.cfg.capacity_bound:
                raise TxAbort(ABORT_CAPACITY)
            touched.add(cell)
            rs.add(cell)
            for other in self.tx.values():
                if other is not t and cell in other.write_buf:
                    other.doomed = True
        return self.store.get(cell, default)

    def write(self, wid: int, cell: tuple, value):
        t = self.tx.get(wid)
        if t is None:
            self.store[cell] = value
            self._doom_touching(wid, cell)
            self._wake(cell)
            return
        if t.doomed:
            raise TxAbort(ABORT_CONFLICT)
        wb = t.write_buf
        if cell in wb:
            wb[cell] = value
            return
        if cell not in t.read_set:
            touched = t.touched
            if len(touched) >= self.cfg.capacity_bound:
                raise TxAbort(ABORT_CAPACITY)
            touched.add(cell)
        wb[cell] = value
        self._doom_touching(wid, cell)

    def _doom_touching(self, wid: int, cell: tuple):
        for other in self.tx.values():
            if other.wid != wid and (cell in other.read_set
                                     or cell in other.write_buf):
                other.doomed = True

    def _wake(self, cell: tuple):
        for w in self.waiters.pop(cell, []):
            self.pending_wakeups.append(w)

    def block_on(self, wid: int, cell: tuple):
        q = self.waiters.setdefault(cell, [])
        if wid not in q:
            q.append(wid)

    def drain_wakeups(self) -> list[int]:
        out, self.pending_wakeups = self.pending_wakeups, []
        return out

    # -- transactions -------------------------------------------------------

    def tx_begin(self, wid: int, checkpoint):
        assert wid not in self.tx
        self.tx[wid] = TxRec(wid, 1, checkpoint,
                             {k: r.clone() for k, r in
                              self.inflight[wid].items()})
        self.stats.tx_begins += 1

    def self_abort(self, wid: int, code: str):
        raise TxAbort(code)

    def take_abort(self, wid: int, code: str):
        """Roll the worker's transaction back; returns the checkpoint the
        interpreter must restore."""
        t = self.tx.pop(wid)
        self.inflight[wid] = t.inflight_snapshot
        self.stats.abort(code)
        return t.checkpoint

    def commit_outermost(self, wid: int):
        t = self.tx[wid]
        if t.doomed:
            raise TxAbort(ABORT_CONFLICT)
        del self.tx[wid]
        for cell, value in t.write_buf.items():
            self.store[cell] = value
            self._doom_touching(wid, cell)
            self._wake(cell)
        self.stats.commits += 1

    # -- mutex primitives ---------------------------------------------------

    def mutex_acquire(self, wid: int, serial: int, mode: str) -> str:
        cell = _mx_cell(serial)
        st = self.read(wid, cell, FREE)
        if not _compatible(st, mode):
            if wid in self.tx:
                raise TxAbort(ABORT_CONFLICT)
            return "block"
        self.write(wid, cell, self._acquired(st, wid, mode))
        return "ok"

    def _acquired(self, st: tuple, wid: int, mode: str) -> tuple:
        if mode == "w":
            return ("w", wid)
        readers = st[1] if st != FREE else ()
        return ("r", tuple(sorted(set(readers) | {wid})))

    def mutex_release(self, wid: int, serial: int, mode: str):
        cell = _mx_cell(serial)
        st = self.read(wid, cell, FREE)
        if mode == "w":
            if st != ("w", wid):
                self._release_error(wid, "unlock of a mutex not held")
                return
            self.write(wid, cell, FREE)
            return
        if st[0] != "r" or wid not in st[1]:
            self._release_error(wid, "read-unlock of a mutex not read-held")
            return
        rest = tuple(r for r in st[1] if r != wid)
        self.write(wid, cell, ("r", rest) if rest else FREE)

    def _release_error(self, wid: int, msg: str):
        if self.in_tx(wid):
            raise TxAbort(ABORT_UNFRIENDLY)
        raise RuntimePanic(msg, wid)

    def mutex_state(self, serial: int) -> tuple:
        return self.store.get(_mx_cell(serial), FREE)

    # -- FastLock / FastUnlock ----------------------------------------------

    def fast_lock(self, wid: int, rec: FastLockRec, make_checkpoint) -> str:
        """Advance one FastLock invocation.  Returns "fast" (transaction
        running), "slow" (real mutex acquired), or "block" (caller must
        suspend on rec.wait_cell and re-enter when woken)."""
        if rec.bypass or (not rec.decided and self._bypass):
            rec.bypass = True
            rec.slow = True
            return self._slow_acquire(wid, rec, bypass=True)

        if not rec.decided:
            rec.decided = True
            rec.trial = self.cfg.max_attempts
            ia, ib = self.perceptron.indices(rec.ol_site, rec.m_serial)
            self._decay(ia, ib)
            if self.perceptron.sum_at(ia, ib) >= 0:
                self.stats.decisions["transactional"] += 1
                self.stats.decision_log.append((ia, ib, "transactional"))
            else:
                self.stats.decisions["lock"] += 1
                self.stats.decision_log.append((ia, ib, "lock"))
                p = self.perceptron
                p.counters_a[ia] = p.counters_a.get(ia, 0) + 1
                p.counters_b[ib] = p.counters_b.get(ib, 0) + 1
                rec.slow = True
                return self._slow_acquire(wid, rec)

        if rec.pending_abort is not None:
            code = rec.pending_abort
            rec.pending_abort = None
            rec.trial -= 1
            if rec.trial <= 0 or code not in RETRYABLE:
                rec.slow = True
                rec.htm_failed = True
                return self._slow_acquire(wid, rec)
            # retryable with budget left: fall through to a fresh attempt

        if rec.slow:
            return self._slow_acquire(wid, rec)

        return self._attempt(wid, rec, make_checkpoint)

    def _decay(self, ia: int, ib: int):
        p = self.perceptron
        if p.counters_a.get(ia, 0) >= self.cfg.decay_threshold:
            p.weights_a[ia] = 0
            p.counters_a[ia] = 0
            self.stats.decay_resets += 1
        if p.counters_b.get(ib, 0) >= self.cfg.decay_threshold:
            p.weights_b[ib] = 0
            p.counters_b[ib] = 0
            self.stats.decay_resets += 1

    def _attempt(self, wid: int, rec: FastLockRec, make_checkpoint) -> str:
        cell = _mx_cell(rec.m_serial)
        if wid in self.tx:
            # flattened nesting: deepen, subscribe, no new checkpoint
            st = self.read(wid, cell, FREE)
            if not _compatible(st, rec.mode):
                raise TxAbort(ABORT_LOCK_HELD)
            self.tx[wid].depth += 1
            rec.fast = True
            self.inflight[wid][rec.ol_key] = rec
            return "fast"
        st = self.store.get(cell, FREE)
        if not _compatible(st, rec.mode):
            # would abort LockHeldError at transaction start; record it
            # now and wait for the state word to change
            self.stats.abort(ABORT_LOCK_HELD)
            rec.trial -= 1
            if rec.trial <= 0:
                rec.slow = True
                rec.htm_failed = True
                return self._slow_acquire(wid, rec)
            self.block_on(wid, cell)
            rec.wait_cell = cell
            return "block"
        self.tx_begin(wid, make_checkpoint())
        self.read(wid, cell, FREE)          # subscribe to the lock word
        rec.fast = True
        self.inflight[wid][rec.ol_key] = rec
        return "fast"

    def _slow_acquire(self, wid: int, rec: FastLockRec, bypass=False) -> str:
        got = self.mutex_acquire(wid, rec.m_serial, rec.mode)
        if got == "block":
            self.block_on(wid, _mx_cell(rec.m_serial))
            rec.wait_cell = _mx_cell(rec.m_serial)
            return "block"
        if rec.bypass:
            self.stats.bypass_acquires += 1
        else:
            self.stats.slow_acquires += 1
        self.inflight[wid][rec.ol_key] = rec
        return "slow"

    def fast_unlock(self, wid: int, ol_key, m_serial: int, mode: str):
        rec = self.inflight[wid].get(ol_key)
        if rec is None:
            raise UnmatchedUnlock(
                "FastUnlock without a matching FastLock on this OptiLock", wid)
        if rec.slow:
            del self.inflight[wid][ol_key]
            self.mutex_release(wid, m_serial, mode)
            if rec.htm_failed:
                ia, ib = self.perceptron.indices(rec.ol_site, m_serial)
                self.perceptron.bump(ia, ib, -1)
            self.stats.cs_log.append("bypass" if rec.bypass else "slow")
            return
        if m_serial != rec.m_serial:
            raise TxAbort(ABORT_MISMATCH)
        t = self.tx[wid]
        if t.depth > 1:
            t.depth -= 1
        else:
            self.commit_outermost(wid)
        del self.inflight[wid][ol_key]
        ia, ib = self.perceptron.indices(rec.ol_site, rec.m_serial)
        self.perceptron.bump(ia, ib, +1)
        self.perceptron.counters_a[ia] = 0
        self.perceptron.counters_b[ib] = 0
        self.stats.cs_log.append("fast")

    # -- diagnostics --------------------------------------------------------

    def holders(self) -> dict:
        out = {}
        for cell, st in sorted(self.store.items()):
            if isinstance(cell, tuple) and cell and cell[0] == "mx" \
                    and st != FREE:
                out[cell[1]] = st
        return out
