"""Shared error types and rejection reason codes.

Analysis rejections are not exceptions: a pair that cannot be elided is
recorded with a reason code and the tool moves on.  Exceptions here are
reserved for conditions that stop a command outright (bad input, bad
profile, a runtime fault in the emulated program, and so on).
"""

from __future__ import annotations


class ElideError(Exception):
    """Base class for every error raised by this package."""


class ParseError(ElideError):
    """Source text does not conform to the subject-language grammar."""

    def __init__(self, msg: str, path: str = "<input>", line: int = 0, col: int = 0):
        super().__init__(f"{path}:{line}:{col}: {msg}")
        self.path = path
        self.line = line
        self.col = col
        self.msg = msg


class UnsupportedConstruct(ElideError):
    """Syntactically valid input that falls outside the analyzable subset."""


class ResolveError(ElideError):
    """Name or type resolution failure (unknown identifier, lock op on a
    non-mutex value, arity mismatch, and similar)."""


class MalformedProfile(ElideError):
    """Profile file fails schema validation."""


class ScopeConflict(ElideError):
    """No collision-free name could be generated for an inserted variable."""


class PatchError(ElideError):
    """A unified diff could not be applied cleanly."""


class RuntimePanic(ElideError):
    """The emulated program performed an illegal operation (explicit panic,
    unlock of an unheld mutex, nil dereference)."""

    def __init__(self, msg: str, worker: int = -1):
        super().__init__(msg)
        self.worker = worker


class UnmatchedUnlock(RuntimePanic):
    """FastUnlock executed with no matching in-flight FastLock."""


class Deadlock(ElideError):
    """No runnable worker remained while some were still blocked."""

    def __init__(self, msg: str, diagnosis: list[str]):
        super().__init__(msg)
        self.diagnosis = diagnosis


# Reason codes attached to analysis decisions.  `explain` walks these.
REASON_ACCEPTED = "accepted"
REASON_DOMINANCE = "dominance"
REASON_ALIAS_CONFLICT = "alias-conflict"
REASON_IO = "io"
REASON_MULTIPLE_DEFER = "multiple-defer"
REASON_PROFILE_COLD = "profile-cold"
REASON_CROSS_CLOSURE = "cross-closure"
REASON_EXPOSURE = "exposure"
