"""Source-to-source transactional lock elision for a small concurrent
language, with an emulated transactional runtime and a deterministic
scheduling harness for checking behavioral equivalence."""

__version__ = "0.1.0"
