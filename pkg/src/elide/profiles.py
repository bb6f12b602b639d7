"""Execution profiles used to skip cold critical sections.

The on-disk form is JSON with pprof-style cumulative semantics::

    {"total_weight": 100,
     "entries": [{"function": "main.Get", "cumulative_fraction": 0.30}]}

A function absent from the profile is cold (fraction 0.0).  Qualified
names may carry a package prefix; lookup first tries the exact unit name
and then the name with one leading ``pkg.`` component stripped.  Lifted
closures inherit the fraction of the function they appear in.
"""

from __future__ import annotations

import json

from .errors import MalformedProfile


class ProfileFile:
    def __init__(self, total_weight: float, fractions: dict[str, float]):
        self.total_weight = total_weight
        self.fractions = fractions

    def fraction(self, unit_name: str) -> float:
        top = unit_name.split("$", 1)[0]
        if top in self.fractions:
            return self.fractions[top]
        for name, frac in self.fractions.items():
            if "." in name and name.split(".", 1)[1] == top:
                return frac
        return 0.0


def parse_profile(text: str, path: str = "<profile>") -> ProfileFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedProfile(f"{path}: not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise MalformedProfile(f"{path}: top level must be an object")
    tw = data.get("total_weight")
    if not isinstance(tw, (int, float)) or tw <= 0:
        raise MalformedProfile(f"{path}: total_weight must be a positive number")
    entries = data.get("entries")
    if not isinstance(entries, list):
        raise MalformedProfile(f"{path}: entries must be a list")
    fractions: dict[str, float] = {}
    for i, ent in enumerate(entries):
        where = f"{path}: entries[{i}]"
        if not isinstance(ent, dict):
            raise MalformedProfile(f"{where}: must be an object")
        name = ent.get("function")
        frac = ent.get("cumulative_fraction")
        if not isinstance(name, str) or not name:
            raise MalformedProfile(f"{where}.function: must be a non-empty string")
        if not isinstance(frac, (int, float)) or not (0.0 <= frac <= 1.0):
            raise MalformedProfile(
                f"{where}.cumulative_fraction: must be in [0, 1]")
        if name in fractions:
            raise MalformedProfile(f"{where}.function: duplicate name {name!r}")
        fractions[name] = float(frac)
    return ProfileFile(float(tw), fractions)


def load_profile(path: str) -> ProfileFile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise MalformedProfile(f"{path}: {e.strerror}") from None
    return parse_profile(text, path)
