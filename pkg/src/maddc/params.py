"""Flat ``key = value`` parameter files shared by the CLI and the models.

Lines hold one assignment each; ``#`` starts a comment.  Values stay
strings so each consumer can parse what it needs; ``floats_from`` splits a
comma-separated value into a float tuple.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple

__all__ = ["read_flat_params", "floats_from"]


def read_flat_params(path) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def floats_from(mapping: Mapping[str, str], key: str,
                default: Sequence[float]) -> Tuple[float, ...]:
    if key not in mapping:
        return tuple(default)
    return tuple(float(part) for part in mapping[key].split(","))
