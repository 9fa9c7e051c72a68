"""Reader for the flat ``key = value`` files shared by scenarios, traces,
experiments and hill-climb bounds."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable


class ConfigError(ValueError):
    pass


def parse_kv(text: str, allowed: Iterable[str] | None = None, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines into an ordered dict of raw strings.

    ``#`` starts a comment. Blank lines are skipped. Duplicate keys, lines
    without ``=`` and (when ``allowed`` is given) unknown keys are errors.
    """
    allowed_set = set(allowed) if allowed is not None else None
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if allowed_set is not None and key not in allowed_set:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_kv(path: str | Path, allowed: Iterable[str] | None = None) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), allowed, source=str(path))


def dump_kv(values: dict[str, object]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def as_float(values: dict[str, str], key: str, default: float) -> float:
    if key not in values:
        return default
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {values[key]!r}") from None


def as_int(values: dict[str, str], key: str, default: int) -> int:
    if key not in values:
        return default
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {values[key]!r}") from None
