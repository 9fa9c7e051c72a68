"""Access to files bundled with the package (scenarios, traces, rules, knowledge)."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def data_path(*parts: str) -> Path:
    node = resources.files("adaptrules").joinpath("data")
    for part in parts:
        node = node.joinpath(part)
    return Path(str(node))


def read_text(*parts: str) -> str:
    return data_path(*parts).read_text(encoding="utf-8")


def default_scenario_path() -> Path:
    return data_path("scenarios", "default.cfg")


def default_rules_text() -> str:
    return read_text("rules", "default.rules")


def resolve_trace_ref(ref: str, base_dir: Path | None = None) -> Path:
    """Turn a scenario's ``trace`` value into a file path.

    A bare name refers to a bundled trace (``clarknet_like``); anything else
    is a path, relative to ``base_dir`` when not absolute.
    """
    if "/" not in ref and "." not in ref:
        for suffix in (".cfg", ".csv"):
            candidate = data_path("traces", ref + suffix)
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"no bundled trace named {ref!r}")
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path
