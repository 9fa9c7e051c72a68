"""Arrival-rate traces: CSV I/O and a seeded bursty generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, as_float, as_int, parse_kv

TRACE_HEADER = "interval,arrival_rate"


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trace:
    rates: tuple[float, ...]
    interval_seconds: float = 60.0

    def __post_init__(self):
        if not self.rates:
            raise ValueError("trace must contain at least one interval")
        for i, r in enumerate(self.rates):
            if not (math.isfinite(r) and r >= 0):
                raise ValueError(f"rate at interval {i} must be finite and >= 0, got {r}")

    def __len__(self):
        return len(self.rates)


@dataclass(frozen=True)
class SynthTraceParams:
    length: int = 120
    base: float = 10.0
    amplitude: float = 0.0
    period: int = 60
    burst_probability: float = 0.0
    burst_multiplier: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if self.base < 0:
            raise ValueError("base must be >= 0")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0 <= self.burst_probability <= 1:
            raise ValueError("burst_probability must be in [0, 1]")
        if self.burst_multiplier < 1:
            raise ValueError("burst_multiplier must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


PARAM_KEYS = ("length", "base", "amplitude", "period", "burst_probability", "burst_multiplier", "noise_std", "seed")


def parse_trace_csv(text: str, interval_seconds: float = 60.0) -> Trace:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise TraceFormatError(f"expected header {TRACE_HEADER!r} at line 1")
    rates = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceFormatError(f"malformed row at line {lineno}: {line!r}")
        try:
            index = int(parts[0])
            rate = float(parts[1])
        except ValueError:
            raise TraceFormatError(f"malformed row at line {lineno}: {line!r}") from None
        if index != len(rates):
            raise TraceFormatError(f"gap in interval numbering at line {lineno}: expected {len(rates)}, got {index}")
        if not math.isfinite(rate):
            raise TraceFormatError(f"non-finite rate at line {lineno}")
        if rate < 0:
            raise TraceFormatError(f"negative rate at line {lineno}")
        rates.append(rate)
    if not rates:
        raise TraceFormatError("trace has no rows")
    return Trace(tuple(rates), interval_seconds)


def emit_trace_csv(trace: Trace) -> str:
    rows = [TRACE_HEADER] + [f"{i},{r!r}" for i, r in enumerate(trace.rates)]
    return "\n".join(rows) + "\n"


def parse_trace_params(text: str, source: str = "<params>") -> SynthTraceParams:
    values = parse_kv(text, PARAM_KEYS, source)
    d = SynthTraceParams()
    try:
        return SynthTraceParams(
            length=as_int(values, "length", d.length),
            base=as_float(values, "base", d.base),
            amplitude=as_float(values, "amplitude", d.amplitude),
            period=as_int(values, "period", d.period),
            burst_probability=as_float(values, "burst_probability", d.burst_probability),
            burst_multiplier=as_float(values, "burst_multiplier", d.burst_multiplier),
            noise_std=as_float(values, "noise_std", d.noise_std),
            seed=as_int(values, "seed", d.seed),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def generate_trace(params: SynthTraceParams, interval_seconds: float = 60.0) -> Trace:
    """Sinusoid plus random bursts plus Gaussian noise, floored at zero."""
    rng = np.random.default_rng(params.seed)
    t = np.arange(params.length)
    bursts = rng.random(params.length) < params.burst_probability
    noise = rng.normal(0.0, params.noise_std, params.length)
    rates = (
        params.base
        + params.amplitude * np.sin(2 * np.pi * t / params.period)
        + np.where(bursts, params.base * (params.burst_multiplier - 1.0), 0.0)
        + noise
    )
    return Trace(tuple(float(r) for r in np.maximum(rates, 0.0)), interval_seconds)


def coefficient_of_variation(trace: Trace) -> float:
    rates = np.asarray(trace.rates)
    mean = rates.mean()
    return float(rates.std() / mean) if mean > 0 else 0.0


def load_trace(path: str | Path, interval_seconds: float = 60.0, seed: int | None = None) -> Trace:
    """Load a trace from a ``.csv`` file or generate one from a params file.

    ``seed`` overrides the params file's seed; it is ignored for CSV input.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        return parse_trace_csv(text, interval_seconds)
    params = parse_trace_params(text, str(path))
    if seed is not None:
        params = replace(params, seed=seed)
    return generate_trace(params, interval_seconds)
