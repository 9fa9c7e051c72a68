"""Interval-based simulator of a load-balanced web tier with an elastic
server pool and a brownout dimmer.

Each interval is treated as a stationary M/M/c system; the mean response
time comes from the Erlang-C formula, with a saturation proxy (R = interval
length) when the offered load reaches capacity.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .config import ConfigError, as_float, as_int, parse_kv
from .dsl import ActionSet, RuleSet, evaluate

SATURATION_MARGIN = 1e-6


class SaturationError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceModel:
    t_m: float = 0.04  # mean service time, mandatory content only (s)
    t_o: float = 0.08  # mean service time with optional content (s)

    def __post_init__(self):
        if not 0 < self.t_m <= self.t_o:
            raise ValueError(f"need 0 < t_m <= t_o, got t_m={self.t_m}, t_o={self.t_o}")


@dataclass(frozen=True)
class EconomicModel:
    r_m: float = 1.0
    r_o: float = 1.5
    rt_threshold: float = 0.75
    server_cost: float = 0.05  # per server per second
    penalty: float = 0.25

    def __post_init__(self):
        if not 0 <= self.r_m <= self.r_o:
            raise ValueError(f"need 0 <= r_m <= r_o, got r_m={self.r_m}, r_o={self.r_o}")
        if self.rt_threshold <= 0:
            raise ValueError("rt_threshold must be positive")
        if self.server_cost < 0 or self.penalty < 0:
            raise ValueError("server_cost and penalty must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    interval_seconds: float = 60.0
    max_servers: int = 10
    boot_delay_intervals: int = 1
    initial_servers: int = 1
    initial_dimmer: float = 1.0
    service: ServiceModel = field(default_factory=ServiceModel)
    economics: EconomicModel = field(default_factory=EconomicModel)
    trace_id: str = "clarknet_like"
    seed: int = 42
    ewma_alpha: float = 0.3

    def __post_init__(self):
        if self.interval_seconds <= 0:
            raise ValueError("interval_seconds must be positive")
        if not 1 <= self.initial_servers <= self.max_servers:
            raise ValueError(
                f"need 1 <= initial_servers <= max_servers, got {self.initial_servers} and {self.max_servers}"
            )
        if not 0 <= self.initial_dimmer <= 1:
            raise ValueError("initial_dimmer must be in [0, 1]")
        if self.boot_delay_intervals < 0:
            raise ValueError("boot_delay_intervals must be >= 0")
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


SCENARIO_KEYS = (
    "interval_seconds", "max_servers", "boot_delay_intervals", "initial_servers",
    "initial_dimmer", "t_m", "t_o", "r_m", "r_o", "rt_threshold", "server_cost",
    "penalty", "trace", "seed", "ewma_alpha",
)


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioConfig:
    values = parse_kv(text, SCENARIO_KEYS, source)
    d = ScenarioConfig()
    try:
        return ScenarioConfig(
            interval_seconds=as_float(values, "interval_seconds", d.interval_seconds),
            max_servers=as_int(values, "max_servers", d.max_servers),
            boot_delay_intervals=as_int(values, "boot_delay_intervals", d.boot_delay_intervals),
            initial_servers=as_int(values, "initial_servers", d.initial_servers),
            initial_dimmer=as_float(values, "initial_dimmer", d.initial_dimmer),
            service=ServiceModel(
                t_m=as_float(values, "t_m", d.service.t_m),
                t_o=as_float(values, "t_o", d.service.t_o),
            ),
            economics=EconomicModel(
                r_m=as_float(values, "r_m", d.economics.r_m),
                r_o=as_float(values, "r_o", d.economics.r_o),
                rt_threshold=as_float(values, "rt_threshold", d.economics.rt_threshold),
                server_cost=as_float(values, "server_cost", d.economics.server_cost),
                penalty=as_float(values, "penalty", d.economics.penalty),
            ),
            trace_id=values.get("trace", d.trace_id),
            seed=as_int(values, "seed", d.seed),
            ewma_alpha=as_float(values, "ewma_alpha", d.ewma_alpha),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def dump_scenario(s: ScenarioConfig) -> str:
    values = {
        "interval_seconds": s.interval_seconds,
        "max_servers": s.max_servers,
        "boot_delay_intervals": s.boot_delay_intervals,
        "initial_servers": s.initial_servers,
        "initial_dimmer": s.initial_dimmer,
        "t_m": s.service.t_m,
        "t_o": s.service.t_o,
        "r_m": s.economics.r_m,
        "r_o": s.economics.r_o,
        "rt_threshold": s.economics.rt_threshold,
        "server_cost": s.economics.server_cost,
        "penalty": s.economics.penalty,
        "trace": s.trace_id,
        "seed": s.seed,
        "ewma_alpha": s.ewma_alpha,
    }
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# -- queueing model ---------------------------------------------------------

def service_rate(dimmer: float, model: ServiceModel) -> float:
    """Per-server service rate for a given fraction of optional-content responses."""
    return 1.0 / (dimmer * model.t_o + (1.0 - dimmer) * model.t_m)


def erlang_c(c: int, a: float) -> float:
    """Probability that an arrival has to queue in M/M/c with offered load ``a``.

    Uses the Erlang-B recurrence, which stays stable for large ``c``.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    if a < 0:
        raise ValueError("offered load must be non-negative")
    if a >= c:
        raise SaturationError(f"offered load {a} >= servers {c}")
    b = 1.0
    for k in range(1, c + 1):
        b = a * b / (k + a * b)
    return c * b / (c - a * (1.0 - b))


def interval_response_time(lam: float, mu: float, c: int, tau: float = 60.0) -> tuple[float, bool]:
    """Mean response time and saturation flag for one interval."""
    if lam / (c * mu) < 1.0 - SATURATION_MARGIN:
        return 1.0 / mu + erlang_c(c, lam / mu) / (c * mu - lam), False
    return tau, True


def interval_utility(
    lam: float,
    mu: float,
    c_active: int,
    dimmer: float,
    response_time: float,
    saturated: bool,
    econ: EconomicModel,
    tau: float,
    booting: int = 0,
) -> float:
    """Revenue minus server cost over one interval.

    Every provisioned server (active or booting) is paid for; only active
    ones serve. A missed response-time goal replaces revenue with a penalty
    proportional to the offered load.
    """
    served = min(lam, c_active * mu)
    if response_time <= econ.rt_threshold and not saturated:
        revenue_rate = served * (dimmer * econ.r_o + (1.0 - dimmer) * econ.r_m)
    else:
        revenue_rate = -econ.penalty * lam * econ.r_m
    return tau * (revenue_rate - (c_active + booting) * econ.server_cost)


# -- simulation state -------------------------------------------------------

OBSERVABLES = (
    "arrival_rate",
    "arrival_rate_ewma",
    "response_time",
    "response_time_ewma",
    "utilization",
    "servers",
    "booting_servers",
    "max_servers",
    "dimmer",
    "throughput",
    "intervals_since_server_change",
    "interval_index",
    "last_interval_utility",
)
CONTROLS = ("servers", "dimmer")


@dataclass(frozen=True)
class MetricsSnapshot:
    """What the rules can see when deciding interval ``interval_index``.

    Observations describe the interval before it; on the first interval
    they are zero.
    """

    arrival_rate: float
    arrival_rate_ewma: float
    response_time: float
    response_time_ewma: float
    utilization: float
    servers: float
    booting_servers: float
    max_servers: float
    dimmer: float
    throughput: float
    intervals_since_server_change: float
    interval_index: float
    last_interval_utility: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class IntervalRecord:
    interval_index: int
    arrival_rate: float
    active_servers: int
    booting_servers: int
    dimmer: float
    service_rate: float
    utilization: float
    response_time: float
    throughput: float
    saturated: bool
    violated: bool
    interval_utility: float
    applied_actions: str = "none"
    eval_error: Optional[str] = None


@dataclass(frozen=True)
class SimState:
    interval_index: int
    active_servers: int
    boot_pipeline: tuple[int, ...]
    dimmer: float
    ewma_arrival: float = 0.0
    ewma_response: float = 0.0
    intervals_since_server_change: int = 0
    cumulative_utility: float = 0.0
    last: Optional[IntervalRecord] = None

    @classmethod
    def initial(cls, scenario: ScenarioConfig) -> "SimState":
        return cls(0, scenario.initial_servers, (), scenario.initial_dimmer)


def snapshot(state: SimState, scenario: ScenarioConfig) -> MetricsSnapshot:
    last = state.last
    return MetricsSnapshot(
        arrival_rate=last.arrival_rate if last else 0.0,
        arrival_rate_ewma=state.ewma_arrival,
        response_time=last.response_time if last else 0.0,
        response_time_ewma=state.ewma_response,
        utilization=last.utilization if last else 0.0,
        servers=state.active_servers,
        booting_servers=len(state.boot_pipeline),
        max_servers=scenario.max_servers,
        dimmer=state.dimmer,
        throughput=last.throughput if last else 0.0,
        intervals_since_server_change=state.intervals_since_server_change,
        interval_index=state.interval_index,
        last_interval_utility=last.interval_utility if last else 0.0,
    )


def _fmt(x: float) -> str:
    return f"{x:g}"


def step(state: SimState, arrival_rate: float, ruleset: RuleSet, scenario: ScenarioConfig) -> tuple[SimState, IntervalRecord]:
    """Run one interval: observe, decide, act, then serve ``arrival_rate``.

    Servers that were already booting advance one interval before new
    requests are applied, so a server added now with a boot delay of ``k``
    starts serving ``k`` intervals later. Removals cancel booting servers
    (newest first) before shutting down active ones, and take effect at once.
    """
    if not (arrival_rate >= 0 and math.isfinite(arrival_rate)):
        raise ValueError(f"arrival rate must be finite and >= 0, got {arrival_rate}")
    actions: ActionSet = evaluate(ruleset, snapshot(state, scenario))

    pipeline = [n - 1 for n in state.boot_pipeline]
    active = state.active_servers + sum(1 for n in pipeline if n == 0)
    pipeline = [n for n in pipeline if n > 0]

    applied = []
    provisioned_before = active + len(pipeline)
    if actions.servers is not None:
        target = min(max(actions.servers, 1), scenario.max_servers)
        if target > provisioned_before:
            extra = target - provisioned_before
            if scenario.boot_delay_intervals == 0:
                active += extra
            else:
                pipeline.extend([scenario.boot_delay_intervals] * extra)
        elif target < provisioned_before:
            surplus = provisioned_before - target
            cancelled = min(surplus, len(pipeline))
            del pipeline[len(pipeline) - cancelled:]
            active -= surplus - cancelled
        if target != provisioned_before:
            applied.append(f"servers {provisioned_before}->{target}")
    server_changed = active + len(pipeline) != provisioned_before

    dimmer = state.dimmer
    if actions.dimmer is not None:
        new = min(max(actions.dimmer, 0.0), 1.0)
        if new != dimmer:
            applied.append(f"dimmer {_fmt(dimmer)}->{_fmt(new)}")
        dimmer = new

    tau = scenario.interval_seconds
    mu = service_rate(dimmer, scenario.service)
    rt, saturated = interval_response_time(arrival_rate, mu, active, tau)
    utility = interval_utility(
        arrival_rate, mu, active, dimmer, rt, saturated, scenario.economics, tau, booting=len(pipeline)
    )
    record = IntervalRecord(
        interval_index=state.interval_index,
        arrival_rate=arrival_rate,
        active_servers=active,
        booting_servers=len(pipeline),
        dimmer=dimmer,
        service_rate=mu,
        utilization=arrival_rate / (active * mu),
        response_time=rt,
        throughput=min(arrival_rate, active * mu),
        saturated=saturated,
        violated=saturated or rt > scenario.economics.rt_threshold,
        interval_utility=utility,
        applied_actions="; ".join(applied) or "none",
        eval_error=actions.error,
    )

    alpha = scenario.ewma_alpha
    first = state.last is None
    new_state = replace(
        state,
        interval_index=state.interval_index + 1,
        active_servers=active,
        boot_pipeline=tuple(pipeline),
        dimmer=dimmer,
        ewma_arrival=arrival_rate if first else alpha * arrival_rate + (1 - alpha) * state.ewma_arrival,
        ewma_response=rt if first else alpha * rt + (1 - alpha) * state.ewma_response,
        intervals_since_server_change=0 if server_changed else state.intervals_since_server_change + 1,
        cumulative_utility=state.cumulative_utility + utility,
        last=record,
    )
    return new_state, record


@dataclass(frozen=True)
class SimResult:
    records: tuple[IntervalRecord, ...]
    total_utility: float
    eval_error_count: int

    @property
    def violations(self) -> int:
        return sum(r.violated for r in self.records)


def run_simulation(scenario: ScenarioConfig, ruleset: Optional[RuleSet], trace) -> SimResult:
    """Simulate the whole trace under one ruleset. Pure and deterministic."""
    if not trace.rates:
        raise ValueError("trace is empty")
    if trace.interval_seconds != scenario.interval_seconds:
        raise ValueError(
            f"trace interval {trace.interval_seconds}s does not match scenario interval {scenario.interval_seconds}s"
        )
    ruleset = ruleset if ruleset is not None else RuleSet()
    state = SimState.initial(scenario)
    records = []
    for lam in trace.rates:
        state, record = step(state, lam, ruleset, scenario)
        records.append(record)
    return SimResult(
        records=tuple(records),
        total_utility=math.fsum(r.interval_utility for r in records),
        eval_error_count=sum(r.eval_error is not None for r in records),
    )


RESULT_CSV_HEADER = (
    "interval", "arrival_rate", "servers", "booting", "dimmer", "utilization",
    "response_time", "violated", "utility", "actions", "error",
)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_CSV_HEADER)
    for r in records:
        w.writerow([
            r.interval_index, repr(r.arrival_rate), r.active_servers, r.booting_servers,
            repr(r.dimmer), repr(r.utilization), repr(r.response_time), int(r.violated),
            repr(r.interval_utility), r.applied_actions, r.eval_error or "",
        ])
    return buf.getvalue()


def records_from_csv(text: str) -> list[dict]:
    """Read a result CSV back as dicts of typed values (for inspection and reloading history)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append({
            "interval": int(row["interval"]),
            "arrival_rate": float(row["arrival_rate"]),
            "servers": int(row["servers"]),
            "booting": int(row["booting"]),
            "dimmer": float(row["dimmer"]),
            "utilization": float(row["utilization"]),
            "response_time": float(row["response_time"]),
            "violated": row["violated"] == "1",
            "utility": float(row["utility"]),
            "actions": row["actions"],
            "error": row["error"] or None,
        })
    return out

