"""Knowledge base shared by the analyzer and planner.

Holds the four kinds of information the optimizer needs (application domain,
adaptation goals, variable catalog, operational history), summarizes history
under a character budget, and renders the analyzer and planner prompts.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import resources
from .dsl import GRAMMAR
from .sim import CONTROLS, OBSERVABLES, IntervalRecord, records_to_csv

DEFAULT_WORST_K = 5
DEFAULT_BUDGET = 8000
CONTEXT_RADIUS = 2
PHASES = 4

SECTION_DOMAIN = "## 1. Application domain"
SECTION_GOALS = "## 2. Adaptation goals"
SECTION_VARIABLES = "## 3. Variables"
SECTION_HISTORY = "## 4. Operational history"
SECTION_RULES = "## Current rules"
SECTION_DIAGNOSIS = "## Diagnosis"
SECTION_LANGUAGE = "## Rule language"
SECTION_TASK = "## Task"


class IncompleteKnowledgeError(ValueError):
    pass


@dataclass(frozen=True)
class VariableInfo:
    name: str
    kind: str  # "observed" or "control"
    min: Optional[float]
    max: Optional[float]
    unit: str
    description: str


@dataclass(frozen=True)
class IterationResult:
    """Outcome of one optimizer cycle. Iteration 0 is the starting ruleset."""

    iteration: int
    ruleset_text: str
    parse_ok: bool
    total_utility: Optional[float]
    eval_error_count: int = 0
    accepted: bool = False
    best_utility: Optional[float] = None
    llm_calls: int = 0
    diagnostics: tuple[str, ...] = ()
    duration: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.parse_ok and self.total_utility is not None:
            raise ValueError("a failed iteration has no utility")


_CATALOG_ROWS = [
    ("arrival_rate", 0, None, "req/s", "Mean request arrival rate during the previous interval."),
    ("arrival_rate_ewma", 0, None, "req/s", "Exponentially smoothed arrival rate (alpha 0.3)."),
    ("response_time", 0, None, "s", "Mean response time in the previous interval; equals the interval length when saturated."),
    ("response_time_ewma", 0, None, "s", "Exponentially smoothed response time (alpha 0.3)."),
    ("utilization", 0, None, "fraction", "Offered load over capacity of the active servers in the previous interval; above 1 means overload."),
    ("servers", 1, None, "count", "Active servers now. Control: set_servers/add_servers change the provisioned count (active plus booting)."),
    ("booting_servers", 0, None, "count", "Servers requested but not yet serving."),
    ("max_servers", 1, None, "count", "Upper bound on provisioned servers."),
    ("dimmer", 0, 1, "fraction", "Share of responses with optional content. Control: set_dimmer/add_dimmer, clamped to [0, 1]."),
    ("throughput", 0, None, "req/s", "Requests served per second in the previous interval."),
    ("intervals_since_server_change", 0, None, "count", "Intervals since the provisioned server count last changed."),
    ("interval_index", 0, None, "count", "Index of the interval being decided (0-based)."),
    ("last_interval_utility", None, None, "money", "Utility earned in the previous interval."),
]


def default_catalog(max_servers: Optional[int] = None) -> list[VariableInfo]:
    """The variable catalog; ``servers`` and ``dimmer`` are the controls."""
    rows = []
    for name, lo, hi, unit, desc in _CATALOG_ROWS:
        if name in ("servers", "max_servers") and max_servers is not None:
            hi = max_servers
        kind = "control" if name in CONTROLS else "observed"
        rows.append(VariableInfo(name, kind, lo, hi, unit, desc))
    assert [v.name for v in rows] == list(OBSERVABLES)
    return rows


@dataclass
class KnowledgeBase:
    domain_description: str
    goals: str
    catalog: list[VariableInfo]
    iteration_history: list[IterationResult] = field(default_factory=list)
    interval_history: list[IntervalRecord] = field(default_factory=list)
    current_rules: str = ""

    @classmethod
    def bundled(cls, max_servers: Optional[int] = None) -> "KnowledgeBase":
        return cls(
            domain_description=resources.read_text("knowledge", "domain.txt"),
            goals=resources.read_text("knowledge", "goals.txt"),
            catalog=default_catalog(max_servers),
        )

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.catalog]

    def missing_categories(self) -> list[str]:
        missing = []
        if not self.domain_description.strip():
            missing.append("application domain")
        if not self.goals.strip():
            missing.append("adaptation goals")
        if not self.catalog:
            missing.append("variable catalog")
        if not self.interval_history:
            missing.append("operational history")
        return missing

    def require_complete(self) -> None:
        missing = self.missing_categories()
        if missing:
            raise IncompleteKnowledgeError("knowledge base is missing: " + ", ".join(missing))
        names = self.variable_names
        if len(set(names)) != len(names):
            raise IncompleteKnowledgeError("variable catalog has duplicate names")


def record_iteration(
    kb: KnowledgeBase, result: IterationResult, records: Optional[Sequence[IntervalRecord]] = None
) -> KnowledgeBase:
    """Append one iteration; ``records`` (if given) become the interval history."""
    if kb.iteration_history and result.iteration <= kb.iteration_history[-1].iteration:
        last = kb.iteration_history[-1].iteration
        if any(r.iteration == result.iteration for r in kb.iteration_history):
            raise ValueError(f"duplicate iteration index {result.iteration}")
        raise ValueError(f"iteration index {result.iteration} is not after {last}")
    kb.iteration_history.append(result)
    if records is not None:
        kb.interval_history = list(records)
    return kb


# -- history summary --------------------------------------------------------

def _money(x: float) -> str:
    return f"{x:.2f}"


def _interval_line(r: IntervalRecord, marker: str = " ") -> str:
    flags = " SATURATED" if r.saturated else (" VIOLATION" if r.violated else "")
    line = (
        f"{marker} t={r.interval_index} arrival={r.arrival_rate:.2f} servers={r.active_servers}+{r.booting_servers}"
        f" dimmer={r.dimmer:.2f} util={r.utilization:.2f} R={r.response_time:.3f}{flags}"
        f" U={_money(r.interval_utility)} actions: {r.applied_actions}"
    )
    if r.eval_error:
        line += f" error: {r.eval_error}"
    return line


@dataclass(frozen=True)
class HistorySummary:
    intervals: int
    total_utility: float
    violations: int
    eval_errors: int
    phase_utilities: tuple[tuple[int, int, float], ...]
    worst: tuple[IntervalRecord, ...]
    windows: tuple[tuple[IntervalRecord, ...], ...]
    iterations: tuple[tuple[int, Optional[float]], ...]
    omitted_iterations: int = 0
    omitted_worst: int = 0

    def aggregate_text(self) -> str:
        phases = ", ".join(f"{a}-{b}: {_money(u)}" for a, b, u in self.phase_utilities)
        return (
            f"Latest simulation: {self.intervals} intervals, total utility {_money(self.total_utility)}, "
            f"{self.violations} intervals missed the response-time goal, {self.eval_errors} rule evaluation errors.\n"
            f"Utility by phase (interval range: utility): {phases}\n"
        )

    def render(self) -> str:
        parts = [self.aggregate_text()]
        if self.iterations or self.omitted_iterations:
            parts.append("Rulesets tried so far (iteration: total utility):\n")
            if self.omitted_iterations:
                parts.append(f"  ({self.omitted_iterations} earlier iterations omitted)\n")
            for it, u in self.iterations:
                parts.append(f"  #{it}: {_money(u) if u is not None else 'invalid ruleset, not simulated'}\n")
        if self.worst:
            parts.append("Worst intervals (lowest utility first):\n")
            for rec, window in zip(self.worst, self.windows):
                parts.append(f"  interval {rec.interval_index}, utility {_money(rec.interval_utility)}\n")
                for w in window:
                    parts.append("  " + _interval_line(w, ">" if w.interval_index == rec.interval_index else " ") + "\n")
            if self.omitted_worst:
                parts.append(f"  ({self.omitted_worst} more worst intervals omitted)\n")
        return "".join(parts)


def summarize_history(kb: KnowledgeBase, k: int = DEFAULT_WORST_K, budget: int = DEFAULT_BUDGET) -> HistorySummary:
    """Condense the latest simulation and the iteration log into at most ``budget`` characters.

    Picks the ``k`` lowest-utility intervals (earlier index wins ties) with
    neighbouring intervals for context. Detail is dropped in this order until
    the rendering fits: context windows, oldest iteration entries, worst
    intervals from the tail. Aggregates are never dropped; a budget too small
    to hold them is an error.
    """
    records = kb.interval_history
    if not records:
        raise ValueError("no simulation in history to summarize")
    n = len(records)
    bounds = [round(i * n / min(PHASES, n)) for i in range(min(PHASES, n) + 1)]
    phases = tuple(
        (records[a].interval_index, records[b - 1].interval_index, math.fsum(r.interval_utility for r in records[a:b]))
        for a, b in zip(bounds, bounds[1:])
    )
    order = sorted(range(n), key=lambda i: (records[i].interval_utility, i))[: max(k, 0)]
    iterations = tuple((r.iteration, r.total_utility) for r in kb.iteration_history)

    def build(radius: int, n_worst: int, n_iters: int) -> HistorySummary:
        chosen = order[:n_worst]
        windows = tuple(tuple(records[max(0, i - radius): i + radius + 1]) for i in chosen)
        kept_iters = iterations[len(iterations) - n_iters:] if n_iters else ()
        return HistorySummary(
            intervals=n,
            total_utility=math.fsum(r.interval_utility for r in records),
            violations=sum(r.violated for r in records),
            eval_errors=sum(r.eval_error is not None for r in records),
            phase_utilities=phases,
            worst=tuple(records[i] for i in chosen),
            windows=windows,
            iterations=kept_iters,
            omitted_iterations=len(iterations) - len(kept_iters),
            omitted_worst=len(order) - len(chosen),
        )

    radius, n_worst, n_iters = CONTEXT_RADIUS, len(order), len(iterations)
    summary = build(radius, n_worst, n_iters)
    if len(summary.aggregate_text()) > budget:
        raise ValueError(f"budget of {budget} characters cannot hold the aggregate statistics")
    while len(summary.render()) > budget:
        if radius > 0:
            radius -= 1
        elif n_iters > 0:
            n_iters -= 1
        elif n_worst > 0:
            n_worst -= 1
        else:
            break
        summary = build(radius, n_worst, n_iters)
    if len(summary.render()) > budget:
        # only the "omitted" notes are left over the aggregates; drop them too
        summary = replace(summary, omitted_iterations=0, omitted_worst=0)
    if len(summary.render()) > budget:
        raise ValueError(f"budget of {budget} characters is too small for the history summary")
    return summary


# -- prompt rendering -------------------------------------------------------

DSL_REFERENCE = """\
Semantics:
- `let` definitions are evaluated first, in order; a definition may use catalog
  variables and earlier definitions. Definitions may be numeric or boolean.
- Every `when` rule is checked top to bottom each interval. All rules whose
  condition holds fire; their actions are applied in textual order and the last
  action on a control wins.
- set_servers(n) requests n provisioned servers (active plus booting);
  add_servers(k) adds k to the current provisioned count (negative k removes).
  The request is rounded to a whole number and clamped to [1, max_servers].
- set_dimmer(x) sets the dimmer; add_dimmer(x) adds x. The result is clamped to [0, 1].
- Operators: + - * / on numbers; < <= > >= == != compare numbers; && || ! on
  booleans. Functions: min(a, b, ...), max(a, b, ...), abs(a). Numbers and
  booleans never mix. Avoid == on computed values.
- Division by zero makes the whole interval a no-op and is reported as an error.
- A ruleset needs at least one `when` rule. Comments start with #."""


def render_catalog(catalog: Sequence[VariableInfo]) -> str:
    lines = []
    for v in catalog:
        lo = "-inf" if v.min is None else f"{v.min:g}"
        hi = "inf" if v.max is None else f"{v.max:g}"
        lines.append(f"- {v.name} [{v.kind}; {v.unit}; range {lo}..{hi}]: {v.description}")
    return "\n".join(lines)


def _knowledge_sections(kb: KnowledgeBase, summary: HistorySummary) -> list[str]:
    return [
        f"{SECTION_DOMAIN}\n{kb.domain_description.strip()}\n",
        f"{SECTION_GOALS}\n{kb.goals.strip()}\n",
        f"{SECTION_VARIABLES}\nRules may read every variable below. The controls are changed only through actions.\n"
        f"{render_catalog(kb.catalog)}\n",
        f"{SECTION_HISTORY}\n{summary.render().rstrip()}\n",
    ]


ANALYZER_SYSTEM = (
    "You are the analysis stage of a self-adaptive system. You study how an adaptation "
    "ruleset behaved in simulation and explain what went wrong."
)
PLANNER_SYSTEM = (
    "You are the planning stage of a self-adaptive system. You write improved adaptation "
    "rulesets in a small rule language."
)


def render_analyzer_prompt(kb: KnowledgeBase, summary: HistorySummary) -> str:
    kb.require_complete()
    sections = _knowledge_sections(kb, summary)
    sections.append(f"{SECTION_RULES}\n```\n{kb.current_rules.strip()}\n```\n")
    sections.append(
        f"{SECTION_TASK}\n"
        "Diagnose the current rules. List the suspected issues as bullet points starting with '- '. "
        "Tie each issue to the specific intervals in the history where it shows, explain why "
        "utility was lost there, and state \"which part of the rules to modify\". "
        "Do not write a new ruleset yet.\n"
    )
    return "\n".join(sections)


def render_planner_prompt(kb: KnowledgeBase, summary: HistorySummary, diagnosis: str) -> str:
    if not diagnosis or not diagnosis.strip():
        raise ValueError("diagnosis is empty")
    kb.require_complete()
    sections = _knowledge_sections(kb, summary)
    sections.append(f"{SECTION_RULES}\n```\n{kb.current_rules.strip()}\n```\n")
    sections.append(f"{SECTION_DIAGNOSIS}\n{diagnosis.strip()}\n")
    sections.append(f"{SECTION_LANGUAGE}\nGrammar (EBNF):\n```ebnf\n{GRAMMAR}\n```\n{DSL_REFERENCE}\n")
    sections.append(
        f"{SECTION_TASK}\n"
        "Using the diagnosis, write an improved ruleset. You may introduce new `let` "
        "definitions built from the catalog variables and adjust thresholds or step sizes.\n"
        "Output contract: reply with exactly one fenced code block containing the complete "
        "ruleset and nothing else inside the fence. Only the last fenced block of your reply is used.\n"
    )
    return "\n".join(sections)


# -- persistence ------------------------------------------------------------

CATALOG_HEADER = ("name", "kind", "min", "max", "unit", "description")
ITERATIONS_HEADER = ("iteration", "utility", "errors", "ruleset_file")


def _opt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def save_knowledge(kb: KnowledgeBase, directory: str | Path) -> Path:
    """Write the knowledge base as a directory of text and CSV files.

    The latest interval history goes to ``history/iter_<n>.csv`` for the most
    recent simulated iteration; earlier history files are left in place.
    """
    directory = Path(directory)
    (directory / "history").mkdir(parents=True, exist_ok=True)
    (directory / "rules").mkdir(exist_ok=True)
    (directory / "domain.txt").write_text(kb.domain_description, encoding="utf-8")
    (directory / "goals.txt").write_text(kb.goals, encoding="utf-8")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CATALOG_HEADER)
    for v in kb.catalog:
        w.writerow([v.name, v.kind, _opt(v.min), _opt(v.max), v.unit, v.description])
    (directory / "catalog.csv").write_text(buf.getvalue(), encoding="utf-8")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ITERATIONS_HEADER)
    for r in kb.iteration_history:
        rules_file = f"rules/iter_{r.iteration}.rules"
        (directory / rules_file).write_text(r.ruleset_text, encoding="utf-8")
        w.writerow([r.iteration, _opt(r.total_utility), r.eval_error_count, rules_file])
    (directory / "iterations.csv").write_text(buf.getvalue(), encoding="utf-8")

    simulated = [r for r in kb.iteration_history if r.total_utility is not None]
    if simulated and kb.interval_history:
        path = directory / "history" / f"iter_{simulated[-1].iteration}.csv"
        path.write_text(records_to_csv(kb.interval_history), encoding="utf-8")
    return directory


def load_knowledge(directory: str | Path) -> KnowledgeBase:
    """Read back the static categories and the iteration log.

    Interval history is not reconstructed; the CSV files under ``history/``
    are for inspection.
    """
    directory = Path(directory)
    catalog = []
    with open(directory / "catalog.csv", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            catalog.append(VariableInfo(
                row["name"], row["kind"],
                float(row["min"]) if row["min"] else None,
                float(row["max"]) if row["max"] else None,
                row["unit"], row["description"],
            ))
    kb = KnowledgeBase(
        domain_description=(directory / "domain.txt").read_text(encoding="utf-8"),
        goals=(directory / "goals.txt").read_text(encoding="utf-8"),
        catalog=catalog,
    )
    iterations = directory / "iterations.csv"
    if iterations.exists():
        with open(iterations, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                text = (directory / row["ruleset_file"]).read_text(encoding="utf-8")
                utility = float(row["utility"]) if row["utility"] else None
                record_iteration(kb, IterationResult(
                    iteration=int(row["iteration"]),
                    ruleset_text=text,
                    parse_ok=utility is not None,
                    total_utility=utility,
                    eval_error_count=int(row["errors"]),
                ))
    return kb
