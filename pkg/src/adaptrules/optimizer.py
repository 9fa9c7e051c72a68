"""Analyzer/planner cycle and the optimizers that drive it.

Three optimizers share one interface (``propose`` + ``feedback``): an LLM
analyzer/planner pair, a scripted list of rulesets, and a hill climber over
the numeric slots of a rule template.
"""

from __future__ import annotations

import logging
import re
import string
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import read_kv
from .dsl import DSLSyntaxError, RuleSet, RuleValidationError, check, parse_ruleset, validate
from .knowledge import (
    ANALYZER_SYSTEM,
    DEFAULT_BUDGET,
    DEFAULT_WORST_K,
    PLANNER_SYSTEM,
    IterationResult,
    KnowledgeBase,
    record_iteration,
    render_analyzer_prompt,
    render_planner_prompt,
    summarize_history,
)
from .llm import ChatClient, Message
from .sim import ScenarioConfig, run_simulation

logger = logging.getLogger(__name__)

POLICIES = ("always-replace", "accept-if-better")
DEFAULT_MAX_PARSE_RETRIES = 3


class PlanFailed(Exception):
    """No valid ruleset after all retries; carries every diagnostic seen."""

    def __init__(self, diagnostics: Sequence[str], llm_calls: int = 0):
        self.diagnostics = list(diagnostics)
        self.llm_calls = llm_calls
        super().__init__("planning failed: " + " | ".join(self.diagnostics))


@dataclass(frozen=True)
class Diagnosis:
    text: str
    issues: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty diagnosis")


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_ISSUE_RE = re.compile(r"^\s*(?:[-*]|\d+[.)])\s+(.*\S)")


def extract_code_block(text: str) -> str:
    """Contents of the last fenced block, or the whole text when there is none."""
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        return text.strip()
    return blocks[-1].strip()


def extract_issues(text: str) -> tuple[str, ...]:
    return tuple(m.group(1) for line in text.splitlines() if (m := _ISSUE_RE.match(line)))


def parse_candidate(text: str, catalog: Sequence[str]) -> RuleSet:
    """Parse and validate DSL text; the error message is what gets fed back on retry."""
    return check(parse_ruleset(text), catalog)


def _candidate_error(exc: Exception) -> str:
    if isinstance(exc, RuleValidationError):
        return "\n".join(str(d) for d in exc.diagnostics)
    return str(exc)


def analyze(kb: KnowledgeBase, client: ChatClient, k: int = DEFAULT_WORST_K, budget: int = DEFAULT_BUDGET) -> Diagnosis:
    kb.require_complete()
    prompt = render_analyzer_prompt(kb, summarize_history(kb, k, budget))
    request = client.request([Message("system", ANALYZER_SYSTEM), Message("user", prompt)])
    response = client.chat(request)
    if not response.content.strip():
        raise ValueError("empty diagnosis")
    return Diagnosis(response.content, extract_issues(response.content))


@dataclass(frozen=True)
class Plan:
    ruleset: RuleSet
    text: str
    llm_calls: int


def plan(
    kb: KnowledgeBase,
    diagnosis: Diagnosis,
    client: ChatClient,
    max_parse_retries: int = DEFAULT_MAX_PARSE_RETRIES,
    k: int = DEFAULT_WORST_K,
    budget: int = DEFAULT_BUDGET,
) -> Plan:
    """Ask for a ruleset and retry with the exact parser/validator message on failure."""
    kb.require_complete()
    prompt = render_planner_prompt(kb, summarize_history(kb, k, budget), diagnosis.text)
    messages = [Message("system", PLANNER_SYSTEM), Message("user", prompt)]
    diagnostics = []
    for attempt in range(max_parse_retries + 1):
        response = client.chat(client.request(messages))
        text = extract_code_block(response.content)
        try:
            ruleset = parse_candidate(text, kb.variable_names)
        except (DSLSyntaxError, RuleValidationError) as exc:
            error = _candidate_error(exc)
            diagnostics.append(error)
            logger.info("planner attempt %d rejected: %s", attempt + 1, error)
            messages = messages + [
                Message("assistant", response.content),
                Message(
                    "user",
                    "The ruleset was rejected:\n"
                    f"{error}\n"
                    "Reply with exactly one fenced code block containing the complete corrected ruleset.",
                ),
            ]
            continue
        return Plan(ruleset, text, attempt + 1)
    raise PlanFailed(diagnostics, llm_calls=max_parse_retries + 1)


@dataclass(frozen=True)
class Proposal:
    text: str
    ruleset: RuleSet
    llm_calls: int = 0


class LLMOptimizer:
    kind = "llm"

    def __init__(self, client: ChatClient, max_parse_retries: int = DEFAULT_MAX_PARSE_RETRIES,
                 k: int = DEFAULT_WORST_K, budget: int = DEFAULT_BUDGET):
        if max_parse_retries < 0:
            raise ValueError("max_parse_retries must be >= 0")
        self.client = client
        self.max_parse_retries = max_parse_retries
        self.k = k
        self.budget = budget
        self.last_diagnosis: Optional[Diagnosis] = None

    def propose(self, run: "OptimizationRun") -> Proposal:
        diagnosis = analyze(run.kb, self.client, self.k, self.budget)
        self.last_diagnosis = diagnosis
        try:
            p = plan(run.kb, diagnosis, self.client, self.max_parse_retries, self.k, self.budget)
        except PlanFailed as exc:
            raise PlanFailed(exc.diagnostics, exc.llm_calls + 1) from None
        return Proposal(p.text, p.ruleset, p.llm_calls + 1)

    def feedback(self, accepted: bool) -> None:
        pass


class ScriptedOptimizer:
    """Proposes the given ruleset texts in order, cycling when it runs out."""

    kind = "scripted"

    def __init__(self, texts: Sequence[str]):
        if not texts:
            raise ValueError("scripted optimizer needs at least one ruleset")
        self.texts = list(texts)
        self.position = 0

    @classmethod
    def from_files(cls, paths: Sequence[str | Path]) -> "ScriptedOptimizer":
        return cls([Path(p).read_text(encoding="utf-8") for p in paths])

    def propose(self, run: "OptimizationRun") -> Proposal:
        text = self.texts[self.position % len(self.texts)]
        self.position += 1
        try:
            ruleset = parse_candidate(text, run.kb.variable_names)
        except (DSLSyntaxError, RuleValidationError) as exc:
            raise PlanFailed([_candidate_error(exc)]) from None
        return Proposal(text, ruleset)

    def feedback(self, accepted: bool) -> None:
        pass


# -- hill climbing ----------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    name: str
    low: float
    high: float
    initial: float

    def __post_init__(self):
        if not self.low <= self.initial <= self.high:
            raise ValueError(f"slot {self.name}: need min <= initial <= max")


@dataclass(frozen=True)
class RuleTemplate:
    """A ``.rules`` text with ``${slot}`` placeholders plus per-slot bounds."""

    text: str
    slots: tuple[Slot, ...]

    def __post_init__(self):
        names = {s.name for s in self.slots}
        used = {m.group("braced") or m.group("named")
                for m in string.Template.pattern.finditer(self.text) if m.group("braced") or m.group("named")}
        if used != names:
            raise ValueError(f"template placeholders {sorted(used)} do not match bounds {sorted(names)}")

    @property
    def initial_params(self) -> dict[str, float]:
        return {s.name: s.initial for s in self.slots}

    def instantiate(self, params: dict[str, float]) -> str:
        return string.Template(self.text).substitute({k: repr(float(v)) for k, v in params.items()})


def parse_bounds(values: dict[str, str]) -> tuple[Slot, ...]:
    slots = []
    for name, raw in values.items():
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 3:
            raise ValueError(f"bounds for {name}: expected 'min, max, initial', got {raw!r}")
        low, high, initial = map(float, parts)
        slots.append(Slot(name, low, high, initial))
    return tuple(slots)


def load_template(template_path: str | Path, bounds_path: str | Path) -> RuleTemplate:
    text = Path(template_path).read_text(encoding="utf-8")
    return RuleTemplate(text, parse_bounds(read_kv(bounds_path)))


def hill_climb_propose(
    template: RuleTemplate,
    params: dict[str, float],
    rng: np.random.Generator,
    step_fraction: float = 0.1,
) -> tuple[dict[str, float], RuleSet]:
    """Perturb one uniformly chosen slot by a Gaussian step and instantiate.

    The step's standard deviation is ``step_fraction`` of the slot's range;
    the result is clamped to the slot bounds.
    """
    slot = template.slots[int(rng.integers(len(template.slots)))]
    step = rng.normal(0.0, step_fraction * (slot.high - slot.low))
    new = dict(params)
    new[slot.name] = min(max(params[slot.name] + step, slot.low), slot.high)
    return new, parse_ruleset(template.instantiate(new))


class HillClimbOptimizer:
    kind = "hillclimb"

    def __init__(self, template: RuleTemplate, seed: int, step_fraction: float = 0.1):
        self.template = template
        self.rng = np.random.default_rng(seed)
        self.step_fraction = step_fraction
        self.current = template.initial_params
        self._pending: Optional[dict[str, float]] = None

    @property
    def initial_text(self) -> str:
        return self.template.instantiate(self.template.initial_params)

    def propose(self, run: "OptimizationRun") -> Proposal:
        params, _ = hill_climb_propose(self.template, self.current, self.rng, self.step_fraction)
        self._pending = params
        text = self.template.instantiate(params)
        try:
            ruleset = parse_candidate(text, run.kb.variable_names)
        except (DSLSyntaxError, RuleValidationError) as exc:
            raise PlanFailed([_candidate_error(exc)]) from None
        return Proposal(text, ruleset)

    def feedback(self, accepted: bool) -> None:
        if accepted and self._pending is not None:
            self.current = self._pending
        self._pending = None


# -- the loop ---------------------------------------------------------------

class OptimizationRun:
    """State of one optimization run: knowledge base, current and best rulesets.

    Construction simulates the starting ruleset and records it as iteration 0.
    Every later iteration re-simulates the full trace from scratch.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        trace,
        initial_rules: str,
        policy: str = "always-replace",
        kb: Optional[KnowledgeBase] = None,
    ):
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
        self.scenario = scenario
        self.trace = trace
        self.policy = policy
        self.kb = kb if kb is not None else KnowledgeBase.bundled(scenario.max_servers)
        ruleset = parse_candidate(initial_rules, self.kb.variable_names)

        start = time.perf_counter()
        sim = run_simulation(scenario, ruleset, trace)
        result = IterationResult(
            iteration=0,
            ruleset_text=initial_rules,
            parse_ok=True,
            total_utility=sim.total_utility,
            eval_error_count=sim.eval_error_count,
            accepted=True,
            best_utility=sim.total_utility,
            duration=time.perf_counter() - start,
        )
        self.current_text = initial_rules
        self.current_ruleset = ruleset
        self.current_utility = sim.total_utility
        self.best_text = initial_rules
        self.best_utility = sim.total_utility
        self.best_iteration = 0
        self.last_records = sim.records
        self.kb.current_rules = initial_rules
        record_iteration(self.kb, result, sim.records)
        self.results: list[IterationResult] = [result]

    @property
    def initial_utility(self) -> float:
        return self.results[0].total_utility

    def iterate(self, optimizer) -> IterationResult:
        """One analyze -> plan -> simulate -> record cycle."""
        index = self.results[-1].iteration + 1
        start = time.perf_counter()
        try:
            proposal = optimizer.propose(self)
            # never simulate a ruleset that has not passed validation here
            problems = validate(proposal.ruleset, self.kb.variable_names)
            if problems:
                raise PlanFailed([str(d) for d in problems], proposal.llm_calls)
        except PlanFailed as exc:
            optimizer.feedback(False)
            result = IterationResult(
                iteration=index,
                ruleset_text=self.current_text,
                parse_ok=False,
                total_utility=None,
                accepted=False,
                best_utility=self.best_utility,
                llm_calls=exc.llm_calls,
                diagnostics=tuple(exc.diagnostics),
                duration=time.perf_counter() - start,
            )
            record_iteration(self.kb, result)
            self.results.append(result)
            return result

        sim = run_simulation(self.scenario, proposal.ruleset, self.trace)
        utility = sim.total_utility
        if self.policy == "always-replace":
            accepted = True
        else:
            accepted = utility > self.current_utility
        if accepted:
            self.current_text = proposal.text
            self.current_ruleset = proposal.ruleset
            self.current_utility = utility
            self.kb.current_rules = proposal.text
        if utility > self.best_utility:
            self.best_utility = utility
            self.best_text = proposal.text
            self.best_iteration = index
        optimizer.feedback(accepted)
        self.last_records = sim.records
        result = IterationResult(
            iteration=index,
            ruleset_text=proposal.text,
            parse_ok=True,
            total_utility=utility,
            eval_error_count=sim.eval_error_count,
            accepted=accepted,
            best_utility=self.best_utility,
            llm_calls=proposal.llm_calls,
            duration=time.perf_counter() - start,
        )
        # the history shown to the analyzer always belongs to the current ruleset
        record_iteration(self.kb, result, sim.records if accepted else None)
        self.results.append(result)
        return result

    def run(self, optimizer, iterations: int) -> list[IterationResult]:
        return [self.iterate(optimizer) for _ in range(iterations)]
