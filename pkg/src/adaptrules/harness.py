"""Multi-run experiments: N independent optimization runs of M iterations each,
per-run and pooled least-squares trends, CSV output and an SVG chart."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from . import resources
from .config import ConfigError, as_float, as_int, read_kv
from .knowledge import DEFAULT_BUDGET, DEFAULT_WORST_K, IterationResult, KnowledgeBase, save_knowledge
from .llm import LLM_KEYS, ChatClient, LLMConfig
from .optimizer import (
    DEFAULT_MAX_PARSE_RETRIES,
    POLICIES,
    HillClimbOptimizer,
    LLMOptimizer,
    OptimizationRun,
    ScriptedOptimizer,
    load_template,
    parse_candidate,
)
from .sim import ScenarioConfig, load_scenario, records_to_csv, run_simulation
from .workload import Trace, load_trace

logger = logging.getLogger(__name__)

OPTIMIZERS = ("llm", "scripted", "hillclimb")


def linear_regression(points: Sequence[tuple[float, Optional[float]]]) -> tuple[float, float]:
    """Ordinary least squares fit ``y = slope * x + intercept``.

    Points whose y is None (failed iterations) are skipped.
    """
    pts = [(float(x), float(y)) for x, y in points if y is not None]
    if len(pts) < 2:
        raise ValueError("need at least two points for a regression")
    n = len(pts)
    mx = math.fsum(x for x, _ in pts) / n
    my = math.fsum(y for _, y in pts) / n
    sxx = math.fsum((x - mx) ** 2 for x, _ in pts)
    if sxx == 0:
        raise ValueError("degenerate regression: all x values are equal")
    sxy = math.fsum((x - mx) * (y - my) for x, y in pts)
    slope = sxy / sxx
    return slope, my - slope * mx


# -- configuration ----------------------------------------------------------

EXPERIMENT_KEYS = (
    "scenario", "trace", "trace_seed", "optimizer", "runs", "iterations", "seed", "seeds",
    "policy", "max_parse_retries", "scripts", "template", "bounds", "step_fraction",
    "initial_rules", "knowledge_k", "knowledge_budget", "cassette_dir",
) + LLM_KEYS


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Optional[str] = None  # None: bundled default scenario
    trace: Optional[str] = None  # None: the scenario's own trace reference
    trace_seed: str = "fixed"  # "fixed" or "run" (regenerate a synthetic trace with each run's seed)
    optimizer: str = "hillclimb"
    runs: int = 10
    iterations: int = 10
    seeds: tuple[int, ...] = ()
    policy: str = "always-replace"
    max_parse_retries: int = DEFAULT_MAX_PARSE_RETRIES
    scripts: tuple[str, ...] = ()
    template: Optional[str] = None
    bounds: Optional[str] = None
    step_fraction: float = 0.1
    initial_rules: Optional[str] = None
    knowledge_k: int = DEFAULT_WORST_K
    knowledge_budget: int = DEFAULT_BUDGET
    cassette_dir: Optional[str] = None
    llm: LLMConfig = field(default_factory=LLMConfig)

    def __post_init__(self):
        if self.runs < 1 or self.iterations < 1:
            raise ValueError("runs and iterations must be >= 1")
        if len(self.seeds) != self.runs:
            raise ValueError(f"need exactly {self.runs} seeds, got {len(self.seeds)}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.trace_seed not in ("fixed", "run"):
            raise ValueError("trace_seed must be 'fixed' or 'run'")
        if self.optimizer == "scripted" and not self.scripts:
            raise ValueError("scripted optimizer needs 'scripts'")
        if self.max_parse_retries < 0:
            raise ValueError("max_parse_retries must be >= 0")


def _path(base: Path, value: Optional[str]) -> Optional[str]:
    if value is None or value == "":
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    values = read_kv(path, EXPERIMENT_KEYS)
    base = path.parent
    runs = as_int(values, "runs", 10)
    if "seeds" in values:
        seeds = tuple(int(s) for s in values["seeds"].split(",") if s.strip())
    else:
        first = as_int(values, "seed", 42)
        seeds = tuple(range(first, first + runs))
    trace = values.get("trace")
    if trace is not None and ("/" in trace or "." in trace):
        trace = _path(base, trace)
    try:
        return ExperimentConfig(
            scenario=_path(base, values.get("scenario")),
            trace=trace,
            trace_seed=values.get("trace_seed", "fixed"),
            optimizer=values.get("optimizer", "hillclimb"),
            runs=runs,
            iterations=as_int(values, "iterations", 10),
            seeds=seeds,
            policy=values.get("policy", "always-replace"),
            max_parse_retries=as_int(values, "max_parse_retries", DEFAULT_MAX_PARSE_RETRIES),
            scripts=tuple(_path(base, s.strip()) for s in values.get("scripts", "").split(",") if s.strip()),
            template=_path(base, values.get("template")),
            bounds=_path(base, values.get("bounds")),
            step_fraction=as_float(values, "step_fraction", 0.1),
            initial_rules=_path(base, values.get("initial_rules")),
            knowledge_k=as_int(values, "knowledge_k", DEFAULT_WORST_K),
            knowledge_budget=as_int(values, "knowledge_budget", DEFAULT_BUDGET),
            cassette_dir=_path(base, values.get("cassette_dir")),
            llm=LLMConfig.from_mapping(values),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


# -- running ----------------------------------------------------------------

def resolve_scenario(path: Optional[str]) -> tuple[ScenarioConfig, Path]:
    p = Path(path) if path else resources.default_scenario_path()
    return load_scenario(p), p.parent


def resolve_trace(scenario: ScenarioConfig, base_dir: Path, trace: Optional[str] = None,
                  seed: Optional[int] = None) -> Trace:
    ref = trace if trace else scenario.trace_id
    return load_trace(resources.resolve_trace_ref(ref, base_dir), scenario.interval_seconds, seed)


def build_optimizer(config: ExperimentConfig, seed: int, cassette_path: Optional[Path] = None):
    """Return (optimizer, starting ruleset text) for one run."""
    initial = Path(config.initial_rules).read_text(encoding="utf-8") if config.initial_rules else resources.default_rules_text()
    if config.optimizer == "scripted":
        return ScriptedOptimizer.from_files(config.scripts), initial
    if config.optimizer == "hillclimb":
        template = load_template(
            config.template or resources.data_path("rules", "baseline.rules.tmpl"),
            config.bounds or resources.data_path("rules", "baseline.bounds"),
        )
        opt = HillClimbOptimizer(template, seed, config.step_fraction)
        return opt, (initial if config.initial_rules else opt.initial_text)
    llm = config.llm
    if cassette_path is not None:
        llm = replace(llm, cassette=str(cassette_path))
    client = ChatClient(llm)
    return LLMOptimizer(client, config.max_parse_retries, config.knowledge_k, config.knowledge_budget), initial


@dataclass
class RunOutcome:
    index: int
    seed: int
    results: list[IterationResult]
    best_utility: Optional[float] = None
    best_iteration: Optional[int] = None
    best_text: Optional[str] = None
    error: Optional[str] = None

    def utilities(self, iterations: int) -> list[Optional[float]]:
        by_iter = {r.iteration: r.total_utility for r in self.results}
        return [by_iter.get(i) for i in range(1, iterations + 1)]


def _cassette_path(config: ExperimentConfig, out_dir: Path, index: int) -> Optional[Path]:
    if config.optimizer != "llm":
        return None
    if config.llm.mode == "replay":
        if config.cassette_dir:
            return Path(config.cassette_dir) / f"run_{index}.yaml"
        return Path(config.llm.cassette) if config.llm.cassette else None
    if config.llm.mode == "record":
        return out_dir / "cassettes" / f"run_{index}.yaml"
    return None


def execute_run(config: ExperimentConfig, index: int, out_dir: Path) -> RunOutcome:
    """One independent run; failures are captured in the outcome, never raised."""
    seed = config.seeds[index]
    run_dir = out_dir / f"run_{index}"
    outcome = RunOutcome(index, seed, [])
    try:
        scenario, base_dir = resolve_scenario(config.scenario)
        trace = resolve_trace(scenario, base_dir, config.trace, seed if config.trace_seed == "run" else None)
        optimizer, initial = build_optimizer(config, seed, _cassette_path(config, out_dir, index))
        kb = KnowledgeBase.bundled(scenario.max_servers)
        run = OptimizationRun(scenario, trace, initial, config.policy, kb)
        outcome.results = run.results
        try:
            for _ in range(config.iterations):
                run.iterate(optimizer)
                save_knowledge(run.kb, run_dir / "knowledge")
        finally:
            if isinstance(optimizer, LLMOptimizer):
                optimizer.client.close()
        outcome.best_utility = run.best_utility
        outcome.best_iteration = run.best_iteration
        outcome.best_text = run.best_text
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "best.rules").write_text(run.best_text, encoding="utf-8")
        (run_dir / "best_simulation.csv").write_text(
            records_to_csv(_simulate_text(scenario, trace, run.best_text, kb)), encoding="utf-8"
        )
    except Exception as exc:  # a failed run must not abort the others
        logger.exception("run %d failed", index)
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def _simulate_text(scenario, trace, text, kb):
    return run_simulation(scenario, parse_candidate(text, kb.variable_names), trace).records


@dataclass
class ExperimentSummary:
    iterations: int
    seeds: list[int]
    utilities: list[list[Optional[float]]]  # runs x iterations, None marks a gap
    run_fits: list[Optional[tuple[float, float]]]
    pooled_fit: Optional[tuple[float, float]]
    best_utility: Optional[float]
    best_run: Optional[int]
    best_iteration: Optional[int]
    best_rules_file: Optional[str]
    failed_iterations: int
    failed_runs: list[int]

    @property
    def runs(self) -> int:
        return len(self.utilities)

    @property
    def mean_slope(self) -> Optional[float]:
        slopes = [f[0] for f in self.run_fits if f is not None]
        return math.fsum(slopes) / len(slopes) if slopes else None

    def points(self) -> list[tuple[int, Optional[float]]]:
        return [(i + 1, u) for row in self.utilities for i, u in enumerate(row)]


def _fit(points) -> Optional[tuple[float, float]]:
    try:
        return linear_regression(points)
    except ValueError:
        return None


def summarize_runs(outcomes: Sequence[RunOutcome], iterations: int) -> ExperimentSummary:
    utilities = [o.utilities(iterations) for o in outcomes]
    run_fits = [_fit([(i + 1, u) for i, u in enumerate(row)]) for row in utilities]
    pooled = _fit([(i + 1, u) for row in utilities for i, u in enumerate(row)])
    best = None
    for o in outcomes:
        if o.best_utility is not None and (best is None or o.best_utility > best.best_utility):
            best = o
    return ExperimentSummary(
        iterations=iterations,
        seeds=[o.seed for o in outcomes],
        utilities=utilities,
        run_fits=run_fits,
        pooled_fit=pooled,
        best_utility=best.best_utility if best else None,
        best_run=best.index if best else None,
        best_iteration=best.best_iteration if best else None,
        best_rules_file="best.rules" if best else None,
        failed_iterations=sum(u is None for row in utilities for u in row),
        failed_runs=[o.index for o in outcomes if o.error],
    )


def _num(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def run_csv(outcome: RunOutcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "utility", "parse_ok", "eval_errors", "llm_calls", "duration"])
    for r in outcome.results:
        w.writerow([r.iteration, _num(r.total_utility), int(r.parse_ok), r.eval_error_count, r.llm_calls, f"{r.duration:.6f}"])
    return buf.getvalue()


def summary_csv(summary: ExperimentSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", "iteration", "utility"])
    for run, (seed, row) in enumerate(zip(summary.seeds, summary.utilities)):
        for i, u in enumerate(row, start=1):
            w.writerow([run, seed, i, _num(u)])
    return buf.getvalue()


def regression_csv(summary: ExperimentSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scope", "slope", "intercept", "points"])
    for run, (fit, row) in enumerate(zip(summary.run_fits, summary.utilities)):
        n = sum(u is not None for u in row)
        w.writerow([f"run_{run}", _num(fit[0] if fit else None), _num(fit[1] if fit else None), n])
    n = sum(u is not None for _, u in summary.points())
    pf = summary.pooled_fit
    w.writerow(["pooled", _num(pf[0] if pf else None), _num(pf[1] if pf else None), n])
    w.writerow(["mean_of_runs", _num(summary.mean_slope), "", ""])
    return buf.getvalue()


def run_experiment(config: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> ExperimentSummary:
    """Run all N runs (in parallel up to ``jobs``) and write every artifact under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(config.runs)
    if jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, config.runs)) as pool:
            outcomes = list(pool.map(execute_run, [config] * config.runs, indices, [out_dir] * config.runs))
    else:
        outcomes = [execute_run(config, i, out_dir) for i in indices]

    summary = summarize_runs(outcomes, config.iterations)
    for o in outcomes:
        (out_dir / f"run_{o.index}.csv").write_text(run_csv(o), encoding="utf-8")
    (out_dir / "summary.csv").write_text(summary_csv(summary), encoding="utf-8")
    (out_dir / "regression.csv").write_text(regression_csv(summary), encoding="utf-8")
    if summary.best_run is not None:
        (out_dir / "best.rules").write_text(outcomes[summary.best_run].best_text, encoding="utf-8")
    if any(u is not None for _, u in summary.points()):
        (out_dir / "utility_vs_iteration.svg").write_text(emit_svg_chart(summary), encoding="utf-8")
    failures = [f"run {o.index}: {o.error}" for o in outcomes if o.error]
    if failures:
        (out_dir / "failures.txt").write_text("\n".join(failures) + "\n", encoding="utf-8")
    return summary


# -- chart ------------------------------------------------------------------

_W, _H = 720, 440
_LEFT, _RIGHT, _TOP, _BOTTOM = 90, 20, 40, 60
_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(t)
        t += step
    return ticks


def emit_svg_chart(summary: ExperimentSummary) -> str:
    """Utility versus iteration: one polyline per run plus the pooled OLS line."""
    pts = [(x, y) for x, y in summary.points() if y is not None]
    if not pts:
        raise ValueError("summary has no data to plot")
    m = summary.iterations
    x_lo, x_hi = (1.0, float(m)) if m > 1 else (0.5, 1.5)
    ys = [y for _, y in pts]
    fit = summary.pooled_fit
    if fit is not None:
        ys += [fit[0] * x_lo + fit[1], fit[0] * x_hi + fit[1]]
    y_lo, y_hi = min(ys), max(ys)
    pad = (y_hi - y_lo) * 0.05 or max(abs(y_hi) * 0.05, 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def sx(x: float) -> float:
        return _LEFT + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y: float) -> float:
        return _TOP + (y_hi - y) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" '
        f'data-x-min="{x_lo!r}" data-x-max="{x_hi!r}" data-y-min="{y_lo!r}" data-y-max="{y_hi!r}" '
        f'data-plot-left="{_LEFT}" data-plot-top="{_TOP}" data-plot-width="{pw}" data-plot-height="{ph}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">'
        f'Total utility per iteration ({summary.runs} runs)</text>',
        f'<g class="axes" stroke="black" stroke-width="1">'
        f'<line x1="{_LEFT}" y1="{_TOP + ph}" x2="{_LEFT + pw}" y2="{_TOP + ph}"/>'
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + ph}"/></g>',
    ]
    ticks = []
    for i in range(1, m + 1):
        x = sx(i)
        ticks.append(f'<line x1="{x:.2f}" y1="{_TOP + ph}" x2="{x:.2f}" y2="{_TOP + ph + 5}" stroke="black"/>'
                     f'<text x="{x:.2f}" y="{_TOP + ph + 18}" text-anchor="middle">{i}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        y = sy(t)
        ticks.append(f'<line x1="{_LEFT - 5}" y1="{y:.2f}" x2="{_LEFT}" y2="{y:.2f}" stroke="black"/>'
                     f'<text x="{_LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{t:g}</text>')
    out.append('<g class="ticks" font-family="sans-serif" font-size="11">' + "".join(ticks) + "</g>")
    out.append(
        f'<text class="x-label" x="{_LEFT + pw / 2:.1f}" y="{_H - 15}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">Iteration</text>'
    )
    out.append(
        f'<text class="y-label" x="20" y="{_TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13" transform="rotate(-90 20 {_TOP + ph / 2:.1f})">Total utility</text>'
    )
    for run, row in enumerate(summary.utilities):
        coords = " ".join(f"{sx(i):.2f},{sy(u):.2f}" for i, u in enumerate(row, start=1) if u is not None)
        if not coords:
            continue
        color = _COLORS[run % len(_COLORS)]
        out.append(f'<polyline class="run" data-run="{run}" fill="none" stroke="{color}" stroke-width="1.5" '
                   f'stroke-opacity="0.8" points="{coords}"><title>{escape(f"run {run}")}</title></polyline>')
    if fit is not None:
        slope, intercept = fit
        out.append(
            f'<line class="regression" data-slope="{slope!r}" data-intercept="{intercept!r}" '
            f'x1="{sx(x_lo):.4f}" y1="{sy(slope * x_lo + intercept):.4f}" '
            f'x2="{sx(x_hi):.4f}" y2="{sy(slope * x_hi + intercept):.4f}" '
            f'stroke="black" stroke-width="2" stroke-dasharray="6 4"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
