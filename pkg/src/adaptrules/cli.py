"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import resources
from .config import ConfigError, read_kv
from .dsl import DSLSyntaxError, RuleValidationError, parse_ruleset, validate
from .harness import (
    ExperimentConfig,
    build_optimizer,
    load_experiment_config,
    resolve_scenario,
    resolve_trace,
    run_experiment,
)
from .knowledge import save_knowledge
from .llm import LLM_KEYS, LLMConfig, LLMError
from .optimizer import POLICIES, OptimizationRun, parse_candidate
from .sim import OBSERVABLES, records_to_csv, run_simulation
from .workload import emit_trace_csv, generate_trace, parse_trace_params

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_rules(path: str):
    text = Path(path).read_text(encoding="utf-8")
    return parse_candidate(text, OBSERVABLES)


def cmd_simulate(args) -> int:
    scenario, base = resolve_scenario(args.scenario)
    trace = resolve_trace(scenario, base, args.trace)
    ruleset = _read_rules(args.rules)
    return _simulate_and_write(scenario, ruleset, trace, Path(args.out))


def cmd_baseline(args) -> int:
    scenario, base = resolve_scenario(args.scenario)
    trace = resolve_trace(scenario, base, args.trace)
    ruleset = parse_candidate(resources.default_rules_text(), OBSERVABLES)
    out = Path(args.out)
    code = _simulate_and_write(scenario, ruleset, trace, out)
    (out / "default.rules").write_text(resources.default_rules_text(), encoding="utf-8")
    return code


def _simulate_and_write(scenario, ruleset, trace, out: Path) -> int:
    result = run_simulation(scenario, ruleset, trace)
    out.mkdir(parents=True, exist_ok=True)
    (out / "simulation.csv").write_text(records_to_csv(result.records), encoding="utf-8")
    print(f"total utility: {result.total_utility:.2f}")
    print(f"intervals: {len(result.records)}, violations: {result.violations}, evaluation errors: {result.eval_error_count}")
    print(f"wrote {out / 'simulation.csv'}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    llm_values = read_kv(args.llm_config, LLM_KEYS) if args.llm_config else {}
    llm = LLMConfig.from_mapping(llm_values)
    if args.mode:
        llm = replace(llm, mode=args.mode)
    out = Path(args.out)
    if args.cassette:
        llm = replace(llm, cassette=args.cassette)
    elif llm.mode == "record":
        llm = replace(llm, cassette=str(out / "cassette.yaml"))
    if args.optimizer == "scripted" and not args.script:
        raise UsageError("--optimizer scripted needs at least one --script FILE")
    config = ExperimentConfig(
        scenario=args.scenario,
        trace=args.trace,
        optimizer=args.optimizer,
        runs=1,
        iterations=args.iterations,
        seeds=(args.seed,),
        policy=args.policy,
        max_parse_retries=args.max_parse_retries,
        scripts=tuple(args.script or ()),
        template=args.template,
        bounds=args.bounds,
        initial_rules=args.initial_rules,
        llm=llm,
    )
    scenario, base = resolve_scenario(config.scenario)
    trace = resolve_trace(scenario, base, config.trace)
    optimizer, initial = build_optimizer(config, args.seed)
    run = OptimizationRun(scenario, trace, initial, config.policy)
    print(f"iteration 0: utility {run.initial_utility:.2f} (starting rules)")
    for _ in range(args.iterations):
        r = run.iterate(optimizer)
        status = f"utility {r.total_utility:.2f}" if r.parse_ok else "no valid ruleset"
        print(f"iteration {r.iteration}: {status}, accepted={r.accepted}, best {r.best_utility:.2f}, llm_calls={r.llm_calls}")
        save_knowledge(run.kb, out / "knowledge")
    (out / "best.rules").write_text(run.best_text, encoding="utf-8")
    (out / "current.rules").write_text(run.current_text, encoding="utf-8")
    print(f"best utility {run.best_utility:.2f} at iteration {run.best_iteration}; wrote {out / 'best.rules'}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_experiment_config(args.config)
    summary = run_experiment(config, args.out, jobs=args.jobs)
    print(f"{summary.runs} runs x {summary.iterations} iterations, {summary.failed_iterations} gaps, "
          f"{len(summary.failed_runs)} failed runs")
    if summary.pooled_fit:
        print(f"pooled trend: slope {summary.pooled_fit[0]:.3f}, intercept {summary.pooled_fit[1]:.3f}")
    if summary.best_utility is not None:
        print(f"best utility {summary.best_utility:.2f} (run {summary.best_run}, iteration {summary.best_iteration})")
    print(f"wrote results to {args.out}")
    return EXIT_RUNTIME if len(summary.failed_runs) == summary.runs else EXIT_OK


def cmd_trace_gen(args) -> int:
    path = Path(args.params)
    params = parse_trace_params(path.read_text(encoding="utf-8"), str(path))
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    trace = generate_trace(params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(emit_trace_csv(trace), encoding="utf-8")
    print(f"wrote {len(trace)} intervals to {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    text = Path(args.rules).read_text(encoding="utf-8")
    try:
        ruleset = parse_ruleset(text)
    except DSLSyntaxError as exc:
        print(f"{args.rules}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    diagnostics = validate(ruleset, OBSERVABLES)
    for d in diagnostics:
        print(f"{args.rules}: {d}", file=sys.stderr)
    if diagnostics:
        return EXIT_RUNTIME
    print(f"{args.rules}: ok ({len(ruleset.defs)} definitions, {len(ruleset.rules)} rules)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptrules", description="Design and optimize adaptation rules for a simulated web tier.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run one ruleset over a trace")
    s.add_argument("--scenario", help="scenario file (default: bundled)")
    s.add_argument("--rules", required=True)
    s.add_argument("--trace", help="trace CSV or generator params (default: the scenario's trace)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("baseline", help="simulate the bundled default.rules")
    s.add_argument("--scenario")
    s.add_argument("--trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("optimize", help="one optimization run")
    s.add_argument("--scenario")
    s.add_argument("--trace")
    s.add_argument("--optimizer", choices=("llm", "scripted", "hillclimb"), required=True)
    s.add_argument("--iterations", type=int, default=10)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--policy", choices=POLICIES, default="always-replace")
    s.add_argument("--out", required=True)
    s.add_argument("--initial-rules", help="starting ruleset (default: bundled default.rules)")
    s.add_argument("--script", action="append", help="ruleset file for the scripted optimizer (repeatable)")
    s.add_argument("--template", help="hill-climb template (.rules with ${slot} placeholders)")
    s.add_argument("--bounds", help="hill-climb bounds file: slot = min, max, initial")
    s.add_argument("--llm-config", help="key = value file with llm.* settings")
    s.add_argument("--mode", choices=("live", "record", "replay"))
    s.add_argument("--cassette")
    s.add_argument("--max-parse-retries", type=int, default=3)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("experiment", help="N runs x M iterations with regression and chart")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("trace", help="workload trace tools")
    tsub = s.add_subparsers(dest="trace_command", required=True, parser_class=_Parser)
    g = tsub.add_parser("gen", help="generate a synthetic trace CSV")
    g.add_argument("--params", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_trace_gen)

    s = sub.add_parser("check", help="parse and validate a ruleset file")
    s.add_argument("--rules", required=True)
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adaptrules: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DSLSyntaxError, RuleValidationError, FileNotFoundError, LLMError, ValueError, OSError) as exc:
        print(f"adaptrules: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
