from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptrules import resources
from adaptrules.dsl import DSLSyntaxError, parse_ruleset
from adaptrules.harness import resolve_scenario, resolve_trace
from adaptrules.llm import ChatClient, ChatResponse, LLMConfig
from adaptrules.optimizer import (
    Diagnosis,
    HillClimbOptimizer,
    LLMOptimizer,
    OptimizationRun,
    PlanFailed,
    RuleTemplate,
    ScriptedOptimizer,
    Slot,
    analyze,
    extract_code_block,
    extract_issues,
    hill_climb_propose,
    load_template,
    plan,
)

FIXTURES = Path(__file__).parent / "fixtures"
CASSETTES = FIXTURES / "cassettes"
RULES = FIXTURES / "rules"


def read_rules(name):
    return (RULES / name).read_text()


def replay_client(name):
    return ChatClient(LLMConfig(mode="replay", cassette=str(CASSETTES / name), strict=True))


@pytest.fixture(scope="module")
def world():
    scenario, base = resolve_scenario(None)
    return scenario, resolve_trace(scenario, base)


def new_run(world, policy="always-replace", initial=None):
    scenario, trace = world
    return OptimizationRun(scenario, trace, initial or resources.default_rules_text(), policy)


@pytest.fixture(scope="module")
def template():
    data = resources.data_path("rules")
    return load_template(data.joinpath("baseline.rules.tmpl"), data.joinpath("baseline.bounds"))


# -- code extraction --------------------------------------------------------

def test_single_fence():
    assert extract_code_block("here:\n```\nwhen a > 1 then add_servers(1);\n```") == "when a > 1 then add_servers(1);"


def test_last_fence_wins():
    text = "```dsl\nfirst\n```\nthen\n```\nsecond\n```\n"
    assert extract_code_block(text) == "second"


def test_no_fence_returns_text():
    assert extract_code_block("when a > 1 then add_servers(1);") == "when a > 1 then add_servers(1);"


def test_extract_issues():
    assert extract_issues("Intro\n- one\n* two\n3. three\nno") == ("one", "two", "three")


def test_empty_diagnosis_rejected():
    with pytest.raises(ValueError, match="empty diagnosis"):
        Diagnosis("  ")


# -- analyze / plan against a stub client ------------------------------------

class StubClient:
    """Answers chat requests from a list and remembers every request."""

    def __init__(self, *answers):
        self.answers = list(answers)
        self.requests = []

    def request(self, messages):
        return list(messages)

    def chat(self, request):
        self.requests.append(request)
        return ChatResponse(self.answers.pop(0))


def test_analyze_returns_text_and_issues(world):
    run = new_run(world)
    d = analyze(run.kb, StubClient("- scale-out is slow\n- dimming too early"))
    assert d.issues == ("scale-out is slow", "dimming too early")


def test_analyze_rejects_empty_response(world):
    run = new_run(world)
    with pytest.raises(ValueError, match="empty diagnosis"):
        analyze(run.kb, StubClient("   "))


def test_plan_feeds_back_exact_parser_message(world):
    run = new_run(world)
    bad = "```\nwhen then;\n```"
    client = StubClient(bad, "```\n" + read_rules("better.rules") + "```")
    p = plan(run.kb, Diagnosis("- x"), client, max_parse_retries=2)
    assert p.llm_calls == 2
    assert p.ruleset == parse_ruleset(read_rules("better.rules"))
    with pytest.raises(DSLSyntaxError) as info:
        parse_ruleset("when then;")
    retry = client.requests[1]
    assert retry[-2].role == "assistant" and retry[-2].content == bad
    assert str(info.value) in retry[-1].content


def test_plan_feeds_back_validation_messages(world):
    run = new_run(world)
    client = StubClient("when respons_time > 1 then add_servers(1);", read_rules("noop.rules"))
    plan(run.kb, Diagnosis("- x"), client)
    assert "unknown variable respons_time" in client.requests[1][-1].content


def test_plan_exhaustion(world):
    run = new_run(world)
    client = StubClient("nope", "still nope", "no")
    with pytest.raises(PlanFailed) as info:
        plan(run.kb, Diagnosis("- x"), client, max_parse_retries=2)
    assert info.value.llm_calls == 3
    assert len(info.value.diagnostics) == 3


# -- cassette replay --------------------------------------------------------

def test_replayed_analysis_matches_cassette(world):
    run = new_run(world)
    client = replay_client("retry_then_valid.yaml")
    d = analyze(run.kb, client)
    assert d.text == client.cassette.entries[0].response["content"]


def test_replayed_plan_retry_counts_calls(world):
    run = new_run(world)
    client = replay_client("retry_then_valid.yaml")
    d = analyze(run.kb, client)
    p = plan(run.kb, d, client)
    assert p.llm_calls == 2
    assert p.ruleset == parse_ruleset(read_rules("better.rules"))


def test_identical_prompts_replay_identically(world):
    a = analyze(new_run(world).kb, replay_client("retry_then_valid.yaml"))
    b = analyze(new_run(world).kb, replay_client("retry_then_valid.yaml"))
    assert a == b


def replay_results(world, cassette, iterations, max_parse_retries=3):
    run = new_run(world)
    opt = LLMOptimizer(replay_client(cassette), max_parse_retries=max_parse_retries)
    return run, run.run(opt, iterations)


def test_llm_loop_from_cassette(world):
    run, results = replay_results(world, "retry_then_valid.yaml", 2)
    assert [(r.iteration, r.parse_ok, r.llm_calls) for r in results] == [(1, True, 3), (2, True, 2)]
    assert results[0].total_utility == pytest.approx(617506.7202777792, rel=1e-12)
    assert run.best_iteration == 1


def test_llm_loop_is_deterministic(world):
    assert replay_results(world, "retry_then_valid.yaml", 2)[1] == replay_results(world, "retry_then_valid.yaml", 2)[1]


def test_failed_plan_keeps_current_rules(world):
    run, (result,) = replay_results(world, "plan_failed.yaml", 1, max_parse_retries=2)
    assert not result.parse_ok and result.total_utility is None
    assert result.llm_calls == 4
    assert len(result.diagnostics) == 3
    assert run.current_text == resources.default_rules_text()
    assert result.ruleset_text == resources.default_rules_text()


# -- policies ---------------------------------------------------------------

@pytest.mark.parametrize("policy", ["always-replace", "accept-if-better"])
def test_better_ruleset_accepted_under_both_policies(world, policy):
    run = new_run(world, policy)
    (result,) = run.run(ScriptedOptimizer([read_rules("better.rules")]), 1)
    assert result.accepted and run.current_text == read_rules("better.rules")
    assert run.best_iteration == 1


@pytest.mark.parametrize("policy, replaced", [("always-replace", True), ("accept-if-better", False)])
def test_worse_ruleset(world, policy, replaced):
    run = new_run(world, policy)
    before = run.best_utility
    (result,) = run.run(ScriptedOptimizer([read_rules("noop.rules")]), 1)
    assert result.total_utility < before
    assert result.accepted is replaced
    assert (run.current_text == read_rules("noop.rules")) is replaced
    assert run.best_utility == before and run.best_iteration == 0
    assert result.best_utility == before


def test_history_follows_current_rules(world):
    run = new_run(world, "accept-if-better")
    initial = list(run.kb.interval_history)
    run.run(ScriptedOptimizer([read_rules("noop.rules")]), 1)
    assert run.kb.interval_history == initial
    run = new_run(world, "always-replace")
    run.run(ScriptedOptimizer([read_rules("noop.rules")]), 1)
    assert run.kb.interval_history != initial


def test_failed_iteration_does_not_stop_the_run(world):
    run = new_run(world)
    opt = ScriptedOptimizer([read_rules("broken.rules"), read_rules("better.rules")])
    first, second = run.run(opt, 2)
    assert not first.parse_ok and first.total_utility is None and "line 2" in first.diagnostics[0]
    assert second.parse_ok and second.iteration == 2
    assert [r.iteration for r in run.kb.iteration_history] == [0, 1, 2]


def test_scripted_optimizer_cycles(world):
    run = new_run(world)
    results = run.run(ScriptedOptimizer([read_rules("noop.rules"), read_rules("better.rules")]), 4)
    assert [r.total_utility for r in results][:2] == [r.total_utility for r in results][2:]


# -- hill climbing ----------------------------------------------------------

def test_template_placeholders_must_match_bounds():
    with pytest.raises(ValueError, match="do not match"):
        RuleTemplate("when servers > ${a} then add_servers(${b});", (Slot("a", 0, 1, 0.5),))


def test_default_rules_are_template_at_initial_point(template):
    assert parse_ruleset(template.instantiate(template.initial_params)) == parse_ruleset(resources.default_rules_text())


def test_proposal_is_deterministic(template):
    a = hill_climb_propose(template, template.initial_params, np.random.default_rng(7))
    b = hill_climb_propose(template, template.initial_params, np.random.default_rng(7))
    assert a == b


def test_zero_step_keeps_parameters(template):
    params, ruleset = hill_climb_propose(template, template.initial_params, np.random.default_rng(1), step_fraction=0.0)
    assert params == template.initial_params
    assert ruleset == parse_ruleset(resources.default_rules_text())


def test_thousand_proposals_cover_every_slot_within_bounds(template):
    rng = np.random.default_rng(2024)
    params = template.initial_params
    touched = set()
    for _ in range(1000):
        new, _ = hill_climb_propose(template, params, rng, step_fraction=0.3)
        touched |= {k for k in new if new[k] != params[k]}
        for slot in template.slots:
            assert slot.low <= new[slot.name] <= slot.high
        params = new
    assert touched == {s.name for s in template.slots}


@given(seed=st.integers(0, 2**32 - 1), fraction=st.floats(0, 5))
def test_proposals_stay_in_bounds(template, seed, fraction):
    rng = np.random.default_rng(seed)
    new, _ = hill_climb_propose(template, template.initial_params, rng, fraction)
    assert sum(new[k] != v for k, v in template.initial_params.items()) <= 1
    for slot in template.slots:
        assert slot.low <= new[slot.name] <= slot.high


def test_hill_climb_moves_only_on_acceptance(world, template):
    opt = HillClimbOptimizer(template, seed=3)
    run = new_run(world, "accept-if-better", initial=opt.initial_text)
    for _ in range(5):
        before = opt.current
        r = run.iterate(opt)
        assert (opt.current != before) is r.accepted
        assert (run.current_text == r.ruleset_text) is r.accepted
    assert run.current_utility == max(r.total_utility for r in run.results if r.accepted)
