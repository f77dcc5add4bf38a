import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awf.equivalence import hash_workflow
from awf.factoring import motifs
from awf.kb import AccuracySample, ExecutionRecord, register_workflow
from awf.model import load_workflow, validate
from awf.policy import (
    ALTERNATE,
    SURROGATE,
    AdjudicationRule,
    CostFunction,
    PlanSubstitution,
    PolicyError,
    SubstitutionPlan,
    accuracy_agent,
    apply_plan,
    baseline_plan,
    evaluate_plan,
    objective_values,
    performance_agent,
    prior_adjudicate,
    run_agents,
    superintend,
)
from awf.runtime import SurrogateBinding
from awf.substitution import Patch

from conftest import COMPOSITION

RUNTIME = CostFunction({"runtime": 1.0})


def record_timings(kb, wf, seconds):
    """Pretend every node of ``wf`` ran, taking ``seconds[node]`` (default 1s)."""
    for name, h in hash_workflow(wf, algorithm=kb.algorithm).items():
        s = seconds.get(name, 1.0) if isinstance(seconds, dict) else seconds
        kb.record_execution(ExecutionRecord(h.digest, wf.name, name, 0.0, s, 0, wall_seconds=s))


def seed(kb, binding, errors):
    for e in errors:
        kb.add_sample(AccuracySample(binding, "p", "s", e))


@pytest.fixture
def host():
    return load_workflow(COMPOSITION / "e1a.json")


@pytest.fixture
def blocks(host):
    a, b = motifs(host)[0]
    return tuple(a.members), tuple(b.members)


def alt(target, seconds, ref="x", kind=ALTERNATE, cores=1.0):
    return PlanSubstitution(tuple(target), kind, ref, seconds, cores)


# --- adjudication -------------------------------------------------------------------


def test_no_samples_rejected(kb):
    d = prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.05))
    assert not d and d.reason.startswith("min-samples")


def test_enough_good_samples_approved(kb):
    seed(kb, "s", [0.01] * 20)
    assert prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.05))


def test_statistic_selection(kb):
    errors = [0.6 / 19] * 19 + [0.2]
    seed(kb, "s", errors)
    stats = kb.accuracy_stats("s")
    assert stats.count == 20 and stats.mean == pytest.approx(0.04) and stats.max == 0.2
    assert prior_adjudicate("s", kb, AdjudicationRule(10, "mean", 0.05))
    d = prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.05))
    assert not d and d.reason.startswith("tolerance")
    assert prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.05)) == d


def test_boundaries_inclusive(kb):
    seed(kb, "s", [0.05] * 10)
    assert prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.05))
    assert not prior_adjudicate("s", kb, AdjudicationRule(11, "max", 0.05))
    assert not prior_adjudicate("s", kb, AdjudicationRule(10, "max", 0.0499))


def test_rule_validation():
    with pytest.raises(PolicyError):
        AdjudicationRule(statistic="median")
    with pytest.raises(PolicyError):
        AdjudicationRule(tolerance=-1)


# --- cost function -------------------------------------------------------------------


def test_cost_function_validation(tmp_path):
    for bad in ({}, {"runtime": 0}, {"runtime": -1, "monetary": 2}, {"speed": 1}):
        with pytest.raises(PolicyError):
            CostFunction(bad)
    p = tmp_path / "w.json"
    p.write_text(json.dumps({"runtime": 2, "accuracy-risk": 1, "normalization": {"tolerance": 0.1, "unit-cost": 3}}))
    cf = CostFunction.load(p)
    assert cf.weight("runtime") == 2 and cf.weight("monetary") == 0
    assert cf.tolerance == 0.1 and cf.unit_cost == 3


def test_baseline_cost(kb, host):
    record_timings(kb, host, 2.0)
    assert evaluate_plan(baseline_plan(), host, kb, RUNTIME) == 1.0
    values = objective_values(baseline_plan(), host, kb, CostFunction({"monetary": 1.0}, unit_cost=0.5))
    cores = [float(n.resources.get("cores", 1)) for n in host.nodes]
    assert values["monetary"] == pytest.approx(sum(2.0 * c * 0.5 for c in cores))
    assert values["accuracy-risk"] == 0.0


def test_faster_alternate_cheaper(kb, host, blocks):
    _, b = blocks
    record_timings(kb, host, {n: 10 / 3 for n in b})
    plan = SubstitutionPlan("p", [alt(b, 2.0)])
    assert evaluate_plan(plan, host, kb, RUNTIME) < evaluate_plan(baseline_plan(), host, kb, RUNTIME)
    # A' block: 3 nodes x 1s; B: 10s -> 2s
    assert evaluate_plan(plan, host, kb, RUNTIME) == pytest.approx((3 + 2) / 13)


def test_inaccurate_surrogate_costs_more(kb, host, blocks):
    record_timings(kb, host, 1.0)
    seed(kb, "sur", [0.3] * 5)
    accuracy = CostFunction({"accuracy-risk": 1.0}, tolerance=0.05)
    plan = SubstitutionPlan("p", [alt(blocks[1], 0.1, "sur", SURROGATE)])
    assert evaluate_plan(plan, host, kb, accuracy) == 1.0
    assert evaluate_plan(baseline_plan(), host, kb, accuracy) == 0.0
    seed(kb, "good", [0.01] * 5)
    good = SubstitutionPlan("g", [alt(blocks[1], 0.1, "good", SURROGATE)])
    assert evaluate_plan(good, host, kb, accuracy) == pytest.approx(0.2)


def test_unmeasured_surrogate_pessimistic(kb, host, blocks):
    accuracy = CostFunction({"accuracy-risk": 1.0})
    plan = SubstitutionPlan("p", [alt(blocks[1], 0.1, "new", SURROGATE)])
    assert evaluate_plan(plan, host, kb, accuracy) == 1.0
    with pytest.raises(PolicyError):
        evaluate_plan(plan, host, kb, CostFunction({"accuracy-risk": 1.0}, accuracy_default=None))


def test_missing_timings_for_weighted_runtime(kb, host):
    with pytest.raises(PolicyError):
        evaluate_plan(baseline_plan(), host, kb, RUNTIME)
    assert evaluate_plan(baseline_plan(), host, kb, CostFunction({"accuracy-risk": 1})) == 0.0


def test_plan_disjointness():
    with pytest.raises(PolicyError):
        SubstitutionPlan("p", [alt(["a", "b"], 1), alt(["b"], 1)])
    plan = SubstitutionPlan("p", [alt(["a"], 1.5)], {"runtime": -1.0}, "performance")
    assert SubstitutionPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0, 5), st.floats(0, 5),
       st.sampled_from(["runtime", "accuracy-risk", "monetary"]))
def test_cost_monotone_in_weight(tmp_path_factory, t_sub, cores, w, extra, objective):
    from awf.kb import KnowledgeBase

    kb = KnowledgeBase.init(tmp_path_factory.mktemp("kb"))
    host = load_workflow(COMPOSITION / "e1a.json")
    record_timings(kb, host, 1.0)
    plan = SubstitutionPlan("p", [alt(motifs(host)[0][1].members, t_sub, cores=cores)])
    base = {"runtime": 1.0, "accuracy-risk": 1.0, "monetary": 1.0}
    low = CostFunction({**base, objective: w})
    high = CostFunction({**base, objective: w + extra})
    values = objective_values(plan, host, kb, low)
    assert high.weight(objective) * values[objective] >= low.weight(objective) * values[objective]
    assert evaluate_plan(plan, host, kb, high) >= evaluate_plan(plan, host, kb, low)
    kb.close()


# --- agents ---------------------------------------------------------------------------


def test_agents_empty_without_equivalents(kb, host):
    register_workflow(kb, host, host.source_path)
    record_timings(kb, host, 1.0)
    assert run_agents(host, kb, RUNTIME, bindings=[]) == []


def test_performance_agent_single_faster_alternate(kb, host, blocks):
    other = load_workflow(COMPOSITION / "e3a.json")
    for wf in (host, other):
        register_workflow(kb, wf, wf.source_path)
    record_timings(kb, host, 2.0)
    record_timings(kb, other, 0.5)
    [plan] = performance_agent(host, kb)
    [sub] = plan.substitutions
    assert sub.target == blocks[0] and sub.kind == ALTERNATE
    assert sub.expected_seconds == pytest.approx(1.5)
    assert plan.expected["runtime"] == pytest.approx(1.5 - 6.0)
    assert evaluate_plan(plan, host, kb, RUNTIME) < 1.0


def test_slower_alternate_not_proposed(kb, host):
    other = load_workflow(COMPOSITION / "e3a.json")
    for wf in (host, other):
        register_workflow(kb, wf, wf.source_path)
    record_timings(kb, host, 1.0)
    record_timings(kb, other, 5.0)
    assert performance_agent(host, kb) == []


def binding(bid, physical):
    return SurrogateBinding(bid, frozenset(physical), Patch(()))


def test_accuracy_agent_respects_rule(kb, host, blocks):
    rule = AdjudicationRule(10, "max", 0.05)
    few, many = binding("few", blocks[1]), binding("many", blocks[1])
    seed(kb, "few", [0.0] * 3)
    seed(kb, "many", [0.01] * 12)
    plans = accuracy_agent(host, kb, bindings=[few, many], rule=rule)
    assert [p.id for p in plans] == ["accuracy-many"]
    assert plans[0].expected["accuracy-risk"] == pytest.approx(0.01)


def test_custom_agent(kb, host):
    def lazy(wf, kb, objectives, **_):
        return [SubstitutionPlan("lazy")]

    assert [p.id for p in run_agents(host, kb, None, agents=[lazy])] == ["lazy"]


# --- superintendent -----------------------------------------------------------------


def test_single_cheaper_proposal_wins(kb, host, blocks):
    record_timings(kb, host, 1.0)
    p = SubstitutionPlan("p", [alt(blocks[1], 0.5)])
    assert superintend([p], host, kb, RUNTIME).id == "p"
    slow = SubstitutionPlan("slow", [alt(blocks[1], 50)])
    assert superintend([slow], host, kb, RUNTIME).id == "baseline"


def test_tie_goes_to_smallest_id(kb, host, blocks):
    record_timings(kb, host, 1.0)
    zeta = SubstitutionPlan("zeta", [alt(blocks[1], 0.5)])
    alpha = SubstitutionPlan("alpha", [alt(blocks[0], 0.5)])
    assert superintend([zeta, alpha], host, kb, RUNTIME).id == "alpha"
    with pytest.raises(PolicyError):
        superintend([], host, kb, RUNTIME, mode="vote")


def exhaustive(options_per_block, host, kb, costfn):
    """Cost of every per-block combination (None = keep original)."""
    costs = []
    for combo in itertools.product(*[[None, *opts] for opts in options_per_block]):
        subs = [s for s in combo if s is not None]
        costs.append(evaluate_plan(SubstitutionPlan("o", subs), host, kb, costfn))
    return costs


def test_mix_combines_blocks(kb, host, blocks):
    record_timings(kb, host, 1.0)
    a = SubstitutionPlan("a", [alt(blocks[0], 0.5)])
    b = SubstitutionPlan("b", [alt(blocks[1], 0.5)])
    pick = superintend([a, b], host, kb, RUNTIME)
    mix = superintend([a, b], host, kb, RUNTIME, mode="mix")
    assert mix.id == "mix" and len(mix.substitutions) == 2
    cost = evaluate_plan(mix, host, kb, RUNTIME)
    assert cost < evaluate_plan(pick, host, kb, RUNTIME)
    assert cost == pytest.approx(min(exhaustive([[a.substitutions[0]], [b.substitutions[0]]], host, kb, RUNTIME)))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 1), st.floats(0.1, 8)), min_size=1, max_size=5),
    st.dictionaries(st.sampled_from(["runtime", "monetary"]), st.floats(0.1, 3), min_size=1),
)
def test_superintendent_against_oracle(tmp_path_factory, specs, weights):
    from awf.kb import KnowledgeBase

    kb = KnowledgeBase.init(tmp_path_factory.mktemp("kb"))
    host = load_workflow(COMPOSITION / "e1a.json")
    record_timings(kb, host, 1.0)
    blocks = [b.members for b in motifs(host)[0]]
    costfn = CostFunction(weights)
    proposals = [SubstitutionPlan(f"p{i}", [alt(blocks[k], t)]) for i, (k, t) in enumerate(specs)]
    pick = superintend(proposals, host, kb, costfn)
    everyone = [baseline_plan(), *proposals]
    best = min(evaluate_plan(p, host, kb, costfn) for p in everyone)
    assert evaluate_plan(pick, host, kb, costfn) == best
    assert pick.id == min(p.id for p in everyone if evaluate_plan(p, host, kb, costfn) == best)
    mix = superintend(proposals, host, kb, costfn, mode="mix")
    per_block = [[p.substitutions[0] for p in proposals if p.substitutions[0].target == tuple(b)] for b in blocks]
    optimum = min(exhaustive(per_block, host, kb, costfn))
    mix_cost = evaluate_plan(mix, host, kb, costfn)
    assert mix_cost <= evaluate_plan(pick, host, kb, costfn)
    assert mix_cost == pytest.approx(optimum)
    kb.close()


def test_apply_plan_alternate(kb, host, blocks):
    other = load_workflow(COMPOSITION / "e3a.json")
    ids = register_workflow(kb, other, other.source_path)
    plan = SubstitutionPlan("p", [alt(blocks[0], 1.0, next(iter(ids.values())))])
    new, conflicts = apply_plan(host, plan, kb)
    assert conflicts == []
    validate(new)
    assert new.node("build").command.arguments[1] == "rdkit"
    assert new.node("setup").inputs == host.node("setup").inputs


def test_apply_plan_unknown_surrogate(kb, host, blocks):
    plan = SubstitutionPlan("p", [alt(blocks[1], 1.0, "ghost", SURROGATE)])
    with pytest.raises(PolicyError):
        apply_plan(host, plan, kb)
