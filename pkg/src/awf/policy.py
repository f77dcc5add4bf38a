"""Choosing substitutions: cost function, proposal agents, superintendent,
and the prior rule that decides when a surrogate may replace its block."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .equivalence import SubGraph, WLConfig, hash_workflow, multiset_jaccard, wl_hash, wl_labels
from .factoring import motifs
from .kb import KnowledgeBase, UnknownEntryError
from .model import WorkflowDescription, WorkflowError, load_workflow, resolve_parameters

OBJECTIVES = ("runtime", "accuracy-risk", "monetary")
ALTERNATE, SURROGATE = "alternate", "surrogate"
BASELINE_ID = "baseline"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class CostFunction:
    """Weighted sum of normalized objectives; lower is better.

    runtime is divided by the baseline's predicted runtime, accuracy-risk
    is the canary error divided by ``tolerance`` (capped at 1), and
    monetary is core-seconds times ``unit_cost``.
    """

    weights: dict
    tolerance: float = 0.05
    unit_cost: float = 1.0
    accuracy_default: Optional[float] = 1.0

    def __post_init__(self):
        unknown = set(self.weights) - set(OBJECTIVES)
        if unknown:
            raise PolicyError(f"unknown objectives: {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise PolicyError("weights must be non-negative")
        if not any(w > 0 for w in self.weights.values()):
            raise PolicyError("at least one weight must be positive")
        if self.tolerance <= 0:
            raise PolicyError("tolerance must be positive")

    def weight(self, objective: str) -> float:
        return float(self.weights.get(objective, 0.0))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CostFunction":
        """Weights file: ``{"runtime": w, "accuracy-risk": w, "monetary": w}``,
        optionally with a ``normalization`` object holding ``tolerance``,
        ``unit-cost`` and ``accuracy-default``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        norm = data.pop("normalization", {})
        return cls(
            {k: float(v) for k, v in data.items()},
            tolerance=float(norm.get("tolerance", 0.05)),
            unit_cost=float(norm.get("unit-cost", 1.0)),
            accuracy_default=norm.get("accuracy-default", 1.0),
        )


@dataclass(frozen=True)
class PlanSubstitution:
    target: tuple              # node names of the replaced block
    kind: str                  # alternate | surrogate
    ref: str                   # KB entry id, or binding id for surrogates
    expected_seconds: Optional[float] = None
    cores: float = 1.0

    @property
    def nodes(self) -> frozenset:
        return frozenset(self.target)


@dataclass
class SubstitutionPlan:
    id: str
    substitutions: list = field(default_factory=list)
    expected: dict = field(default_factory=dict)     # objective -> signed delta
    agent: str = ""

    def __post_init__(self):
        seen: set = set()
        for s in self.substitutions:
            if s.nodes & seen:
                raise PolicyError(f"plan {self.id}: substitutions overlap on {sorted(s.nodes & seen)}")
            seen |= s.nodes

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "agent": self.agent,
            "expected": self.expected,
            "substitutions": [{**asdict(s), "target": list(s.target)} for s in self.substitutions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SubstitutionPlan":
        subs = [PlanSubstitution(**{**s, "target": tuple(s["target"])}) for s in data.get("substitutions", [])]
        return cls(data["id"], subs, dict(data.get("expected", {})), data.get("agent", ""))


def baseline_plan() -> SubstitutionPlan:
    return SubstitutionPlan(BASELINE_ID, [], {}, "superintendent")


# --- adjudication ------------------------------------------------------------------


@dataclass(frozen=True)
class AdjudicationRule:
    min_samples: int = 10
    statistic: str = "max"
    tolerance: float = 0.05

    def __post_init__(self):
        if self.statistic not in ("mean", "max"):
            raise PolicyError(f"unknown statistic {self.statistic!r}")
        if self.min_samples < 0 or self.tolerance < 0:
            raise PolicyError("rule bounds must be non-negative")


@dataclass(frozen=True)
class Decision:
    approved: bool
    reason: str

    def __bool__(self) -> bool:
        return self.approved


def prior_adjudicate(binding, kb: KnowledgeBase, rule: AdjudicationRule) -> Decision:
    """Approve ``binding`` iff it has at least ``min_samples`` canary samples
    and the chosen error statistic is within tolerance."""
    binding_id = binding if isinstance(binding, str) else binding.id
    stats = kb.accuracy_stats(binding_id)
    if stats.count < rule.min_samples or not stats.defined:
        return Decision(False, f"min-samples: {stats.count} < {rule.min_samples}")
    value = stats.mean if rule.statistic == "mean" else stats.max
    if value > rule.tolerance:
        return Decision(False, f"tolerance: {rule.statistic} error {value:g} > {rule.tolerance:g}")
    return Decision(True, f"{stats.count} samples, {rule.statistic} error {value:g} <= {rule.tolerance:g}")


# --- evaluation ---------------------------------------------------------------------


def _cores(resources: dict) -> float:
    try:
        return float(resources.get("cores", 1))
    except (TypeError, ValueError):
        return 1.0


@dataclass
class _BlockCost:
    nodes: frozenset
    seconds: Optional[float]
    core_seconds: Optional[float]
    cores: float


def _block_costs(wf: WorkflowDescription, kb: KnowledgeBase) -> list[_BlockCost]:
    hashes = hash_workflow(wf, algorithm=kb.algorithm)
    out = []
    for b in motifs(wf)[0]:
        times = [kb.mean_wall_seconds(hashes[n].digest) for n in b.members]
        cores = [_cores(wf.node(n).resources) for n in b.members]
        if any(t is None for t in times):
            out.append(_BlockCost(b.nodes, None, None, max(cores)))
        else:
            out.append(_BlockCost(b.nodes, sum(times), sum(t * c for t, c in zip(times, cores)), max(cores)))
    return out


def _sub_seconds(sub: PlanSubstitution, kb: KnowledgeBase) -> Optional[float]:
    if sub.kind == ALTERNATE:
        try:
            t = kb.entry_wall_seconds(sub.ref)
        except UnknownEntryError:
            t = None
        if t is not None:
            return t
    return sub.expected_seconds


def _sub_risk(sub: PlanSubstitution, kb: KnowledgeBase, costfn: CostFunction) -> Optional[float]:
    stats = kb.accuracy_stats(sub.ref)
    if stats.defined:
        return min(stats.mean / costfn.tolerance, 1.0)
    if sub.kind == ALTERNATE:
        # a physical alternate is a full computation in its own right
        return 0.0
    return costfn.accuracy_default


def objective_values(plan: SubstitutionPlan, wf: WorkflowDescription, kb: KnowledgeBase, costfn: CostFunction) -> dict:
    """Normalized objective values of ``plan`` applied to ``wf``."""
    wf = resolve_parameters(wf)
    blocks = _block_costs(wf, kb)
    need_time = costfn.weight("runtime") > 0 or costfn.weight("monetary") > 0

    def seconds_of(b: _BlockCost) -> float:
        if b.seconds is None:
            if need_time:
                raise PolicyError(f"no execution records for block {sorted(b.nodes)}")
            return 0.0
        return b.seconds

    base_seconds = sum(seconds_of(b) for b in blocks)
    seconds, core_seconds, risk = 0.0, 0.0, 0.0
    replaced: set = set()
    for sub in plan.substitutions:
        t = _sub_seconds(sub, kb)
        if t is None:
            if need_time:
                raise PolicyError(f"no runtime estimate for substitution {sub.ref}")
            t = 0.0
        r = _sub_risk(sub, kb, costfn)
        if r is None and costfn.weight("accuracy-risk") > 0:
            raise PolicyError(f"no accuracy data for {sub.ref} and no default")
        seconds += t
        core_seconds += t * sub.cores
        risk += r or 0.0
        replaced |= sub.nodes
    for b in blocks:
        if b.nodes & replaced:
            continue
        seconds += seconds_of(b)
        core_seconds += b.core_seconds or 0.0
    return {
        "runtime": seconds / base_seconds if base_seconds > 0 else seconds,
        "accuracy-risk": risk,
        "monetary": core_seconds * costfn.unit_cost,
    }


def evaluate_plan(plan: SubstitutionPlan, wf: WorkflowDescription, kb: KnowledgeBase, costfn: CostFunction) -> float:
    values = objective_values(plan, wf, kb, costfn)
    return sum(costfn.weight(k) * values[k] for k in OBJECTIVES)


# --- agents ---------------------------------------------------------------------------

Agent = Callable[..., list]


def _entry_workflow(kb: KnowledgeBase, entry_id: str) -> Optional[WorkflowDescription]:
    path = kb.entry(entry_id).source.get("path")
    if not path or not Path(path).exists():
        return None
    try:
        return load_workflow(path)
    except (OSError, WorkflowError):
        return None


def performance_agent(wf: WorkflowDescription, kb: KnowledgeBase, objectives=None, *, threshold: float = 0.8,
                      wl_iterations: int = 3, **_) -> list[SubstitutionPlan]:
    """One plan per block that has a faster functionally similar entry."""
    wf = resolve_parameters(wf)
    name_cfg, cmd_cfg = WLConfig(wl_iterations, "name"), WLConfig(wl_iterations, "command")
    costs = {frozenset(c.nodes): c for c in _block_costs(wf, kb)}
    plans = []
    for block in motifs(wf)[0]:
        sg = SubGraph.of(wf, block.members)
        labels, own = wl_labels(sg, name_cfg), wl_hash(sg, cmd_cfg)
        current = costs[block.nodes].seconds
        best = None
        for e in kb.entries():
            if e.wl_digest("command") == own:
                continue
            if multiset_jaccard(labels, e.wl_label_multiset("name")) < threshold:
                continue
            t = kb.entry_wall_seconds(e.id)
            if t is None or (current is not None and t >= current):
                continue
            if best is None or (t, e.id) < best[:2]:
                best = (t, e.id, e)
        if best is None:
            continue
        t, eid, e = best
        cores = max((_cores(n.get("resources", {})) for n in e.representation["graph"]), default=1.0)
        sub = PlanSubstitution(tuple(block.members), ALTERNATE, eid, t, cores)
        delta = {"runtime": t - current} if current is not None else {}
        plans.append(SubstitutionPlan(f"performance-{block.id}", [sub], delta, "performance"))
    return plans


def accuracy_agent(wf: WorkflowDescription, kb: KnowledgeBase, objectives=None, *, bindings=(),
                   rule: Optional[AdjudicationRule] = None, **_) -> list[SubstitutionPlan]:
    """Plans for surrogates that already pass the prior rule."""
    rule = rule or AdjudicationRule()
    wf = resolve_parameters(wf)
    hashes = hash_workflow(wf, algorithm=kb.algorithm)
    plans = []
    for b in bindings:
        if not set(b.physical) <= set(wf.names()) or not prior_adjudicate(b, kb, rule):
            continue
        stats = kb.accuracy_stats(b.id)
        physical = [kb.mean_wall_seconds(hashes[n].digest) for n in b.physical]
        seconds = _surrogate_seconds(kb, b.id)
        delta = {"accuracy-risk": stats.mean}
        if seconds is not None and None not in physical:
            delta["runtime"] = seconds - sum(physical)
        sub = PlanSubstitution(tuple(sorted(b.physical)), SURROGATE, b.id, seconds)
        plans.append(SubstitutionPlan(f"accuracy-{b.id}", [sub], delta, "accuracy"))
    return plans


def _surrogate_seconds(kb: KnowledgeBase, binding_id: str) -> Optional[float]:
    """Mean shadow-run time over the binding's canary samples."""
    totals = []
    for s in kb.samples(binding_id):
        times = [kb.mean_wall_seconds(h) for h in s.surrogate_hash.split(",") if h]
        if times and None not in times:
            totals.append(sum(times))
    return sum(totals) / len(totals) if totals else None


BUILTIN_AGENTS: tuple = (performance_agent, accuracy_agent)


def run_agents(wf: WorkflowDescription, kb: KnowledgeBase, objectives=None, agents: Iterable[Agent] = BUILTIN_AGENTS,
               **options) -> list[SubstitutionPlan]:
    """Collect proposals from every agent. Agents only read the KB."""
    plans = []
    for agent in agents:
        plans.extend(agent(wf, kb, objectives, **options))
    return plans


# --- superintendent --------------------------------------------------------------------


def _ranked(plans, wf, kb, costfn) -> list[tuple[float, str, SubstitutionPlan]]:
    return sorted(((evaluate_plan(p, wf, kb, costfn), p.id, p) for p in plans), key=lambda t: (t[0], t[1]))


def superintend(proposals: list[SubstitutionPlan], wf: WorkflowDescription, kb: KnowledgeBase,
                costfn: CostFunction, mode: str = "pick") -> SubstitutionPlan:
    """Pick the cheapest proposal (baseline included), or in ``mix`` mode
    assemble per-block choices greedily and keep that only if it is
    strictly cheaper than the pick."""
    if mode not in ("pick", "mix"):
        raise PolicyError(f"unknown mode {mode!r}")
    cost, _, winner = _ranked([baseline_plan(), *proposals], wf, kb, costfn)[0]
    if mode == "pick":
        return winner

    by_block: dict[frozenset, list[PlanSubstitution]] = {}
    for p in proposals:
        for s in p.substitutions:
            if s not in by_block.setdefault(s.nodes, []):
                by_block[s.nodes].append(s)
    chosen: list[PlanSubstitution] = []
    current = evaluate_plan(baseline_plan(), wf, kb, costfn)
    for nodes in sorted(by_block, key=lambda n: sorted(n)):
        used = frozenset().union(*(s.nodes for s in chosen))
        best = None
        for s in by_block[nodes]:
            if s.nodes & used:
                continue
            c = evaluate_plan(SubstitutionPlan("mix", chosen + [s]), wf, kb, costfn)
            if c < current and (best is None or c < best[0]):
                best = (c, s)
        if best is not None:
            current = best[0]
            chosen.append(best[1])
    if chosen and current < cost:
        sources = sorted({p.id for p in proposals for s in p.substitutions if s in chosen})
        return SubstitutionPlan("mix", chosen, {"sources": sources}, "superintendent")
    return winner


def apply_plan(wf: WorkflowDescription, plan: SubstitutionPlan, kb: KnowledgeBase, bindings=(),
               threshold: float = 0.8, force: bool = False):
    """Apply each substitution of ``plan`` in turn. Returns the new workflow
    and the conflicts met; with conflicts and no ``force`` the input comes
    back unchanged."""
    from .substitution import extract_patch, identify_splice_points, apply_patch

    by_id = {b.id: b for b in bindings}
    current = resolve_parameters(wf)
    conflicts = []
    for sub in plan.substitutions:
        if sub.kind == SURROGATE:
            if sub.ref not in by_id:
                raise PolicyError(f"plan needs surrogate binding {sub.ref!r}")
            patch = by_id[sub.ref].patch.with_removal(sub.target)
        else:
            source = _entry_workflow(kb, sub.ref)
            if source is None:
                raise PolicyError(f"source workflow of entry {sub.ref} is not available")
            patch = extract_patch(source, kb.entry(sub.ref).members, kb, remove=sub.target)
        splice = identify_splice_points(current, patch, threshold, force)
        current, found = apply_patch(current, patch, splice, force)
        conflicts.extend(found)
        if found and not force:
            return wf, conflicts
    return current, conflicts
