"""Patch extraction, splice-point identification, patch application and
composition of new workflows from factored blocks."""

from __future__ import annotations

import itertools
import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Union

from .equivalence import (
    SubGraph,
    WLConfig,
    canonical_descriptor,
    codomain_descriptors,
    codomain_similarity,
    composability,
    domain_descriptors,
    domain_similarity,
    file_digest,
    wl_hash,
)
from .factoring import Block, extract_block_workflow, motifs
from .model import (
    TOKEN_RE,
    ComponentNode,
    InputBinding,
    LiteralFile,
    Reference,
    WorkflowDescription,
    WorkflowError,
    node_from_dict,
    node_to_dict,
    parse_ref_body,
    resolve_parameters,
    validate,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.8

UNMAPPED_INPUT = "unmapped-input"
AMBIGUOUS_SPLICE = "ambiguous-splice"
ARGUMENT_EXPECTATION = "argument-expectation"
DANGLING_CONSUMER = "dangling-consumer"
CONFLICT_KINDS = (UNMAPPED_INPUT, AMBIGUOUS_SPLICE, ARGUMENT_EXPECTATION, DANGLING_CONSUMER)


class PatchError(WorkflowError):
    pass


@dataclass(frozen=True)
class Conflict:
    kind: str
    locus: str
    detail: str

    def as_dict(self) -> dict:
        return {"kind": self.kind, "locus": self.locus, "detail": self.detail}


@dataclass(frozen=True)
class PatchInput:
    descriptor: str
    producer: str
    output: str
    producer_codomain: frozenset

    @property
    def key(self) -> str:
        return f"{self.producer}/{self.output}"


@dataclass(frozen=True)
class PatchOutput:
    descriptor: str
    node: str
    output: str
    consumer_domains: tuple = ()


@dataclass
class Patch:
    nodes: tuple[ComponentNode, ...]
    inputs: tuple[PatchInput, ...] = ()
    outputs: tuple[PatchOutput, ...] = ()
    instructions: tuple[dict, ...] = ()
    provenance: dict = field(default_factory=dict)
    # literal path as written in a patch node -> file on disk
    payload: dict = field(default_factory=dict)

    @property
    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def removal(self) -> frozenset:
        return frozenset(i["node"] for i in self.instructions if i.get("op") == "remove")

    def with_removal(self, nodes: Iterable[str]) -> "Patch":
        keep = tuple(i for i in self.instructions if i.get("op") != "remove")
        return replace(self, instructions=keep + tuple({"op": "remove", "node": n} for n in nodes))

    def to_dict(self) -> dict:
        return {
            "nodes": [node_to_dict(n) for n in self.nodes],
            "inputs": [
                {"descriptor": i.descriptor, "producer": i.producer, "output": i.output,
                 "producer_codomain": sorted(i.producer_codomain)}
                for i in self.inputs
            ],
            "outputs": [
                {"descriptor": o.descriptor, "node": o.node, "output": o.output,
                 "consumer_domains": [sorted(d) for d in o.consumer_domains]}
                for o in self.outputs
            ],
            "instructions": list(self.instructions),
            "provenance": self.provenance,
        }

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        (directory / "payload").mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        stored = {}
        for i, (written, src) in enumerate(sorted(self.payload.items())):
            rel = f"payload/{i:03d}_{Path(written).name}"
            shutil.copyfile(src, directory / rel)
            stored[written] = rel
        data["payload"] = stored
        (directory / "patch.json").write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "Patch":
        directory = Path(directory).resolve()
        data = json.loads((directory / "patch.json").read_text(encoding="utf-8"))
        # nodes are parsed one by one: references leaving the patch are expected
        nodes = tuple(node_from_dict(n) for n in data["nodes"])
        return cls(
            nodes=nodes,
            inputs=tuple(
                PatchInput(i["descriptor"], i["producer"], i["output"], frozenset(i["producer_codomain"]))
                for i in data["inputs"]
            ),
            outputs=tuple(
                PatchOutput(o["descriptor"], o["node"], o["output"], tuple(frozenset(d) for d in o["consumer_domains"]))
                for o in data["outputs"]
            ),
            instructions=tuple(data.get("instructions", [])),
            provenance=data.get("provenance", {}),
            payload={k: directory / v for k, v in data.get("payload", {}).items()},
        )


# --- extraction ---------------------------------------------------------------


def _node_codomain(wf: WorkflowDescription, name: str) -> frozenset:
    return codomain_descriptors(SubGraph.of(wf, [name])).items


def _node_domain(wf: WorkflowDescription, name: str) -> frozenset:
    return domain_descriptors(SubGraph.of(wf, [name])).items


def extract_patch(
    wf: WorkflowDescription,
    block: Union[Block, Iterable[str]],
    kb=None,
    remove: Iterable[str] = (),
) -> Patch:
    """Lift ``block`` out of ``wf`` as a patch. References leaving the block
    become the input schema; every output of a block node is offered in the
    output schema. ``remove`` seeds the removal instructions."""
    wf = resolve_parameters(wf)
    members = block.members if isinstance(block, Block) else tuple(n for n in wf.names() if n in set(block))
    inside = set(members)
    nodes = tuple(wf.node(n) for n in members)

    inputs: dict[str, PatchInput] = {}
    payload = {}
    for n in nodes:
        for ref, _ in n.references():
            if ref.node not in inside:
                pi = PatchInput(canonical_descriptor(ref.output), ref.node, ref.output, _node_codomain(wf, ref.node))
                inputs.setdefault(pi.key, pi)
        for b in n.inputs:
            if isinstance(b.source, LiteralFile):
                path = wf.literal_path(b.source.path)
                if not path.is_file():
                    raise PatchError(f"missing payload file {b.source.path!r} for node {n.name!r}")
                payload[b.source.path] = path.resolve()

    outputs = []
    for n in nodes:
        for o in n.outputs:
            consumers = sorted(
                {c.name for c in wf.nodes if c.name not in inside
                 for ref, _ in c.references() if ref.node == n.name and ref.output == o.name}
            )
            domains = tuple(_node_domain(wf, c) for c in consumers)
            outputs.append(PatchOutput(canonical_descriptor(o.name), n.name, o.name, domains))

    provenance = {"workflow": wf.name, "block": list(members)}
    if isinstance(block, Block):
        provenance["block_id"] = block.id
    if kb is not None:
        provenance["entry"] = kb.register(wf, members)
    if wf.source_path is not None and wf.source_path.exists():
        provenance["workflow_digest"] = file_digest(wf.source_path)
    patch = Patch(nodes, tuple(inputs.values()), tuple(outputs), (), provenance, payload)
    return patch.with_removal(remove) if remove else patch


# --- splice points --------------------------------------------------------------


@dataclass
class SpliceMap:
    inputs: dict = field(default_factory=dict)     # patch input key -> (G node, output)
    outputs: dict = field(default_factory=dict)    # (G node, input) -> patch output descriptor
    literals: dict = field(default_factory=dict)   # patch input key -> literal file read by the removed nodes
    rewired: dict = field(default_factory=dict)    # (patch node, binding) -> (G node, output)
    removal: frozenset = frozenset()
    scores: dict = field(default_factory=dict)
    conflicts: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "inputs": {k: list(v) for k, v in sorted(self.inputs.items())},
            "outputs": [{"node": k[0], "input": k[1], "descriptor": v} for k, v in sorted(self.outputs.items())],
            "literals": {k: str(v) for k, v in sorted(self.literals.items())},
            "rewired": [{"node": k[0], "input": k[1], "producer": list(v)} for k, v in sorted(self.rewired.items())],
            "removal": sorted(self.removal),
            "scores": {k: v for k, v in sorted(self.scores.items())},
            "conflicts": [c.as_dict() for c in self.conflicts],
            "warnings": list(self.warnings),
        }


def _ancestors(wf: WorkflowDescription, names: Iterable[str]) -> set[str]:
    seen: set[str] = set()
    stack = list(names)
    while stack:
        for p in wf.producers[stack.pop()]:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _descendants(wf: WorkflowDescription, names: Iterable[str]) -> set[str]:
    seen: set[str] = set()
    stack = list(names)
    while stack:
        for c in wf.consumers[stack.pop()]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def identify_splice_points(
    G: WorkflowDescription,
    patch: Patch,
    threshold: float = DEFAULT_THRESHOLD,
    force: bool = False,
) -> SpliceMap:
    """Match the patch boundary against ``G`` with single-node equivalence
    tests. Ties are reported as conflicts; ``force`` takes the first
    candidate by name instead and records a warning."""
    splice = SpliceMap()
    removal = set(patch.removal())
    unknown = removal - set(G.names())
    for n in sorted(unknown):
        splice.conflicts.append(Conflict(DANGLING_CONSUMER, n, "removal instruction names a node absent from the target"))
    removal -= unknown

    pending = []
    for pi in patch.inputs:
        candidates = []
        for n in G.nodes:
            if n.name in removal:
                continue
            for o in n.outputs:
                if canonical_descriptor(o.name) == pi.descriptor:
                    score = codomain_similarity(_node_codomain(G, n.name), pi.producer_codomain).value
                    candidates.append((score, n.name, o.name))
        passing = sorted((c for c in candidates if c[0] >= threshold), key=lambda c: (-c[0], c[1]))
        if not passing:
            pending.append((pi, max((c[0] for c in candidates), default=0.0)))
            continue
        top = [c for c in passing if c[0] == passing[0][0]]
        if len(top) > 1:
            names = ", ".join(c[1] for c in top)
            if not force:
                splice.conflicts.append(Conflict(AMBIGUOUS_SPLICE, pi.key, f"equally good producers: {names}"))
                continue
            splice.warnings.append(f"forced splice of {pi.key} onto {top[0][1]} (tied with {names})")
        score, node, output = top[0]
        splice.inputs[pi.key] = (node, output)
        splice.scores[f"in:{pi.key}"] = score

    offered = {o.descriptor for o in patch.outputs}
    if not patch.removal():
        # no explicit instructions: remove whatever lies between the chosen
        # producers and the consumers of data the patch offers
        producers = {v[0] for v in splice.inputs.values()}
        candidates = set()
        for n in G.nodes:
            if n.name in producers:
                continue
            if any(canonical_descriptor(ref.output) in offered for ref, _ in n.references()):
                if _consumer_score(G, n.name, patch) >= threshold:
                    candidates.add(n.name)
        if producers:
            removal = (_descendants(G, producers) & _ancestors(G, candidates)) - producers
    splice.removal = frozenset(removal)

    # boundaries the removed nodes fed from literal files or retained producers
    removed_literals: dict[str, set] = {}
    removed_refs: dict[str, set] = {}
    for name in sorted(removal):
        n = G.node(name)
        for b in n.inputs:
            if isinstance(b.source, LiteralFile):
                d = canonical_descriptor(b.source.path)
                removed_literals.setdefault(d, set()).add(str(G.literal_path(b.source.path).resolve()))
        for ref, _ in n.references():
            if ref.node not in removal:
                removed_refs.setdefault(canonical_descriptor(ref.output), set()).add((ref.node, ref.output))

    for pi, best in pending:
        paths = removed_literals.get(pi.descriptor, set())
        if len(paths) == 1:
            splice.literals[pi.key] = paths.pop()
            continue
        splice.conflicts.append(
            Conflict(UNMAPPED_INPUT, pi.key, f"no producer of {pi.descriptor!r} scores >= {threshold} (best {best:.4f})")
        )

    for n in patch.nodes:
        for b in n.inputs:
            if isinstance(b.source, LiteralFile):
                producers = removed_refs.get(canonical_descriptor(b.source.path), set())
                if len(producers) == 1:
                    splice.rewired[(n.name, b.name)] = next(iter(producers))
                elif len(producers) > 1:
                    splice.conflicts.append(
                        Conflict(AMBIGUOUS_SPLICE, f"{n.name}/{b.name}", "removed nodes read this data from several producers")
                    )

    for n in G.nodes:
        if n.name in removal:
            continue
        for ref, via in n.references():
            if ref.node in removal:
                d = canonical_descriptor(ref.output)
                splice.outputs[(n.name, via)] = d
                splice.scores[f"out:{n.name}/{via}"] = _consumer_score(G, n.name, patch)
    return splice


def _consumer_score(G: WorkflowDescription, name: str, patch: Patch) -> float:
    domains = [d for o in patch.outputs for d in o.consumer_domains]
    if not domains:
        return 1.0
    mine = _node_domain(G, name)
    return max(domain_similarity(mine, d).value for d in domains)


# --- application ----------------------------------------------------------------


def _expectation_conflicts(G: WorkflowDescription, patch: Patch, splice: SpliceMap) -> list[Conflict]:
    by_descriptor: dict[str, list[PatchOutput]] = {}
    for o in patch.outputs:
        by_descriptor.setdefault(o.descriptor, []).append(o)
    patch_nodes = {n.name: n for n in patch.nodes}
    out = []
    for (consumer, via), d in sorted(splice.outputs.items()):
        if consumer not in G.node_map or consumer in splice.removal:
            out.append(Conflict(DANGLING_CONSUMER, f"{consumer}/{via}", "splice consumer is not a retained node of the target"))
            continue
        offered = by_descriptor.get(d, [])
        if not offered:
            out.append(Conflict(ARGUMENT_EXPECTATION, f"{consumer}/{via}", f"expects output {d!r} which the patch does not produce"))
            continue
        if len(offered) > 1:
            out.append(Conflict(AMBIGUOUS_SPLICE, f"{consumer}/{via}", f"several patch nodes produce {d!r}"))
            continue
        expects = (G.node(consumer).annotations.get("expects") or {}).get(d, [])
        producer = patch_nodes[offered[0].node]
        for flag in expects:
            if not any(a == flag or a.startswith(flag + "=") for a in producer.command.arguments):
                out.append(
                    Conflict(ARGUMENT_EXPECTATION, f"{consumer}/{via}",
                             f"expects producer of {d!r} to be run with {flag!r}; patch node {producer.name!r} is not")
                )
    return out


def _rewrite_refs(node: ComponentNode, mapping) -> ComponentNode:
    """Rewrite references through ``mapping(ref, via) -> Reference | None``."""
    inputs = []
    for b in node.inputs:
        if isinstance(b.source, Reference):
            new = mapping(b.source, b.name)
            inputs.append(InputBinding(b.name, new) if new else b)
        else:
            inputs.append(b)
    args = []
    for i, a in enumerate(node.command.arguments):
        def sub(m, via=f"arg[{i}]"):
            if m.group(1) != "ref":
                return m.group(0)
            new = mapping(parse_ref_body(m.group(2)), via)
            return "{{ref:%s/%s}}" % (new.node, new.output) if new else m.group(0)

        args.append(TOKEN_RE.sub(sub, a))
    return replace(node, inputs=tuple(inputs), command=replace(node.command, arguments=tuple(args)))


def _splice_patch_node(n: ComponentNode, patch: Patch, splice: SpliceMap, rename: dict) -> ComponentNode:
    """Wire one patch node into the target: internal references follow the
    renaming, boundary references go to the chosen producers or to the
    literal data the removed nodes read, and literal inputs that the removed
    nodes received from a producer are turned back into references."""
    inputs = []
    for b in n.inputs:
        src = b.source
        if isinstance(src, Reference):
            if src.node in rename:
                src = Reference(rename[src.node], src.output)
            elif f"{src.node}/{src.output}" in splice.inputs:
                src = Reference(*splice.inputs[f"{src.node}/{src.output}"])
            elif f"{src.node}/{src.output}" in splice.literals:
                src = LiteralFile(splice.literals[f"{src.node}/{src.output}"])
        elif isinstance(src, LiteralFile):
            if (n.name, b.name) in splice.rewired:
                src = Reference(*splice.rewired[(n.name, b.name)])
            elif src.path in patch.payload:
                src = LiteralFile(str(patch.payload[src.path]))
        inputs.append(InputBinding(b.name, src))
    taken = {b.name for b in inputs}
    by_literal = {b.source.path: b.name for b in inputs if isinstance(b.source, LiteralFile)}

    def sub(m):
        if m.group(1) != "ref":
            return m.group(0)
        ref = parse_ref_body(m.group(2))
        key = f"{ref.node}/{ref.output}"
        if ref.node in rename:
            return "{{ref:%s/%s}}" % (rename[ref.node], ref.output)
        if key in splice.inputs:
            return "{{ref:%s/%s}}" % splice.inputs[key]
        if key in splice.literals:
            path = splice.literals[key]
            if path not in by_literal:
                bname = canonical_descriptor(ref.output)
                while bname in taken:
                    bname = "_" + bname
                taken.add(bname)
                inputs.append(InputBinding(bname, LiteralFile(path)))
                by_literal[path] = bname
            return by_literal[path]
        return m.group(0)

    args = tuple(TOKEN_RE.sub(sub, a) for a in n.command.arguments)
    return replace(n, name=rename[n.name], inputs=tuple(inputs), command=replace(n.command, arguments=args))


def apply_patch(
    G: WorkflowDescription,
    patch: Patch,
    splice: SpliceMap,
    force: bool = False,
) -> tuple[WorkflowDescription, list[Conflict]]:
    """Remove the splice removal set, insert the patch nodes and rewire.

    With conflicts and no ``force`` the target comes back untouched. A result
    that fails validation raises PatchError whatever ``force`` says.
    """
    conflicts = list(splice.conflicts) + _expectation_conflicts(G, patch, splice)
    if conflicts and not force:
        return G, conflicts

    retained = [n for n in G.nodes if n.name not in splice.removal]
    taken = {n.name for n in retained}
    rename = {}
    for n in patch.nodes:
        new, k = n.name, 1
        while new in taken:
            new = f"{n.name}_p" if k == 1 else f"{n.name}_p{k}"
            k += 1
        taken.add(new)
        rename[n.name] = new

    out_by_descriptor = {o.descriptor: o for o in patch.outputs}

    inserted = [_splice_patch_node(n, patch, splice, rename) for n in patch.nodes]

    def consumer_mapping(name):
        def mapping(ref: Reference, via: str):
            if ref.node not in splice.removal:
                return None
            d = splice.outputs.get((name, via), canonical_descriptor(ref.output))
            o = out_by_descriptor.get(d)
            return Reference(rename[o.node], o.output) if o else None
        return mapping

    modified = {}
    for ins in patch.instructions:
        if ins.get("op") == "modify":
            modified.setdefault(ins["node"], []).append(ins)

    nodes = []
    placed = False
    for n in G.nodes:
        if n.name in splice.removal:
            if not placed:
                nodes.extend(inserted)
                placed = True
            continue
        n = _rewrite_refs(n, consumer_mapping(n.name))
        for ins in modified.get(n.name, []):
            if "arguments" in ins:
                n = replace(n, command=replace(n.command, arguments=tuple(ins["arguments"])))
            if "resources" in ins:
                n = replace(n, resources={**n.resources, **ins["resources"]})
            if "annotations" in ins:
                n = replace(n, annotations={**n.annotations, **ins["annotations"]})
        nodes.append(n)
    if not placed:
        nodes.extend(inserted)

    result = replace(G, nodes=tuple(nodes))
    try:
        validate(result)
    except WorkflowError as e:
        raise PatchError(f"patched workflow is invalid: {e}") from None
    return result, conflicts


def substitute(
    G: WorkflowDescription,
    remove: Iterable[str],
    source: WorkflowDescription,
    source_nodes: Iterable[str],
    threshold: float = DEFAULT_THRESHOLD,
    force: bool = False,
) -> tuple[WorkflowDescription, list[Conflict]]:
    """Replace nodes ``remove`` of ``G`` by ``source_nodes`` of ``source``."""
    patch = extract_patch(source, list(source_nodes), remove=list(remove))
    splice = identify_splice_points(G, patch, threshold, force)
    return apply_patch(G, patch, splice, force)


# --- composition ----------------------------------------------------------------


@dataclass
class CompositionCandidate:
    kind: str                    # recombination | standalone
    workflow: WorkflowDescription
    digest: str                  # command-mode WL digest of the whole graph
    template: Optional[int] = None
    choice: tuple = ()           # block type labels per slot

    @property
    def name(self) -> str:
        return self.workflow.name


@dataclass
class _BlockType:
    label: str
    group: str
    entry: str
    wf: WorkflowDescription
    block: Block


def enumerate_compositions(
    library: list[WorkflowDescription],
    kb,
    threshold: float = DEFAULT_THRESHOLD,
    wl_iterations: int = 3,
) -> list[CompositionCandidate]:
    """New workflows from a factored library.

    Templates are the distinct sequences of block groups (name-mode WL
    classes) seen in the library. Every slot may take any block type of its
    group, provided each quotient edge passes composability (upstream or
    downstream) at ``threshold``. Combinations equal to a library member
    are dropped. Each block type not already a standalone library workflow
    is also offered on its own.
    """
    from .kb import register_workflow

    cmd_cfg, name_cfg = WLConfig(wl_iterations, "command"), WLConfig(wl_iterations, "name")
    types: dict[str, _BlockType] = {}
    existing: set[str] = set()
    standalone_types: set[str] = set()
    templates: dict[tuple, list[tuple[WorkflowDescription, list[Block], tuple]]] = {}

    for wf in library:
        existing.add(wl_hash(SubGraph.of(wf), cmd_cfg))
        ids = register_workflow(kb, wf, wf.source_path)
        blocks, quotient = motifs(wf)
        index = {b.id: i for i, b in enumerate(blocks)}
        slots = []
        for b in blocks:
            sg = SubGraph.of(wf, b.members)
            label = wl_hash(sg, cmd_cfg)
            if label not in types:
                types[label] = _BlockType(label, wl_hash(sg, name_cfg), ids[b.id], wf, b)
            slots.append(label)
        if len(blocks) == 1:
            standalone_types.add(slots[0])
        shape = tuple((index[a], index[b]) for a, b in quotient.edges)
        key = (tuple(types[s].group for s in slots), shape)
        templates.setdefault(key, []).append((wf, blocks, tuple(slots)))

    by_group: dict[str, list[str]] = {}
    for label, t in types.items():
        by_group.setdefault(t.group, []).append(label)

    candidates: list[CompositionCandidate] = []
    seen: set[tuple[str, str]] = set()

    def composable(a: str, b: str) -> bool:
        ea, eb = types[a].entry, types[b].entry
        score = max(
            composability(ea, eb, "upstream", kb).value,
            composability(ea, eb, "downstream", kb).value,
        )
        return score >= threshold

    for t_index, ((groups, shape), members) in enumerate(templates.items()):
        base_wf, base_blocks, base_slots = members[0]
        for choice in itertools.product(*(by_group[g] for g in groups)):
            if not all(composable(choice[i], choice[j]) for i, j in shape):
                continue
            wf = base_wf
            current = [list(b.members) for b in base_blocks]
            failed = False
            for slot, label in enumerate(choice):
                if label == base_slots[slot]:
                    continue
                t = types[label]
                before = set(wf.names()) - set(current[slot])
                new, conflicts = substitute(wf, current[slot], t.wf, t.block.members, threshold)
                if conflicts:
                    log.info("skipping %s: %s", choice, "; ".join(c.detail for c in conflicts))
                    failed = True
                    break
                current[slot] = [n for n in new.names() if n not in before]
                wf = new
            if failed:
                continue
            digest = wl_hash(SubGraph.of(wf), cmd_cfg)
            if digest in existing or ("recombination", digest) in seen:
                continue
            seen.add(("recombination", digest))
            wf = replace(wf, name=f"recombination-{digest[:10]}")
            candidates.append(CompositionCandidate("recombination", wf, digest, t_index, choice))

    for label, t in types.items():
        if label in standalone_types:
            continue
        wf = extract_block_workflow(t.wf, t.block)
        digest = wl_hash(SubGraph.of(wf), cmd_cfg)
        if digest in existing or ("standalone", digest) in seen:
            continue
        seen.add(("standalone", digest))
        wf = replace(wf, name=f"standalone-{digest[:10]}")
        candidates.append(CompositionCandidate("standalone", wf, digest, None, (label,)))
    return candidates
