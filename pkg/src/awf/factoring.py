"""Factor workflows into blocks by shared leaf reachability.

Two nodes belong to the same block exactly when they lie on the way to the
same set of leaves: for every leaf, either both are among its ancestors
(the leaf included) or neither is.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from .equivalence import (
    DescriptorSet,
    SubGraph,
    canonical_descriptor,
    codomain_descriptors,
    domain_descriptors,
)
from .model import (
    TOKEN_RE,
    InputBinding,
    LiteralFile,
    Reference,
    WorkflowDescription,
    canonical_json,
    parse_ref_body,
    topological_order,
    validate,
)


@dataclass(frozen=True)
class Block:
    id: str
    members: tuple[str, ...]
    inputs: DescriptorSet
    outputs: DescriptorSet

    @property
    def nodes(self) -> frozenset:
        return frozenset(self.members)


@dataclass(frozen=True)
class QuotientGraph:
    blocks: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def predecessors(self, block_id: str) -> list[str]:
        return [a for a, b in self.edges if b == block_id]

    def successors(self, block_id: str) -> list[str]:
        return [b for a, b in self.edges if a == block_id]


def block_id(members) -> str:
    return hashlib.sha256(canonical_json(sorted(members)).encode()).hexdigest()[:16]


def leaf_signatures(wf: WorkflowDescription) -> dict[str, frozenset]:
    order = topological_order(wf)
    sig: dict[str, frozenset] = {}
    for name in reversed(order):
        consumers = wf.consumers[name]
        if not consumers:
            sig[name] = frozenset([name])
        else:
            sig[name] = frozenset().union(*(sig[c] for c in consumers))
    return {n: sig[n] for n in wf.names()}


def make_block(wf: WorkflowDescription, members) -> Block:
    position = {n: i for i, n in enumerate(topological_order(wf))}
    members = tuple(sorted(members, key=position.__getitem__))
    sg = SubGraph.of(wf, members)
    return Block(block_id(members), members, domain_descriptors(sg), codomain_descriptors(sg))


def _quotient(wf: WorkflowDescription, blocks: list[Block]) -> QuotientGraph:
    owner = {m: b.id for b in blocks for m in b.members}
    edges = []
    for n in topological_order(wf):
        for p in wf.producers[n]:
            e = (owner[p], owner[n])
            if e[0] != e[1] and e not in edges:
                edges.append(e)
    return QuotientGraph(tuple(b.id for b in blocks), tuple(edges))


def factor(wf: WorkflowDescription) -> tuple[list[Block], QuotientGraph]:
    sigs = leaf_signatures(wf)
    groups: dict[frozenset, list[str]] = {}
    for name in topological_order(wf):
        groups.setdefault(sigs[name], []).append(name)
    blocks = [make_block(wf, members) for members in groups.values()]
    return blocks, _quotient(wf, blocks)


def fold_leaf_tails(wf: WorkflowDescription, blocks: list[Block], quotient: QuotientGraph) -> tuple[list[Block], QuotientGraph]:
    """Merge every block made only of leaves into its single upstream block.

    An upstream stage that writes its own analysis output always splits
    into the stage proper and the analysis tail under leaf-signature
    factoring; folding the tail back gives the reusable motif.
    """
    merged: dict[str, list[str]] = {b.id: list(b.members) for b in blocks}
    merged_into: dict[str, str] = {}
    for b in blocks:
        preds = quotient.predecessors(b.id)
        if len(preds) == 1 and all(not wf.consumers[m] for m in b.members):
            target = preds[0]
            while target not in merged:
                target = merged_into[target]
            merged[target].extend(merged.pop(b.id))
            merged_into[b.id] = target
    folded = [make_block(wf, members) for members in merged.values()]
    return folded, _quotient(wf, folded)


def motifs(wf: WorkflowDescription) -> tuple[list[Block], QuotientGraph]:
    return fold_leaf_tails(wf, *factor(wf))


# --- extraction ---------------------------------------------------------------


def boundary_schema(wf: WorkflowDescription, block: Block) -> list[dict]:
    """Every reference a block member makes to a node outside the block."""
    rows = []
    for name in block.members:
        for ref, via in wf.node(name).references():
            if ref.node not in block.nodes:
                rows.append(
                    {
                        "descriptor": canonical_descriptor(ref.output),
                        "node": name,
                        "input": via,
                        "producer": ref.node,
                        "output": ref.output,
                    }
                )
    return rows


def extract_block_workflow(wf: WorkflowDescription, block: Block) -> WorkflowDescription:
    """The block as a standalone workflow. Cross-boundary references become
    literal-file inputs named after the data they carried."""
    nodes = []
    for name in block.members:
        n = wf.node(name)
        inputs = []
        bound: dict[tuple[str, str], str] = {}
        for b in n.inputs:
            src = b.source
            if isinstance(src, Reference) and src.node not in block.nodes:
                src = LiteralFile(canonical_descriptor(src.output))
                bound[(b.source.node, b.source.output)] = b.name
            inputs.append(InputBinding(b.name, src))
        taken = {b.name for b in inputs}

        def sub(m, inputs=inputs, bound=bound, taken=taken):
            if m.group(1) != "ref":
                return m.group(0)
            ref = parse_ref_body(m.group(2))
            if ref.node in block.nodes:
                return m.group(0)
            key = (ref.node, ref.output)
            if key not in bound:
                bname = canonical_descriptor(ref.output)
                while bname in taken:
                    bname = "_" + bname
                taken.add(bname)
                inputs.append(InputBinding(bname, LiteralFile(canonical_descriptor(ref.output))))
                bound[key] = bname
            return bound[key]

        args = tuple(TOKEN_RE.sub(sub, a) for a in n.command.arguments)
        nodes.append(replace(n, inputs=tuple(inputs), command=replace(n.command, arguments=args)))
    name = wf.name if block.nodes == frozenset(wf.names()) else f"{wf.name}.{block.id}"
    out = replace(wf, name=name, nodes=tuple(nodes))
    validate(out)
    return out
