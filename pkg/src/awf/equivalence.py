"""Interface hashing, sub-graph similarity measures and WL graph hashing."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import Iterable, Mapping, Optional, Union

from .model import (
    TOKEN_RE,
    LiteralFile,
    Reference,
    WorkflowDescription,
    WorkflowError,
    abstract_view,
    canonical_json,
    functional_env,
    parse_ref_body,
)

DEFAULT_ALGORITHM = "sha256"
WL_DIGEST_SIZE = 16


class InputUnreadableError(WorkflowError):
    pass


@dataclass(frozen=True)
class InterfaceHash:
    digest: str
    algorithm: str = DEFAULT_ALGORITHM

    def __str__(self) -> str:
        return self.digest


def file_digest(path: Union[str, Path], algorithm: str = DEFAULT_ALGORITHM) -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_digest(data: bytes, algorithm: str = DEFAULT_ALGORITHM) -> str:
    return hashlib.new(algorithm, data).hexdigest()


def _bind_refs(text: str, hashes: Mapping[str, str]) -> str:
    def sub(m):
        if m.group(1) != "ref":
            return m.group(0)
        ref = parse_ref_body(m.group(2))
        return "{{ref:%s/%s}}" % (hashes[ref.node], ref.output)

    return TOKEN_RE.sub(sub, text)


def hash_payload(
    wf: WorkflowDescription,
    node: str,
    producer_hashes: Mapping[str, str],
    literal_digests: Mapping[str, str],
) -> dict:
    """The exact structure digested for ``node``; exposed so tests can
    compare serializations directly."""
    n = wf.node(node)
    view = abstract_view(wf, node)
    executable, args, env = view.command
    inputs = []
    for item in view.inputs:
        if item[1] == "reference":
            inputs.append([item[0], "reference", producer_hashes[item[2]], item[3]])
        else:
            inputs.append(list(item))
    literals = []
    for b in n.inputs:
        if isinstance(b.source, LiteralFile):
            literals.append([b.name, literal_digests[b.source.path]])
    return {
        "command": [executable, [_bind_refs(a, producer_hashes) for a in args], [list(e) for e in env]],
        "inputs": inputs,
        "outputs": [list(o) for o in view.outputs],
        "literals": sorted(literals),
        "producers": sorted({producer_hashes[p] for p in wf.producers[node]}),
    }


def _literal_digest(wf, path, literal_digests, algorithm, cache):
    if path in literal_digests:
        return literal_digests[path]
    key = ("literal", path)
    if key not in cache:
        try:
            cache[key] = file_digest(wf.literal_path(path), algorithm)
        except OSError as e:
            raise InputUnreadableError(f"cannot read literal input {path!r}: {e}") from None
    return cache[key]


def interface_hash(
    wf: WorkflowDescription,
    node: str,
    literal_digests: Optional[Mapping[str, str]] = None,
    *,
    algorithm: str = DEFAULT_ALGORITHM,
    cache: Optional[dict] = None,
) -> InterfaceHash:
    """Merkle-style digest of ``node``'s functional interface and the
    interfaces of everything upstream of it.

    Digests of literal inputs are taken from ``literal_digests`` (keyed by
    the path as written in the binding) or read from disk. ``cache`` may be
    shared across calls on the same workflow.
    """
    literal_digests = literal_digests or {}
    cache = {} if cache is None else cache
    wf.node(node)

    # iterative post-order so long chains don't hit the recursion limit
    stack = [(node, False)]
    while stack:
        name, expanded = stack.pop()
        if name in cache:
            continue
        producers = wf.producers[name]
        if not expanded:
            stack.append((name, True))
            stack.extend((p, False) for p in producers if p not in cache)
            continue
        n = wf.node(name)
        digests = {
            b.source.path: _literal_digest(wf, b.source.path, literal_digests, algorithm, cache)
            for b in n.inputs
            if isinstance(b.source, LiteralFile)
        }
        payload = hash_payload(wf, name, {p: cache[p].digest for p in producers}, digests)
        payload["algorithm"] = algorithm
        cache[name] = InterfaceHash(bytes_digest(canonical_json(payload).encode("utf-8"), algorithm), algorithm)
    return cache[node]


def hash_workflow(
    wf: WorkflowDescription,
    literal_digests: Optional[Mapping[str, str]] = None,
    algorithm: str = DEFAULT_ALGORITHM,
) -> dict[str, InterfaceHash]:
    cache: dict = {}
    return {n: interface_hash(wf, n, literal_digests, algorithm=algorithm, cache=cache) for n in wf.names()}


# --- descriptors and set similarity -------------------------------------------


def canonical_descriptor(name: str) -> str:
    return PurePosixPath(name.replace("\\", "/")).name.lower()


@dataclass(frozen=True)
class DescriptorSet:
    role: str
    items: frozenset

    @classmethod
    def of(cls, role: str, names: Iterable[str]) -> "DescriptorSet":
        return cls(role, frozenset(canonical_descriptor(n) for n in names))

    def __iter__(self):
        return iter(sorted(self.items))

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    metric: str

    def __float__(self) -> float:
        return self.value


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def multiset_jaccard(a: Iterable, b: Iterable) -> float:
    ca, cb = Counter(a), Counter(b)
    union = sum((ca | cb).values())
    if union == 0:
        return 1.0
    return sum((ca & cb).values()) / union


def _items(d) -> frozenset:
    return d.items if isinstance(d, DescriptorSet) else frozenset(d)


def domain_similarity(a, b) -> SimilarityScore:
    return SimilarityScore(jaccard(_items(a), _items(b)), "domain")


def codomain_similarity(a, b) -> SimilarityScore:
    return SimilarityScore(jaccard(_items(a), _items(b)), "codomain")


@dataclass(frozen=True)
class SubGraph:
    wf: WorkflowDescription
    nodes: frozenset

    @classmethod
    def of(cls, wf: WorkflowDescription, nodes: Optional[Iterable[str]] = None) -> "SubGraph":
        names = wf.names() if nodes is None else list(nodes)
        for n in names:
            wf.node(n)
        return cls(wf, frozenset(names))

    def members(self) -> list[str]:
        """Members in workflow declaration order."""
        return [n for n in self.wf.names() if n in self.nodes]


def domain_descriptors(sg: SubGraph) -> DescriptorSet:
    """Data the sub-graph consumes from outside: literal files and
    references to non-member producers."""
    names = []
    for name in sg.members():
        n = sg.wf.node(name)
        for b in n.inputs:
            if isinstance(b.source, LiteralFile):
                names.append(b.source.path)
        for ref, _ in n.references():
            if ref.node not in sg.nodes:
                names.append(ref.output)
    return DescriptorSet.of("domain", names)


def codomain_descriptors(sg: SubGraph) -> DescriptorSet:
    """Everything the member nodes write. Intermediate outputs are included
    because any of them can feed a block composed downstream."""
    return DescriptorSet.of("codomain", [o.name for name in sg.members() for o in sg.wf.node(name).outputs])


def codomain_from_consumers(sg: SubGraph) -> DescriptorSet:
    """Co-domain rebuilt only from references made to the sub-graph by
    non-member consumers, without reading the producers' declarations."""
    names = []
    for n in sg.wf.nodes:
        if n.name in sg.nodes:
            continue
        for ref, _ in n.references():
            if ref.node in sg.nodes:
                names.append(ref.output)
    return DescriptorSet.of("codomain", names)


# --- Weisfeiler-Lehman --------------------------------------------------------


@dataclass(frozen=True)
class WLConfig:
    iterations: int = 3
    label_mode: str = "command"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.label_mode not in ("name", "command"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")


def _wl_digest(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=WL_DIGEST_SIZE).hexdigest()


def command_label(wf: WorkflowDescription, node: str) -> str:
    """Command line with producer names replaced by the consumed output,
    so the label survives renaming of nodes."""
    n = wf.node(node)
    params = wf.parameters

    def sub(m):
        if m.group(1) == "ref":
            return "{{ref:%s}}" % canonical_descriptor(parse_ref_body(m.group(2)).output)
        return params.get(m.group(2), m.group(0))

    args = [" ".join(TOKEN_RE.sub(sub, a).split()) for a in n.command.arguments]
    env = sorted(functional_env(n).items())
    return canonical_json([n.command.executable, args, env])


def _wl_rounds(sg: SubGraph, config: WLConfig) -> list[dict[str, str]]:
    members = sg.members()
    if not members:
        raise ValueError("WL hashing needs a non-empty sub-graph")
    wf = sg.wf
    preds: dict[str, list[tuple[str, str]]] = {m: [] for m in members}
    succs: dict[str, list[tuple[str, str]]] = {m: [] for m in members}
    for m in members:
        for ref, _ in wf.node(m).references():
            if ref.node in sg.nodes:
                label = canonical_descriptor(ref.output)
                preds[m].append((ref.node, label))
                succs[ref.node].append((m, label))

    if config.label_mode == "name":
        labels = {m: _wl_digest("0:" + m) for m in members}
    else:
        labels = {m: _wl_digest("0:" + command_label(wf, m)) for m in members}
    rounds = [labels]
    for _ in range(config.iterations):
        new = {}
        for m in members:
            ins = sorted(f"{e}:{labels[p]}" for p, e in preds[m])
            outs = sorted(f"{e}:{labels[c]}" for c, e in succs[m])
            new[m] = _wl_digest(labels[m] + "|in:" + ",".join(ins) + "|out:" + ",".join(outs))
        labels = new
        rounds.append(labels)
    return rounds


def wl_labels(sg: SubGraph, config: WLConfig = WLConfig()) -> list[str]:
    """Sorted multiset of labels accumulated over all rounds, the initial
    labelling included."""
    return sorted(lbl for rnd in _wl_rounds(sg, config) for lbl in rnd.values())


def wl_hash(sg: SubGraph, config: WLConfig = WLConfig()) -> str:
    final = sorted(_wl_rounds(sg, config)[-1].values())
    return hashlib.sha256(canonical_json([config.label_mode, config.iterations, final]).encode()).hexdigest()


def function_similarity(a: SubGraph, b: SubGraph, config: WLConfig = WLConfig()) -> SimilarityScore:
    return SimilarityScore(multiset_jaccard(wl_labels(a, config), wl_labels(b, config)), "function")


# --- composability -------------------------------------------------------------


def composability(a: str, b: str, direction: str, kb) -> SimilarityScore:
    """Can entry ``a`` feed entry ``b``, judged from what the knowledge base
    already knows about their neighbours.

    upstream: is ``a`` like the known producers of ``b``.
    downstream: is ``b`` like the known consumers of ``a``.
    """
    if direction == "upstream":
        ea = kb.entry(a)
        best = 0.0
        for p in kb.producers_of(b):
            best = max(best, codomain_similarity(ea.codomain, kb.entry(p).codomain).value)
        return SimilarityScore(best, "codomain")
    if direction == "downstream":
        eb = kb.entry(b)
        best = 0.0
        for c in kb.consumers_of(a):
            best = max(best, domain_similarity(eb.domain, kb.entry(c).domain).value)
        return SimilarityScore(best, "domain")
    raise ValueError(f"unknown direction {direction!r}")
