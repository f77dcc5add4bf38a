"""Workflow description model: parsing, validation, parameter layering and
the functional-only view of a node used for hashing and equivalence."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from graphlib import CycleError as _GraphlibCycleError
from graphlib import TopologicalSorter
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Union

TOKEN_RE = re.compile(r"\{\{(ref|param):([^{}]+?)\}\}")

SOURCE_KINDS = ("literal-file", "parameter", "reference")


class WorkflowError(ValueError):
    """Base class for invalid workflow documents."""


class ParseError(WorkflowError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DuplicateNodeError(WorkflowError):
    pass


class UnresolvedReferenceError(WorkflowError):
    pass


class UndefinedParameterError(WorkflowError):
    def __init__(self, key: str, node: str):
        super().__init__(f"undefined parameter {key!r} used by node {node!r}")
        self.key = key
        self.node = node


class CycleError(WorkflowError):
    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


class UnknownNodeError(WorkflowError, KeyError):
    def __str__(self) -> str:
        return f"unknown node {self.args[0]!r}"


@dataclass(frozen=True)
class LiteralFile:
    path: str


@dataclass(frozen=True)
class Parameter:
    key: str


@dataclass(frozen=True)
class Reference:
    node: str
    output: str


Source = Union[LiteralFile, Parameter, Reference]


@dataclass(frozen=True)
class InputBinding:
    name: str
    source: Source


@dataclass(frozen=True)
class OutputDecl:
    name: str
    path: str


@dataclass(frozen=True)
class CommandSpec:
    executable: str
    arguments: tuple[str, ...] = ()
    environment: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ComponentNode:
    name: str
    command: CommandSpec
    inputs: tuple[InputBinding, ...] = ()
    outputs: tuple[OutputDecl, ...] = ()
    resources: Mapping[str, Any] = field(default_factory=dict)
    annotations: Mapping[str, Any] = field(default_factory=dict)

    def output(self, name: str) -> Optional[OutputDecl]:
        for o in self.outputs:
            if o.name == name:
                return o
        return None

    def references(self) -> Iterator[tuple[Reference, str]]:
        """Yield every reference this node makes, paired with the consuming
        input: a binding name or ``arg[i]`` for argument-embedded tokens."""
        for b in self.inputs:
            if isinstance(b.source, Reference):
                yield b.source, b.name
        for i, arg in enumerate(self.command.arguments):
            for kind, body in TOKEN_RE.findall(arg):
                if kind == "ref":
                    yield parse_ref_body(body), f"arg[{i}]"


@dataclass(frozen=True)
class ParameterLayer:
    name: str
    overrides: Mapping[str, str]

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParameterLayer":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise WorkflowError(f"parameter layer {path} must be a JSON object")
        return cls(path.stem, {str(k): str(v) for k, v in data.items()})


@dataclass(frozen=True)
class Edge:
    producer: str
    output: str
    consumer: str
    input: str


@dataclass(frozen=True)
class WorkflowDescription:
    name: str
    nodes: tuple[ComponentNode, ...]
    parameters: Mapping[str, str] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)
    # directory literal-file paths are relative to; not part of equality
    base_dir: Path = field(default=Path("."), compare=False)
    source_path: Optional[Path] = field(default=None, compare=False)

    @cached_property
    def node_map(self) -> dict[str, ComponentNode]:
        return {n.name: n for n in self.nodes}

    def node(self, name: str) -> ComponentNode:
        try:
            return self.node_map[name]
        except KeyError:
            raise UnknownNodeError(name) from None

    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def literal_path(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @cached_property
    def producers(self) -> dict[str, tuple[str, ...]]:
        """Distinct producer names per node, in first-reference order."""
        out = {}
        for n in self.nodes:
            seen: dict[str, None] = {}
            for ref, _ in n.references():
                seen.setdefault(ref.node)
            out[n.name] = tuple(seen)
        return out

    @cached_property
    def consumers(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for p in self.producers[n.name]:
                if p in out and n.name not in out[p]:
                    out[p].append(n.name)
        return {k: tuple(v) for k, v in out.items()}


def parse_ref_body(body: str) -> Reference:
    node, sep, output = body.partition("/")
    if not sep or not node or not output:
        raise WorkflowError(f"malformed reference token {{{{ref:{body}}}}}")
    return Reference(node, output)


# --- parsing -----------------------------------------------------------------


def _require(obj: Any, key: str, kind: type, where: str) -> Any:
    if key not in obj:
        raise WorkflowError(f"{where}: missing key {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise WorkflowError(f"{where}: {key!r} must be {kind.__name__}")
    return value


def _str_map(value: Any, where: str) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise WorkflowError(f"{where} must be an object")
    return {str(k): str(v) for k, v in value.items()}


def _parse_source(raw: Any, where: str) -> Source:
    if not isinstance(raw, dict):
        raise WorkflowError(f"{where}: source must be an object")
    kind = raw.get("kind")
    if kind == "literal-file":
        return LiteralFile(_require(raw, "path", str, where))
    if kind == "parameter":
        return Parameter(_require(raw, "key", str, where))
    if kind == "reference":
        return Reference(_require(raw, "node", str, where), _require(raw, "output", str, where))
    raise WorkflowError(f"{where}: unknown source kind {kind!r}")


def node_from_dict(raw: Any, index: int = 0) -> ComponentNode:
    where = f"nodes[{index}]"
    if not isinstance(raw, dict):
        raise WorkflowError(f"{where} must be an object")
    name = _require(raw, "name", str, where)
    where = f"node {name!r}"
    cmd = _require(raw, "command", dict, where)
    args = cmd.get("arguments", [])
    if not isinstance(args, list):
        raise WorkflowError(f"{where}: command.arguments must be a list")
    command = CommandSpec(
        executable=_require(cmd, "executable", str, where),
        arguments=tuple(str(a) for a in args),
        environment=_str_map(cmd.get("environment"), f"{where}: command.environment"),
    )
    inputs = []
    for i, b in enumerate(raw.get("inputs", [])):
        if not isinstance(b, dict):
            raise WorkflowError(f"{where}: inputs[{i}] must be an object")
        inputs.append(InputBinding(_require(b, "name", str, where), _parse_source(b.get("source"), where)))
    outputs = []
    for i, o in enumerate(raw.get("outputs", [])):
        if not isinstance(o, dict):
            raise WorkflowError(f"{where}: outputs[{i}] must be an object")
        outputs.append(OutputDecl(_require(o, "name", str, where), _require(o, "path", str, where)))
    resources = raw.get("resources") or {}
    annotations = raw.get("annotations") or {}
    if not isinstance(resources, dict) or not isinstance(annotations, dict):
        raise WorkflowError(f"{where}: resources and annotations must be objects")
    return ComponentNode(name, command, tuple(inputs), tuple(outputs), resources, annotations)


def from_dict(data: Any, base_dir: Union[str, Path] = ".") -> WorkflowDescription:
    if not isinstance(data, dict):
        raise WorkflowError("workflow document must be a JSON object")
    nodes = data.get("nodes")
    if not isinstance(nodes, list):
        raise WorkflowError("workflow document needs a 'nodes' list")
    wf = WorkflowDescription(
        name=str(data.get("name", "workflow")),
        nodes=tuple(node_from_dict(n, i) for i, n in enumerate(nodes)),
        parameters=_str_map(data.get("parameters"), "parameters"),
        metadata=_str_map(data.get("metadata"), "metadata"),
        base_dir=Path(base_dir),
    )
    validate(wf)
    return wf


def parse_workflow(document_text: str, base_dir: Union[str, Path] = ".") -> WorkflowDescription:
    try:
        data = json.loads(document_text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.lineno, e.colno) from None
    return from_dict(data, base_dir)


def load_workflow(path: Union[str, Path]) -> WorkflowDescription:
    path = Path(path)
    wf = parse_workflow(path.read_text(encoding="utf-8"), base_dir=path.parent.resolve())
    return replace(wf, source_path=path.resolve())


# --- serialization -----------------------------------------------------------


def _source_dict(src: Source) -> dict:
    if isinstance(src, LiteralFile):
        return {"kind": "literal-file", "path": src.path}
    if isinstance(src, Parameter):
        return {"kind": "parameter", "key": src.key}
    return {"kind": "reference", "node": src.node, "output": src.output}


def node_to_dict(n: ComponentNode) -> dict:
    return {
        "name": n.name,
        "command": {
            "executable": n.command.executable,
            "arguments": list(n.command.arguments),
            "environment": dict(n.command.environment),
        },
        "inputs": [{"name": b.name, "source": _source_dict(b.source)} for b in n.inputs],
        "outputs": [{"name": o.name, "path": o.path} for o in n.outputs],
        "resources": dict(n.resources),
        "annotations": dict(n.annotations),
    }


def to_dict(wf: WorkflowDescription) -> dict:
    return {
        "name": wf.name,
        "parameters": dict(wf.parameters),
        "nodes": [node_to_dict(n) for n in wf.nodes],
        "metadata": dict(wf.metadata),
    }


def canonical_json(obj: Any) -> str:
    """Sorted keys, no insignificant whitespace. Used for every digest."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def serialize(wf: WorkflowDescription, indent: Optional[int] = 2) -> str:
    return json.dumps(to_dict(wf), indent=indent, ensure_ascii=False)


def save_workflow(wf: WorkflowDescription, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(serialize(wf) + "\n", encoding="utf-8")
    return path


# --- validation --------------------------------------------------------------


def validate(wf: WorkflowDescription) -> None:
    """Raise a WorkflowError subclass unless every structural invariant holds."""
    seen: set[str] = set()
    for n in wf.nodes:
        if n.name in seen:
            raise DuplicateNodeError(f"duplicate node name {n.name!r}")
        seen.add(n.name)
        if "/" in n.name or not n.name:
            raise WorkflowError(f"invalid node name {n.name!r}")
        paths: set[str] = set()
        names: set[str] = set()
        for o in n.outputs:
            if Path(o.path).is_absolute() or ".." in Path(o.path).parts:
                raise WorkflowError(f"node {n.name!r}: output path {o.path!r} must be relative")
            if o.path in paths or o.name in names:
                raise WorkflowError(f"node {n.name!r}: duplicate output {o.name!r}")
            paths.add(o.path)
            names.add(o.name)
        bnames = [b.name for b in n.inputs]
        if len(set(bnames)) != len(bnames):
            raise WorkflowError(f"node {n.name!r}: duplicate input binding names")

    for n in wf.nodes:
        for ref, via in n.references():
            producer = wf.node_map.get(ref.node)
            if producer is None:
                raise UnresolvedReferenceError(
                    f"node {n.name!r} ({via}) references unknown node {ref.node!r}"
                )
            if producer.output(ref.output) is None:
                raise UnresolvedReferenceError(
                    f"node {n.name!r} ({via}) references undeclared output {ref.node}/{ref.output}"
                )
    topological_order(wf)


def topological_order(wf: WorkflowDescription) -> list[str]:
    """Deterministic topological order; ties follow declaration order."""
    ts = TopologicalSorter({n.name: wf.producers[n.name] for n in wf.nodes})
    position = {name: i for i, name in enumerate(wf.names())}
    try:
        ts.prepare()
    except _GraphlibCycleError as e:
        cycle = list(e.args[1])
        raise CycleError(cycle) from None
    order: list[str] = []
    while ts.is_active():
        ready = sorted(ts.get_ready(), key=position.__getitem__)
        order.extend(ready)
        ts.done(*ready)
    return order


def dependency_graph(wf: WorkflowDescription) -> list[Edge]:
    edges = []
    for n in wf.nodes:
        for ref, via in n.references():
            edges.append(Edge(ref.node, ref.output, n.name, via))
    return edges


# --- parameters --------------------------------------------------------------


def merged_parameters(wf: WorkflowDescription, layers: list[ParameterLayer] = ()) -> dict[str, str]:
    params = dict(wf.parameters)
    for layer in layers:
        params.update(layer.overrides)
    return params


def _substitute(text: str, params: Mapping[str, str], node: str) -> str:
    def sub(m: re.Match) -> str:
        if m.group(1) != "param":
            return m.group(0)
        key = m.group(2)
        if key not in params:
            raise UndefinedParameterError(key, node)
        return params[key]

    return TOKEN_RE.sub(sub, text)


def resolve_parameters(wf: WorkflowDescription, layers: list[ParameterLayer] = ()) -> WorkflowDescription:
    """Substitute every ``{{param:k}}`` token using base parameters overlaid
    by ``layers`` in order. Reference tokens are left alone."""
    params = merged_parameters(wf, layers)
    nodes = []
    for n in wf.nodes:
        for b in n.inputs:
            if isinstance(b.source, Parameter) and b.source.key not in params:
                raise UndefinedParameterError(b.source.key, n.name)
        cmd = replace(
            n.command,
            arguments=tuple(_substitute(a, params, n.name) for a in n.command.arguments),
            environment={k: _substitute(v, params, n.name) for k, v in n.command.environment.items()},
        )
        nodes.append(replace(n, command=cmd))
    return replace(wf, nodes=tuple(nodes), parameters=params)


def is_resolved(wf: WorkflowDescription) -> bool:
    for n in wf.nodes:
        for a in n.command.arguments:
            if any(kind == "param" for kind, _ in TOKEN_RE.findall(a)):
                return False
    return True


# --- abstract view -----------------------------------------------------------


@dataclass(frozen=True)
class AbstractNodeView:
    command: tuple
    inputs: tuple
    outputs: tuple

    def as_dict(self) -> dict:
        return {"command": list(self.command), "inputs": list(self.inputs), "outputs": list(self.outputs)}

    def canonical(self) -> str:
        return canonical_json(self.as_dict())


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def functional_env(node: ComponentNode) -> dict[str, str]:
    names = node.annotations.get("functional-env") or []
    return {k: v for k, v in node.command.environment.items() if k in names}


def abstract_view(wf: WorkflowDescription, node: str) -> AbstractNodeView:
    """Platform-independent view of ``node``: resources, annotations and
    non-functional environment variables dropped; parameter tokens resolved.

    Literal inputs are described by binding name only since the runtime
    materializes every input under its binding name; file content enters
    the interface hash separately.
    """
    n = wf.node(node)
    params = wf.parameters
    env = {k: _normalize_ws(_substitute(v, params, n.name)) for k, v in functional_env(n).items()}
    command = (
        n.command.executable.strip(),
        tuple(_normalize_ws(_substitute(a, params, n.name)) for a in n.command.arguments),
        tuple(sorted(env.items())),
    )
    inputs = []
    for b in n.inputs:
        src = b.source
        if isinstance(src, LiteralFile):
            inputs.append((b.name, "literal-file"))
        elif isinstance(src, Parameter):
            if src.key not in params:
                raise UndefinedParameterError(src.key, n.name)
            inputs.append((b.name, "parameter", params[src.key]))
        else:
            inputs.append((b.name, "reference", src.node, src.output))
    outputs = tuple((o.name, o.path) for o in n.outputs)
    return AbstractNodeView(command, tuple(inputs), outputs)
