"""Local execution: sandboxed processes, restarts, memoization and canaries."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import subprocess
import threading
import time
import uuid
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

from .equivalence import InterfaceHash, canonical_descriptor, file_digest, hash_workflow
from .kb import AccuracySample, ExecutionRecord, KBCorruptionError, KBError, KnowledgeBase
from .model import (
    TOKEN_RE,
    ComponentNode,
    LiteralFile,
    Parameter,
    ParameterLayer,
    Reference,
    WorkflowDescription,
    parse_ref_body,
    resolve_parameters,
    save_workflow,
    topological_order,
    validate,
)
from .substitution import Patch, apply_patch, identify_splice_points

log = logging.getLogger(__name__)

SUCCEEDED, FAILED, MEMOIZED, SKIPPED = "succeeded", "failed", "memoized", "skipped"
CANARY, SUBSTITUTE = "canary", "substitute"


@dataclass
class TaskAttempt:
    node: str
    attempt: int
    exit_code: int
    started: float
    ended: float
    sandbox: str

    @property
    def wall_seconds(self) -> float:
        return self.ended - self.started


@dataclass
class NodeResult:
    node: str
    state: str
    interface_hash: str = ""
    wall_seconds: float = 0.0
    attempts: list = field(default_factory=list)       # TaskAttempt
    outputs: dict = field(default_factory=dict)        # output name -> digest
    paths: dict = field(default_factory=dict)          # output name -> file
    memoized_from: Optional[dict] = None
    started: float = 0.0
    ended: float = 0.0
    note: str = ""

    @property
    def done(self) -> bool:
        return self.state in (SUCCEEDED, MEMOIZED)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["attempts"] = [asdict(a) for a in self.attempts]
        d["paths"] = {k: str(v) for k, v in self.paths.items()}
        return d


@dataclass
class RunReport:
    run_id: str
    workflow: str
    run_dir: str
    platform: str = ""
    started: float = 0.0
    ended: float = 0.0
    nodes: dict = field(default_factory=dict)          # name -> NodeResult
    substitutions: list = field(default_factory=list)
    samples: list = field(default_factory=list)        # AccuracySample
    warnings: list = field(default_factory=list)

    @property
    def wall_seconds(self) -> float:
        return self.ended - self.started

    @property
    def ok(self) -> bool:
        return all(r.done for r in self.nodes.values() if r.state != SKIPPED)

    @property
    def memo_hits(self) -> int:
        return sum(r.state == MEMOIZED for r in self.nodes.values())

    @property
    def attempt_count(self) -> int:
        return sum(len(r.attempts) for r in self.nodes.values())

    def outputs(self) -> dict:
        """Output digests of every completed node, keyed ``node/output``."""
        return {f"{n}/{k}": v for n, r in sorted(self.nodes.items()) for k, v in sorted(r.outputs.items())}

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "workflow": self.workflow,
            "run_dir": self.run_dir,
            "platform": self.platform,
            "started": self.started,
            "ended": self.ended,
            "wall_seconds": self.wall_seconds,
            "ok": self.ok,
            "memoization_hits": self.memo_hits,
            "attempts": self.attempt_count,
            "nodes": {k: v.as_dict() for k, v in self.nodes.items()},
            "substitutions": self.substitutions,
            "samples": [asdict(s) for s in self.samples],
            "warnings": self.warnings,
        }


@dataclass
class ExecuteOptions:
    kb: Union[KnowledgeBase, str, Path, None] = None
    memoize: bool = True
    restart_limit: int = 1
    max_parallel: int = 4
    platform: Optional[ParameterLayer] = None
    run_root: Union[str, Path] = "runs"
    run_id: Optional[str] = None

    def __post_init__(self):
        if self.restart_limit < 0:
            raise ValueError("restart limit cannot be negative")
        if self.max_parallel < 1:
            raise ValueError("max parallel must be at least 1")


# --- sandbox provisioning ----------------------------------------------------------


def _link_or_copy(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    if dst.exists() or dst.is_symlink():
        dst.unlink()
    try:
        os.link(src, dst)
    except OSError:
        shutil.copyfile(src, dst)


def materialize_inputs(wf: WorkflowDescription, node: ComponentNode, sandbox: Path, produced: dict) -> None:
    """Place every input binding at ``sandbox/<binding name>``.

    ``produced`` maps ``(node, output)`` to the file a producer left behind.
    """
    for b in node.inputs:
        dst = sandbox / b.name
        src = b.source
        if isinstance(src, LiteralFile):
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(wf.literal_path(src.path), dst)
        elif isinstance(src, Reference):
            _link_or_copy(Path(produced[(src.node, src.output)]), dst)
        elif isinstance(src, Parameter):
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_text(wf.parameters[src.key], encoding="utf-8")


def command_line(wf: WorkflowDescription, node: ComponentNode, produced: dict) -> list[str]:
    """Argument vector with reference tokens bound to producer output files."""

    def sub(m):
        if m.group(1) != "ref":
            return wf.parameters.get(m.group(2), m.group(0))
        ref = parse_ref_body(m.group(2))
        return str(Path(produced[(ref.node, ref.output)]).resolve())

    exe = node.command.executable
    local = wf.base_dir / exe
    if not os.path.isabs(exe) and ("/" in exe or os.sep in exe) and local.exists():
        exe = str(local.resolve())
    return [exe] + [TOKEN_RE.sub(sub, a) for a in node.command.arguments]


def run_attempt(wf: WorkflowDescription, node: ComponentNode, sandbox: Path, produced: dict, attempt: int) -> TaskAttempt:
    if sandbox.exists():
        shutil.rmtree(sandbox)
    sandbox.mkdir(parents=True)
    started = time.time()
    try:
        materialize_inputs(wf, node, sandbox, produced)
        argv = command_line(wf, node, produced)
        env = {**os.environ, **node.command.environment}
        with open(sandbox / "stdout.log", "wb") as out, open(sandbox / "stderr.log", "wb") as err:
            code = subprocess.run(argv, cwd=sandbox, env=env, stdout=out, stderr=err, stdin=subprocess.DEVNULL).returncode
    except OSError as e:
        (sandbox / "stderr.log").write_text(f"cannot launch task: {e}\n", encoding="utf-8")
        code = 127
    return TaskAttempt(node.name, attempt, code, started, time.time(), str(sandbox))


def restore_outputs(record: ExecutionRecord, node: ComponentNode, sandbox: Path, kb: KnowledgeBase) -> dict:
    """Copy a recorded execution's outputs out of the object store.

    Returns output name -> restored path. A missing blob raises
    FileNotFoundError so the caller can fall back to running the task; a blob
    whose content does not match its digest raises KBCorruptionError.
    """
    sandbox.mkdir(parents=True, exist_ok=True)
    restored = {}
    for o in node.outputs:
        digest = record.outputs.get(o.name)
        if digest is None:
            raise FileNotFoundError(f"record lacks output {o.name!r}")
        blob = kb.object_path(digest)
        if not blob.exists():
            raise FileNotFoundError(f"object {digest} missing from the store")
        dst = sandbox / o.path
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(blob, dst)
        if file_digest(dst, kb.algorithm) != digest:
            raise KBCorruptionError(f"object {digest} does not match its digest")
        restored[o.name] = dst
    return restored


def memoize_check(wf: WorkflowDescription, node: str, kb: Optional[KnowledgeBase], hashes: Optional[dict] = None) -> Optional[ExecutionRecord]:
    """The authoritative record for ``node``'s interface hash, or None.
    The platform a record was produced on plays no part."""
    if kb is None:
        return None
    try:
        h = (hashes or {}).get(node)
        if h is None:
            h = hash_workflow(wf, algorithm=kb.algorithm)[node]
        return kb.lookup_execution(h)
    except (KBError, OSError, ValueError) as e:
        log.warning("memoization lookup for %s failed: %s", node, e)
        return None


def _open_kb(kb) -> Optional[KnowledgeBase]:
    if kb is None or isinstance(kb, KnowledgeBase):
        return kb
    return KnowledgeBase.open_or_init(kb)


class _Runner:
    """Schedules one workflow. Worker threads only touch their own sandboxes;
    the report and the produced-file map are mutated on the calling thread."""

    def __init__(self, wf: WorkflowDescription, options: ExecuteOptions):
        layers = [options.platform] if options.platform else []
        self.wf = resolve_parameters(wf, layers)
        validate(self.wf)
        self.options = options
        self.platform = options.platform.name if options.platform else ""
        run_id = options.run_id or time.strftime("%Y%m%dT%H%M%S") + "-" + uuid.uuid4().hex[:8]
        self.run_dir = Path(options.run_root).resolve() / run_id
        self.run_dir.mkdir(parents=True, exist_ok=False)
        self.report = RunReport(run_id, wf.name, str(self.run_dir), self.platform)
        self.kb = None
        if options.kb is not None:
            try:
                self.kb = _open_kb(options.kb)
            except KBError as e:
                msg = f"knowledge base unavailable, running without memoization: {e}"
                log.warning(msg)
                self.report.warnings.append(msg)
        self.memoize = options.memoize and self.kb is not None
        algorithm = self.kb.algorithm if self.kb else "sha256"
        self.hashes: dict[str, InterfaceHash] = hash_workflow(self.wf, algorithm=algorithm)
        self.produced: dict[tuple[str, str], Path] = {}
        self.kb_lock = threading.Lock()

    # -- one node, on a worker thread -----------------------------------------

    def _try_memoized(self, node: ComponentNode, result: NodeResult) -> bool:
        record = memoize_check(self.wf, node.name, self.kb, self.hashes) if self.memoize else None
        if record is None:
            return False
        try:
            paths = restore_outputs(record, node, self.run_dir / node.name / "memoized", self.kb)
        except FileNotFoundError as e:
            result.note = f"degraded memoization hit, re-executing: {e}"
            return False
        result.state = MEMOIZED
        result.paths = paths
        result.outputs = {k: record.outputs[k] for k in paths}
        result.memoized_from = {
            "run_id": record.run_id,
            "workflow": record.workflow,
            "node": record.node,
            "interface_hash": record.interface_hash,
            "platform": record.platform,
        }
        with self.kb_lock:
            self.kb.record_execution(
                ExecutionRecord(
                    result.interface_hash, self.wf.name, node.name, result.started, time.time(), 0,
                    outputs=dict(result.outputs), platform=self.platform, memoized=True, attempts=0,
                    run_id=self.report.run_id, algorithm=self.kb.algorithm,
                )
            )
        return True

    def _run_node(self, name: str) -> NodeResult:
        node = self.wf.node(name)
        result = NodeResult(name, FAILED, self.hashes[name].digest, started=time.time())
        if not self._try_memoized(node, result):
            for attempt in range(self.options.restart_limit + 1):
                sandbox = self.run_dir / name / str(attempt)
                a = run_attempt(self.wf, node, sandbox, self.produced, attempt)
                result.attempts.append(a)
                if a.exit_code != 0:
                    continue
                missing = [o.path for o in node.outputs if not (sandbox / o.path).is_file()]
                if missing:
                    result.note = f"task exited 0 but did not write {', '.join(missing)}"
                    break
                result.state = SUCCEEDED
                result.paths = {o.name: sandbox / o.path for o in node.outputs}
                break
            if result.state == SUCCEEDED:
                self._record(node, result)
            elif result.attempts and not result.note:
                last = result.attempts[-1]
                result.note = f"exit code {last.exit_code}; logs in {last.sandbox}"
        result.ended = time.time()
        result.wall_seconds = result.ended - result.started
        return result

    def _record(self, node: ComponentNode, result: NodeResult) -> None:
        if self.kb is None:
            result.outputs = {k: file_digest(p) for k, p in result.paths.items()}
            return
        last = result.attempts[-1]
        rec = ExecutionRecord(
            result.interface_hash, self.wf.name, node.name, last.started, last.ended, 0,
            platform=self.platform, wall_seconds=last.wall_seconds, attempts=len(result.attempts),
            run_id=self.report.run_id, algorithm=self.kb.algorithm,
        )
        with self.kb_lock:
            result.outputs = self.kb.record_execution(rec, result.paths)

    # -- scheduling, on the calling thread -------------------------------------

    def _skip_downstream(self, name: str, pending: set) -> None:
        stack = list(self.wf.consumers[name])
        while stack:
            c = stack.pop()
            if c in pending:
                pending.discard(c)
                self.report.nodes[c] = NodeResult(c, SKIPPED, self.hashes[c].digest, note=f"upstream {name} failed")
                stack.extend(self.wf.consumers[c])

    def run(self) -> RunReport:
        self.report.started = time.time()
        order = topological_order(self.wf)
        pending = set(order)
        running = {}
        with ThreadPoolExecutor(max_workers=self.options.max_parallel) as pool:
            while pending or running:
                for name in order:
                    if len(running) >= self.options.max_parallel:
                        break
                    if name in pending and all(
                        p in self.report.nodes and self.report.nodes[p].done for p in self.wf.producers[name]
                    ):
                        pending.discard(name)
                        running[pool.submit(self._run_node, name)] = name
                if not running:
                    break
                finished, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in finished:
                    name = running.pop(fut)
                    result = fut.result()
                    self.report.nodes[name] = result
                    if result.done:
                        for k, p in result.paths.items():
                            self.produced[(name, k)] = p
                    else:
                        self._skip_downstream(name, pending)
        self.report.ended = time.time()
        self.report.nodes = {n: self.report.nodes[n] for n in order if n in self.report.nodes}
        self._write()
        return self.report

    def _write(self) -> None:
        nodes = []
        for n in self.wf.nodes:
            r = self.report.nodes.get(n.name)
            if r is not None and r.memoized_from:
                n = replace(n, annotations={**n.annotations, "memoized-from": r.memoized_from})
            nodes.append(n)
        save_workflow(replace(self.wf, nodes=tuple(nodes)), self.run_dir / "workflow.json")
        (self.run_dir / "report.json").write_text(json.dumps(self.report.as_dict(), indent=2) + "\n", encoding="utf-8")


def execute(wf: WorkflowDescription, options: Optional[ExecuteOptions] = None) -> RunReport:
    """Run ``wf`` as local processes and return the report.

    Independent nodes run concurrently up to ``max_parallel``. With a
    knowledge base and ``memoize`` on, nodes whose interface hash has an
    authoritative record are restored instead of run.
    """
    return _Runner(wf, options or ExecuteOptions()).run()


# --- surrogates ------------------------------------------------------------------


@dataclass
class SurrogateBinding:
    """Declares that ``patch`` may stand in for the ``physical`` nodes.

    ``comparator`` is a command that receives two directories (physical
    outputs, surrogate outputs) as its last arguments and prints one
    non-negative number.
    """

    id: str
    physical: frozenset
    patch: Patch
    comparator: tuple = ()
    mode: str = CANARY

    def __post_init__(self):
        if self.mode not in (CANARY, SUBSTITUTE):
            raise ValueError(f"unknown binding mode {self.mode!r}")
        self.physical = frozenset(self.physical)
        self.comparator = tuple(self.comparator)

    def splice(self, wf: WorkflowDescription, threshold: float = 0.8):
        patch = self.patch.with_removal(sorted(self.physical))
        return patch, identify_splice_points(wf, patch, threshold)


def load_bindings(path: Union[str, Path]) -> list[SurrogateBinding]:
    """Read a bindings file: a JSON list of objects with ``id``,
    ``physical`` (node names), ``patch`` (patch directory, relative to the
    file), ``comparator`` (argument list) and optional ``mode``."""
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for item in raw:
        out.append(
            SurrogateBinding(
                str(item["id"]),
                frozenset(item["physical"]),
                Patch.load(path.parent / item["patch"]),
                tuple(item.get("comparator", ())),
                item.get("mode", CANARY),
            )
        )
    return out


def _shadow_workflow(wf: WorkflowDescription, patched: WorkflowDescription, report: RunReport, removal) -> WorkflowDescription:
    """The patch nodes of ``patched`` alone, with every boundary reference
    replaced by the file the physical run produced."""
    retained = set(wf.names()) - set(removal)
    inserted = [n for n in patched.nodes if n.name not in retained]
    names = {n.name for n in inserted}

    def produced(node, output) -> str:
        return str(Path(report.nodes[node].paths[output]).resolve())

    nodes = []
    for n in inserted:
        inputs = []
        for b in n.inputs:
            if isinstance(b.source, Reference) and b.source.node not in names:
                b = replace(b, source=LiteralFile(produced(b.source.node, b.source.output)))
            inputs.append(b)

        def sub(m):
            if m.group(1) != "ref":
                return m.group(0)
            ref = parse_ref_body(m.group(2))
            return m.group(0) if ref.node in names else produced(ref.node, ref.output)

        args = tuple(TOKEN_RE.sub(sub, a) for a in n.command.arguments)
        nodes.append(replace(n, inputs=tuple(inputs), command=replace(n.command, arguments=args)))
    return replace(patched, name=f"{wf.name}.shadow", nodes=tuple(nodes))


def _compare(binding: SurrogateBinding, patch: Patch, report: RunReport, shadow: RunReport, renamed: dict, wf: WorkflowDescription, workdir: Path) -> float:
    phys_dir, surr_dir = workdir / "physical", workdir / "surrogate"
    phys_dir.mkdir(parents=True, exist_ok=True)
    surr_dir.mkdir(parents=True, exist_ok=True)
    for po in patch.outputs:
        for name in sorted(binding.physical):
            for o in wf.node(name).outputs:
                if canonical_descriptor(o.name) == po.descriptor:
                    _link_or_copy(Path(report.nodes[name].paths[o.name]), phys_dir / po.descriptor)
        r = shadow.nodes[renamed[po.node]]
        _link_or_copy(Path(r.paths[po.output]), surr_dir / po.descriptor)
    proc = subprocess.run(
        list(binding.comparator) + [str(phys_dir), str(surr_dir)],
        cwd=wf.base_dir, capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise ValueError(f"comparator exited {proc.returncode}: {proc.stderr.strip()}")
    value = float(proc.stdout.strip())
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"comparator printed {value}, expected a non-negative number")
    return value


def canary_run(wf: WorkflowDescription, bindings: list[SurrogateBinding], options: Optional[ExecuteOptions] = None) -> RunReport:
    """Run the physical workflow, then shadow-run each canary surrogate on
    the same inputs and record how far its outputs are from the physical
    ones. Nothing the surrogates do can change the physical results."""
    options = options or ExecuteOptions()
    try:
        kb = _open_kb(options.kb)
    except KBError as e:
        log.warning("knowledge base unavailable, canary samples will not be kept: %s", e)
        kb = None
    options = replace(options, kb=kb)
    report = execute(wf, options)
    runner_wf = resolve_parameters(wf, [options.platform] if options.platform else [])
    for binding in bindings:
        if binding.mode != CANARY:
            continue
        try:
            _canary_one(runner_wf, binding, report, options, kb)
        except Exception as e:  # a surrogate must never fail the run
            msg = f"canary {binding.id}: {e}"
            log.warning(msg)
            report.warnings.append(msg)
    Path(report.run_dir, "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    return report


def _canary_one(wf, binding, report, options, kb) -> None:
    patch, splice = binding.splice(wf)
    if splice.conflicts:
        raise ValueError("patch does not splice: " + "; ".join(c.detail for c in splice.conflicts))
    if not all(report.nodes.get(n) and report.nodes[n].done for n in binding.physical):
        raise ValueError("physical block did not complete")
    patched, conflicts = apply_patch(wf, patch, splice)
    if conflicts:
        raise ValueError("patch does not apply: " + "; ".join(c.detail for c in conflicts))
    needed = {r.node for n in patched.nodes for r, _ in n.references()}
    missing = [n for n in needed if n in report.nodes and not report.nodes[n].done]
    if missing:
        raise ValueError(f"physical inputs missing: {missing}")
    shadow = _shadow_workflow(wf, patched, report, splice.removal)
    workdir = Path(report.run_dir) / "canary" / binding.id
    shadow_report = execute(
        shadow,
        replace(options, kb=kb, memoize=False, run_root=workdir, run_id="shadow", platform=None),
    )
    if not shadow_report.ok:
        raise ValueError("surrogate failed")
    renamed = dict(zip((n.name for n in patch.nodes), shadow.names()))
    error = _compare(binding, patch, report, shadow_report, renamed, wf, workdir / "compare")
    sample = AccuracySample(
        binding.id,
        ",".join(sorted(report.nodes[n].interface_hash for n in binding.physical)),
        ",".join(sorted(r.interface_hash for r in shadow_report.nodes.values())),
        error,
        " ".join(binding.comparator),
        time.time(),
    )
    if kb is not None:
        kb.add_sample(sample)
    report.samples.append(sample)


def adjudicated_run(wf: WorkflowDescription, bindings: list[SurrogateBinding], rule, kb, options: Optional[ExecuteOptions] = None) -> RunReport:
    """Apply every surrogate the prior rule approves before running; the
    rest run physically, as canaries when so configured."""
    from .policy import prior_adjudicate

    kb = _open_kb(kb)
    options = replace(options or ExecuteOptions(), kb=kb)
    current = resolve_parameters(wf, [options.platform] if options.platform else [])
    substitutions, warnings, remaining = [], [], []
    used: set = set()
    for binding in bindings:
        decision = prior_adjudicate(binding, kb, rule)
        if not decision.approved:
            remaining.append(binding)
            warnings.append(f"{binding.id}: physical ({decision.reason})")
            continue
        if binding.physical & used:
            remaining.append(binding)
            warnings.append(f"{binding.id}: overlaps an applied surrogate")
            continue
        patch, splice = binding.splice(current)
        patched, conflicts = apply_patch(current, patch, splice)
        if conflicts:
            remaining.append(binding)
            warnings.append(f"{binding.id}: patch conflict, running physical: " + "; ".join(c.detail for c in conflicts))
            continue
        current = patched
        used |= binding.physical
        substitutions.append({"binding": binding.id, "removed": sorted(splice.removal), "reason": decision.reason})
    for w in warnings:
        log.warning(w)
    report = canary_run(current, remaining, options) if any(b.mode == CANARY for b in remaining) else execute(current, options)
    report.substitutions.extend(substitutions)
    report.warnings.extend(warnings)
    Path(report.run_dir, "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    return report
