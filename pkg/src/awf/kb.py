"""Workflow knowledge base.

A KB is a directory::

    manifest.json      format version, digest algorithm, thresholds
    entries.jsonl      sub-graph entries
    edges.jsonl        equivalence / producer-consumer / subgraph-of edges
    executions.jsonl   execution records
    samples.jsonl      surrogate accuracy samples
    objects/ab/cdef..  content-addressed output blobs
    write.lock         held by the single writer

Every jsonl line carries a short checksum of its record so a damaged line is
reported instead of silently skipped. Nothing is ever rewritten in place;
later lines supersede earlier ones with the same key.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import math
import os
import shutil
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from .equivalence import (
    DEFAULT_ALGORITHM,
    DescriptorSet,
    InterfaceHash,
    SubGraph,
    WLConfig,
    codomain_descriptors,
    codomain_similarity,
    composability,
    domain_descriptors,
    domain_similarity,
    file_digest,
    interface_hash,
    multiset_jaccard,
    wl_hash,
    wl_labels,
)
from .model import WorkflowDescription, canonical_json, node_to_dict

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
WL_MODES = ("name", "command")
EQUIVALENCE, PRODUCER_CONSUMER, SUBGRAPH_OF = "equivalence", "producer-consumer", "subgraph-of"
_BELOW_ONE = math.nextafter(1.0, 0.0)


class KBError(RuntimeError):
    pass


class KBCorruptionError(KBError):
    pass


class KBLockedError(KBError):
    pass


class UnknownEntryError(KBError, KeyError):
    pass


def _checksum(rec: dict) -> str:
    return hashlib.sha256(canonical_json(rec).encode("utf-8")).hexdigest()[:16]


@dataclass
class KBNodeEntry:
    id: str
    representation: dict
    source: dict = field(default_factory=dict)
    registered_at: float = 0.0

    @property
    def domain(self) -> DescriptorSet:
        return DescriptorSet("domain", frozenset(self.representation["domain"]))

    @property
    def codomain(self) -> DescriptorSet:
        return DescriptorSet("codomain", frozenset(self.representation["codomain"]))

    @property
    def interface_hashes(self) -> dict[str, str]:
        return self.representation["interface_hashes"]

    def wl_digest(self, mode: str) -> str:
        return self.representation["wl"][mode]

    def wl_label_multiset(self, mode: str) -> list[str]:
        return self.representation["wl_labels"][mode]

    @property
    def members(self) -> list[str]:
        return [n["name"] for n in self.representation["graph"]]


def representation_id(representation: dict) -> str:
    return hashlib.sha256(canonical_json(representation).encode("utf-8")).hexdigest()


def make_entry(
    wf: WorkflowDescription,
    nodes: Optional[Iterable[str]] = None,
    workflow_path: Optional[Union[str, Path]] = None,
    algorithm: str = DEFAULT_ALGORITHM,
    wl_iterations: int = 3,
) -> KBNodeEntry:
    sg = SubGraph.of(wf, nodes)
    cache: dict = {}
    hashes = {n: interface_hash(wf, n, algorithm=algorithm, cache=cache).digest for n in sg.members()}
    rep = {
        "interface_hashes": hashes,
        "wl": {m: wl_hash(sg, WLConfig(wl_iterations, m)) for m in WL_MODES},
        "wl_labels": {m: wl_labels(sg, WLConfig(wl_iterations, m)) for m in WL_MODES},
        "domain": sorted(domain_descriptors(sg).items),
        "codomain": sorted(codomain_descriptors(sg).items),
        "graph": [node_to_dict(wf.node(n)) for n in sg.members()],
    }
    source = {"workflow": wf.name, "nodes": sg.members()}
    if workflow_path is not None:
        path = Path(workflow_path)
        source["path"] = str(path.resolve())
        source["digest"] = file_digest(path, algorithm)
    return KBNodeEntry(representation_id(rep), rep, source, time.time())


@dataclass
class KBEdge:
    kind: str
    a: str
    b: str
    weights: dict
    metric: str = ""
    status: str = ""

    @property
    def key(self) -> tuple:
        return (self.kind, self.a, self.b, self.metric)


@dataclass
class ExecutionRecord:
    interface_hash: str
    workflow: str
    node: str
    started: float
    ended: float
    exit_code: int
    outputs: dict = field(default_factory=dict)
    platform: str = ""
    memoized: bool = False
    wall_seconds: float = 0.0
    attempts: int = 1
    run_id: str = ""
    algorithm: str = DEFAULT_ALGORITHM


@dataclass
class AccuracySample:
    binding: str
    physical_hash: str
    surrogate_hash: str
    error: float
    comparator: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.error >= 0:
            raise ValueError("accuracy sample error must be non-negative")


@dataclass(frozen=True)
class AccuracyStats:
    count: int
    mean: Optional[float]
    max: Optional[float]

    @property
    def defined(self) -> bool:
        return self.count > 0


class KnowledgeBase:
    """Single-writer, many-reader store. Open with ``readonly=True`` to skip
    the write lock."""

    def __init__(self, root: Union[str, Path], readonly: bool = False):
        self.root = Path(root)
        self.readonly = readonly
        manifest = self.root / "manifest.json"
        if not manifest.exists():
            raise KBError(f"{self.root} is not a knowledge base (no manifest.json)")
        try:
            self.manifest = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise KBCorruptionError(f"unreadable manifest: {e}") from None
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise KBError(f"unsupported KB format {self.manifest.get('format_version')!r}")
        self.algorithm = self.manifest["digest_algorithm"]
        self.threshold = float(self.manifest.get("hypothesis_threshold", 0.8))
        self.edge_floor = float(self.manifest.get("edge_floor", 0.1))
        self._lock = threading.RLock()
        self._lockfd: Optional[int] = None
        if not readonly:
            self._acquire()
        self._load()

    # -- lifecycle --------------------------------------------------------

    @classmethod
    def init(
        cls,
        root: Union[str, Path],
        algorithm: str = DEFAULT_ALGORITHM,
        hypothesis_threshold: float = 0.8,
        edge_floor: float = 0.1,
    ) -> "KnowledgeBase":
        root = Path(root)
        hashlib.new(algorithm)
        if hashlib.new(algorithm).digest_size * 8 != 256:
            raise KBError(f"digest algorithm {algorithm!r} is not 256-bit")
        root.mkdir(parents=True, exist_ok=True)
        manifest = root / "manifest.json"
        if not manifest.exists():
            manifest.write_text(
                json.dumps(
                    {
                        "format_version": FORMAT_VERSION,
                        "digest_algorithm": algorithm,
                        "hypothesis_threshold": hypothesis_threshold,
                        "edge_floor": edge_floor,
                        "created": time.time(),
                    },
                    indent=2,
                )
                + "\n",
                encoding="utf-8",
            )
        (root / "objects").mkdir(exist_ok=True)
        for name in ("entries", "edges", "executions", "samples"):
            (root / f"{name}.jsonl").touch()
        return cls(root)

    @classmethod
    def open_or_init(cls, root: Union[str, Path], **kw) -> "KnowledgeBase":
        if (Path(root) / "manifest.json").exists():
            return cls(root)
        return cls.init(root, **kw)

    def _acquire(self) -> None:
        fd = os.open(self.root / "write.lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise KBLockedError(f"{self.root} is locked by another writer") from None
        self._lockfd = fd

    def close(self) -> None:
        if self._lockfd is not None:
            fcntl.flock(self._lockfd, fcntl.LOCK_UN)
            os.close(self._lockfd)
            self._lockfd = None

    def __enter__(self) -> "KnowledgeBase":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    # -- persistence ------------------------------------------------------

    def _read(self, name: str) -> list[dict]:
        path = self.root / f"{name}.jsonl"
        out = []
        if not path.exists():
            return out
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    wrapped = json.loads(line)
                    rec = wrapped["rec"]
                    ok = wrapped["sum"] == _checksum(rec)
                except (json.JSONDecodeError, KeyError, TypeError):
                    ok = False
                if not ok:
                    raise KBCorruptionError(f"{path.name}:{lineno}: damaged record")
                out.append(rec)
        return out

    def _append(self, name: str, rec: dict) -> None:
        if self.readonly:
            raise KBError("knowledge base opened read-only")
        line = canonical_json({"rec": rec, "sum": _checksum(rec)})
        with open(self.root / f"{name}.jsonl", "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _load(self) -> None:
        self._entries: dict[str, KBNodeEntry] = {}
        self._edges: dict[tuple, KBEdge] = {}
        self._history: list[ExecutionRecord] = []
        self._authoritative: dict[str, ExecutionRecord] = {}
        self._samples: dict[str, list[AccuracySample]] = {}
        for rec in self._read("entries"):
            self._entries.setdefault(rec["id"], KBNodeEntry(**rec))
        for rec in self._read("edges"):
            e = KBEdge(**rec)
            self._edges[e.key] = e
        for rec in self._read("executions"):
            self._index_execution(ExecutionRecord(**rec))
        for rec in self._read("samples"):
            s = AccuracySample(**rec)
            self._samples.setdefault(s.binding, []).append(s)

    def refresh(self) -> None:
        with self._lock:
            self._load()

    def snapshot(self) -> dict:
        """Full in-memory state as plain data; equal before and after reload."""
        with self._lock:
            return {
                "entries": {k: asdict(v) for k, v in sorted(self._entries.items())},
                "edges": sorted((asdict(e) for e in self._edges.values()), key=canonical_json),
                "executions": [asdict(r) for r in self._history],
                "authoritative": {k: asdict(v) for k, v in sorted(self._authoritative.items())},
                "samples": {k: [asdict(s) for s in v] for k, v in sorted(self._samples.items())},
            }

    # -- entries ----------------------------------------------------------

    def register_subgraph(self, entry: KBNodeEntry) -> str:
        expected = representation_id(entry.representation)
        if entry.id != expected:
            raise KBError("entry id does not match its representation")
        for h in entry.interface_hashes.values():
            if len(h) != hashlib.new(self.algorithm).digest_size * 2:
                raise KBError("entry hashed with a different digest algorithm")
        with self._lock:
            if entry.id not in self._entries:
                self._append("entries", asdict(entry))
                self._entries[entry.id] = entry
        return entry.id

    def register(self, wf: WorkflowDescription, nodes=None, workflow_path=None) -> str:
        return self.register_subgraph(make_entry(wf, nodes, workflow_path, self.algorithm))

    def entry(self, entry_id: str) -> KBNodeEntry:
        try:
            return self._entries[entry_id]
        except KeyError:
            raise UnknownEntryError(entry_id) from None

    def entries(self) -> list[KBNodeEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def find_entry_by_wl(self, digest: str, mode: str = "command") -> list[str]:
        return sorted(e.id for e in self._entries.values() if e.wl_digest(mode) == digest)

    def same_block(self, entry_id: str) -> list[str]:
        """Entries functionally identical to ``entry_id`` (equal command-mode
        WL digest), itself included."""
        return self.find_entry_by_wl(self.entry(entry_id).wl_digest("command"), "command")

    # -- edges ------------------------------------------------------------

    def _put_edge(self, edge: KBEdge) -> bool:
        old = self._edges.get(edge.key)
        if old is not None and old.weights == edge.weights and old.status == edge.status:
            return False
        self._append("edges", asdict(edge))
        self._edges[edge.key] = edge
        return True

    def add_known_relation(self, producer: str, consumer: str) -> None:
        self.entry(producer), self.entry(consumer)
        with self._lock:
            self._put_edge(KBEdge(PRODUCER_CONSUMER, producer, consumer, {"w": 1.0}, "composability", "known"))

    def add_subgraph_of(self, part: str, whole: str) -> None:
        self.entry(part), self.entry(whole)
        with self._lock:
            self._put_edge(KBEdge(SUBGRAPH_OF, part, whole, {}, "membership"))

    def edges(self, kind: Optional[str] = None) -> list[KBEdge]:
        return sorted(
            (e for e in self._edges.values() if kind is None or e.kind == kind),
            key=lambda e: e.key,
        )

    def equivalence_edge(self, a: str, b: str, wl_mode: str = "name") -> Optional[KBEdge]:
        lo, hi = sorted((a, b))
        return self._edges.get((EQUIVALENCE, lo, hi, f"jaccard/wl-{wl_mode}"))

    def _relation(self, entry_id: str, producer_side: bool) -> list[str]:
        family = set(self.same_block(entry_id))
        out = set()
        for e in self._edges.values():
            if e.kind != PRODUCER_CONSUMER or e.status != "known":
                continue
            if producer_side and e.b in family:
                out.add(e.a)
            elif not producer_side and e.a in family:
                out.add(e.b)
        return sorted(out)

    def producers_of(self, entry_id: str) -> list[str]:
        """Known producers of this entry or any functionally identical one."""
        return self._relation(entry_id, producer_side=True)

    def consumers_of(self, entry_id: str) -> list[str]:
        return self._relation(entry_id, producer_side=False)

    def compute_edges(self, entries: Optional[Iterable[str]] = None) -> int:
        """Write pairwise equivalence edges (both WL label modes) and
        hypothesized producer-consumer edges. Returns edges written."""
        ids = sorted(set(entries)) if entries is not None else sorted(self._entries)
        written = 0
        with self._lock:
            for a, b in combinations(ids, 2):
                ea, eb = self.entry(a), self.entry(b)
                d = domain_similarity(ea.domain, eb.domain).value
                c = codomain_similarity(ea.codomain, eb.codomain).value
                for mode in WL_MODES:
                    f = multiset_jaccard(ea.wl_label_multiset(mode), eb.wl_label_multiset(mode))
                    if max(d, c, f) < self.edge_floor:
                        continue
                    w = {"d": d, "c": c, "f": f}
                    written += self._put_edge(KBEdge(EQUIVALENCE, a, b, w, f"jaccard/wl-{mode}"))
            known = {(e.a, e.b) for e in self._edges.values() if e.kind == PRODUCER_CONSUMER and e.status == "known"}
            for a in ids:
                for b in ids:
                    if a == b or (a, b) in known:
                        continue
                    score = max(
                        composability(a, b, "upstream", self).value,
                        composability(a, b, "downstream", self).value,
                    )
                    if score >= self.threshold:
                        w = {"w": min(score, _BELOW_ONE), "score": score}
                        written += self._put_edge(KBEdge(PRODUCER_CONSUMER, a, b, w, "composability", "hypothesized"))
        return written

    def find_equivalents(
        self,
        entry_id: str,
        metric: str = "f",
        threshold: float = 0.0,
        wl_mode: str = "name",
        include_self: bool = True,
    ) -> list[tuple[str, float]]:
        self.entry(entry_id)
        key = {"d": "d", "domain": "d", "c": "c", "codomain": "c", "f": "f", "function": "f"}[metric]
        tag = f"jaccard/wl-{wl_mode}"
        scores = {}
        for e in self._edges.values():
            if e.kind == EQUIVALENCE and e.metric == tag and entry_id in (e.a, e.b):
                other = e.b if e.a == entry_id else e.a
                scores[other] = e.weights[key]
        if include_self:
            scores[entry_id] = 1.0
        ranked = [(k, v) for k, v in scores.items() if v >= threshold]
        return sorted(ranked, key=lambda kv: (-kv[1], kv[0]))

    # -- executions and blobs --------------------------------------------

    def _index_execution(self, rec: ExecutionRecord) -> None:
        self._history.append(rec)
        if rec.exit_code == 0 and not rec.memoized:
            self._authoritative[rec.interface_hash] = rec

    def object_path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest[2:]

    def store_blob(self, path: Union[str, Path]) -> str:
        digest = file_digest(path, self.algorithm)
        target = self.object_path(digest)
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(f".{target.name}.{os.getpid()}.{threading.get_ident()}")
            shutil.copyfile(path, tmp)
            if file_digest(tmp, self.algorithm) != digest:
                tmp.unlink()
                raise KBCorruptionError(f"digest mismatch while storing {path}")
            os.replace(tmp, target)
        return digest

    def record_execution(self, record: ExecutionRecord, output_files: Mapping[str, Union[str, Path]] = None) -> dict[str, str]:
        """Copy output files into the object store and append the record.
        ``output_files`` maps output name to file path."""
        if record.algorithm != self.algorithm:
            raise KBError(f"record uses {record.algorithm}, KB uses {self.algorithm}")
        refs = {name: self.store_blob(p) for name, p in (output_files or {}).items()}
        record.outputs = {**record.outputs, **refs}
        with self._lock:
            self._append("executions", asdict(record))
            self._index_execution(record)
        return refs

    def lookup_execution(self, h: Union[str, InterfaceHash]) -> Optional[ExecutionRecord]:
        if isinstance(h, InterfaceHash):
            if h.algorithm != self.algorithm:
                raise KBError(f"hash uses {h.algorithm}, KB uses {self.algorithm}")
            h = h.digest
        return self._authoritative.get(h)

    def executions(self, h: Optional[str] = None) -> list[ExecutionRecord]:
        return [r for r in self._history if h is None or r.interface_hash == h]

    def mean_wall_seconds(self, h: str) -> Optional[float]:
        times = [r.wall_seconds for r in self._history if r.interface_hash == h and r.exit_code == 0 and not r.memoized]
        return statistics.fmean(times) if times else None

    def entry_wall_seconds(self, entry_id: str) -> Optional[float]:
        """Predicted wall time of a sub-graph: sum of per-node means. None if
        any member has never run."""
        total = 0.0
        for h in self.entry(entry_id).interface_hashes.values():
            m = self.mean_wall_seconds(h)
            if m is None:
                return None
            total += m
        return total

    def verify(self) -> list[str]:
        """Return object paths whose content no longer matches their name."""
        bad = []
        for path in sorted((self.root / "objects").glob("*/*")):
            if path.name.startswith("."):
                continue
            if file_digest(path, self.algorithm) != path.parent.name + path.name:
                bad.append(str(path))
        return bad

    # -- accuracy samples -------------------------------------------------

    def add_sample(self, sample: AccuracySample) -> None:
        with self._lock:
            self._append("samples", asdict(sample))
            self._samples.setdefault(sample.binding, []).append(sample)

    def samples(self, binding: str) -> list[AccuracySample]:
        return list(self._samples.get(binding, []))

    def accuracy_stats(self, binding: str) -> AccuracyStats:
        errors = [s.error for s in self._samples.get(binding, [])]
        if not errors:
            return AccuracyStats(0, None, None)
        return AccuracyStats(len(errors), statistics.fmean(errors), max(errors))

    def stats(self) -> dict:
        return {
            "entries": len(self._entries),
            "edges": {k: len(self.edges(k)) for k in (EQUIVALENCE, PRODUCER_CONSUMER, SUBGRAPH_OF)},
            "executions": len(self._history),
            "memoizable": len(self._authoritative),
            "samples": sum(len(v) for v in self._samples.values()),
            "objects": sum(1 for p in (self.root / "objects").glob("*/*") if not p.name.startswith(".")),
            "digest_algorithm": self.algorithm,
        }


def register_workflow(kb: KnowledgeBase, wf: WorkflowDescription, workflow_path=None) -> dict:
    """Register a workflow, its motif blocks, their known producer-consumer
    relations and sub-graph-of membership. Returns ids keyed by block id,
    plus ``"workflow"``."""
    from .factoring import motifs

    whole = kb.register(wf, None, workflow_path)
    blocks, quotient = motifs(wf)
    ids = {"workflow": whole}
    for b in blocks:
        ids[b.id] = kb.register(wf, b.members, workflow_path)
        if ids[b.id] != whole:
            kb.add_subgraph_of(ids[b.id], whole)
    for a, b in quotient.edges:
        kb.add_known_relation(ids[a], ids[b])
    return ids
