"""awf: command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import __version__
from .equivalence import (
    SubGraph,
    WLConfig,
    codomain_descriptors,
    codomain_similarity,
    domain_descriptors,
    domain_similarity,
    function_similarity,
    hash_workflow,
)
from .factoring import boundary_schema, extract_block_workflow, factor, motifs
from .kb import KBError, KnowledgeBase, make_entry, register_workflow
from .model import (
    LiteralFile,
    ParameterLayer,
    WorkflowError,
    load_workflow,
    resolve_parameters,
    save_workflow,
    validate,
)
from .policy import (
    AdjudicationRule,
    CostFunction,
    PolicyError,
    SubstitutionPlan,
    apply_plan,
    evaluate_plan,
    run_agents,
    superintend,
)
from .runtime import (
    ExecuteOptions,
    adjudicated_run,
    canary_run,
    execute,
    load_bindings,
)
from .substitution import (
    Patch,
    PatchError,
    apply_patch,
    enumerate_compositions,
    extract_patch,
    identify_splice_points,
)

log = logging.getLogger("awf")


class Failure(Exception):
    """A domain-level failure: reported, exit status 1."""

    def __init__(self, message: str, payload: dict = None):
        super().__init__(message)
        self.payload = payload or {}


def _emit(args, payload: dict, human: str) -> None:
    if args.format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        print(human)


def _kb(args, readonly: bool = False, create: bool = False) -> KnowledgeBase:
    root = args.kb or os.environ.get("AWF_KB")
    if not root:
        raise Failure("no knowledge base given (use --kb or AWF_KB)")
    if create:
        return KnowledgeBase.open_or_init(root)
    return KnowledgeBase(root, readonly=readonly)


def _rule(args) -> AdjudicationRule:
    return AdjudicationRule(args.min_samples, args.statistic, args.tolerance)


def _add_rule_args(p) -> None:
    p.add_argument("--min-samples", type=int, default=10, help="canary samples needed before a surrogate is trusted")
    p.add_argument("--statistic", choices=("mean", "max"), default="max")
    p.add_argument("--tolerance", type=float, default=0.05)


def _literal_problems(wf) -> list[str]:
    problems = []
    for n in wf.nodes:
        for b in n.inputs:
            if isinstance(b.source, LiteralFile) and not wf.literal_path(b.source.path).is_file():
                problems.append(f"{n.name}: literal input {b.source.path!r} not found")
    return problems


# --- commands -----------------------------------------------------------------------


def cmd_validate(args) -> int:
    errors = []
    wf = None
    try:
        wf = load_workflow(args.workflow)
        layers = [ParameterLayer.load(p) for p in args.platform or []]
        resolve_parameters(wf, layers)
        errors = _literal_problems(wf)
    except WorkflowError as e:
        errors = [str(e)]
    payload = {"workflow": args.workflow, "valid": not errors, "errors": errors}
    if wf is not None:
        payload["nodes"] = len(wf.nodes)
    _emit(args, payload, "ok" if not errors else "\n".join(errors))
    return 0 if not errors else 1


def cmd_hash(args) -> int:
    wf = resolve_parameters(load_workflow(args.workflow))
    hashes = hash_workflow(wf, algorithm=args.algorithm)
    if args.node:
        hashes = {n: hashes[n] for n in args.node}
    _emit(
        args,
        {"algorithm": args.algorithm, "hashes": {k: v.digest for k, v in hashes.items()}},
        "\n".join(f"{v.digest}  {k}" for k, v in hashes.items()),
    )
    return 0


def cmd_similarity(args) -> int:
    a = resolve_parameters(load_workflow(args.a))
    b = resolve_parameters(load_workflow(args.b))
    sa, sb = SubGraph.of(a, args.nodes_a or None), SubGraph.of(b, args.nodes_b or None)
    cfg = WLConfig(args.iterations, args.wl_mode)
    scores = {
        "domain": domain_similarity(domain_descriptors(sa), domain_descriptors(sb)).value,
        "codomain": codomain_similarity(codomain_descriptors(sa), codomain_descriptors(sb)).value,
        "function": function_similarity(sa, sb, cfg).value,
    }
    if args.metric:
        _emit(args, {"metric": args.metric, "wl_mode": args.wl_mode, "score": scores[args.metric]},
              f"{scores[args.metric]:.4f}")
        return 0
    _emit(args, {"wl_mode": args.wl_mode, "iterations": args.iterations, **scores},
          "  ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    return 0


def cmd_factor(args) -> int:
    wf = load_workflow(args.workflow)
    blocks, quotient = factor(wf) if args.raw else motifs(wf)
    payload = {
        "workflow": wf.name,
        "blocks": [
            {"id": b.id, "members": list(b.members), "inputs": sorted(b.inputs.items), "outputs": sorted(b.outputs.items)}
            for b in blocks
        ],
        "edges": [list(e) for e in quotient.edges],
    }
    lines = [f"{b.id}  {' '.join(b.members)}" for b in blocks]
    lines += [f"{x} -> {y}" for x, y in quotient.edges]
    if args.output:
        out = Path(args.output)
        boundary = {}
        for b in blocks:
            _copy_with_data(extract_block_workflow(wf, b), out / b.id)
            boundary[b.id] = boundary_schema(wf, b)
        out.mkdir(parents=True, exist_ok=True)
        (out / "boundary.json").write_text(json.dumps(boundary, indent=2) + "\n", encoding="utf-8")
        payload["written"] = str(out)
        lines.append(f"{len(blocks)} blocks written to {out}")
    _emit(args, payload, "\n".join(lines))
    return 0


def _run_options(args) -> ExecuteOptions:
    kb = None
    if args.kb or os.environ.get("AWF_KB"):
        kb = args.kb or os.environ.get("AWF_KB")
    platform = ParameterLayer.load(args.platform) if args.platform else None
    return ExecuteOptions(
        kb=kb,
        memoize=not args.no_memo,
        restart_limit=args.restart_limit,
        max_parallel=args.max_parallel,
        platform=platform,
        run_root=args.run_root,
        run_id=args.run_id,
    )


def cmd_run(args) -> int:
    wf = load_workflow(args.workflow)
    options = _run_options(args)
    bindings = load_bindings(args.bindings) if args.bindings else []
    if args.adjudicate:
        if options.kb is None:
            raise Failure("--adjudicate needs a knowledge base")
        report = adjudicated_run(wf, bindings, _rule(args), options.kb, options)
    elif args.canary or bindings:
        report = canary_run(wf, bindings, options)
    else:
        report = execute(wf, options)
    lines = [f"{n:24s} {r.state:10s} {r.wall_seconds:8.2f}s  attempts={len(r.attempts)}" + (f"  {r.note}" if r.note else "")
             for n, r in report.nodes.items()]
    lines.append(f"run {report.run_id}: {'ok' if report.ok else 'FAILED'} in {report.wall_seconds:.2f}s, "
                 f"{report.memo_hits} memoized, report at {Path(report.run_dir) / 'report.json'}")
    _emit(args, report.as_dict(), "\n".join(lines))
    return 0 if report.ok else 1


def cmd_patch_extract(args) -> int:
    wf = load_workflow(args.workflow)
    kb = _kb(args, readonly=True) if (args.kb or os.environ.get("AWF_KB")) else None
    members = args.nodes
    if args.block:
        found = {b.id: b for b in motifs(wf)[0] + factor(wf)[0]}
        if args.block not in found:
            raise Failure(f"no block {args.block!r} in {wf.name}; see `awf factor`")
        members = found[args.block]
    patch = extract_patch(wf, members, kb, remove=args.remove or ())
    out = patch.save(args.output)
    _emit(args, {"patch": str(out), **patch.to_dict()}, f"patch written to {out}")
    return 0


def cmd_patch_apply(args) -> int:
    wf = load_workflow(args.workflow)
    patch = Patch.load(args.patch)
    if args.remove:
        patch = patch.with_removal(args.remove)
    splice = identify_splice_points(wf, patch, args.threshold, args.force)
    result, conflicts = apply_patch(wf, patch, splice, args.force)
    payload = {"splice": splice.as_dict(), "conflicts": [c.__dict__ for c in conflicts], "written": None}
    if conflicts and not args.force:
        lines = [f"conflict [{c.kind}] {c.locus}: {c.detail}" for c in conflicts]
        _emit(args, payload, "\n".join(lines))
        return 1
    save_workflow(result, args.output)
    payload["written"] = args.output
    _emit(args, payload, f"patched workflow written to {args.output}")
    return 0


def _copy_with_data(wf, directory: Path) -> Path:
    """Write ``wf`` into ``directory`` with every literal input copied next
    to it, so the candidate stands on its own."""
    directory.mkdir(parents=True, exist_ok=True)
    placed: dict[Path, str] = {}
    nodes = []
    for n in wf.nodes:
        inputs = []
        for b in n.inputs:
            if isinstance(b.source, LiteralFile):
                src = wf.literal_path(b.source.path).resolve()
                if not src.is_file():
                    # data arriving across a block boundary: supplied by whoever runs the block
                    inputs.append(b)
                    continue
                if src not in placed:
                    name, k = src.name, 1
                    while name in placed.values():
                        name, k = f"{k}_{src.name}", k + 1
                    shutil.copyfile(src, directory / name)
                    placed[src] = name
                b = replace(b, source=LiteralFile(placed[src]))
            inputs.append(b)
        nodes.append(replace(n, inputs=tuple(inputs)))
    return save_workflow(replace(wf, nodes=tuple(nodes), base_dir=directory), directory / "workflow.json")


def cmd_compose(args) -> int:
    paths = list(args.workflows)
    if args.library:
        paths += sorted(str(p) for p in Path(args.library).glob("*.json"))
    if not paths:
        raise Failure("no library workflows given (use --library DIR or list files)")
    library = []
    for p in paths:
        try:
            library.append(load_workflow(p))
        except WorkflowError as e:
            if not args.library:
                raise
            log.info("skipping %s: %s", p, e)
    out = Path(args.output)
    with tempfile.TemporaryDirectory() as scratch:
        # composability is judged from the library alone; the user's KB is untouched
        kb = KnowledgeBase.init(Path(scratch) / "kb")
        try:
            candidates = enumerate_compositions(library, kb, args.threshold, args.iterations)
        finally:
            kb.close()
    rows = []
    for c in candidates:
        path = _copy_with_data(c.workflow, out / c.workflow.name)
        rows.append({"name": c.workflow.name, "kind": c.kind, "digest": c.digest, "template": c.template,
                     "choice": list(c.choice), "path": str(path)})
    out.mkdir(parents=True, exist_ok=True)
    (out / "index.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    counts = {k: sum(r["kind"] == k for r in rows) for k in ("recombination", "standalone")}
    _emit(args, {"candidates": rows, "counts": counts, "total": len(rows)},
          "\n".join(f"{r['kind']:14s} {r['path']}" for r in rows) + f"\n{len(rows)} candidates")
    return 0


def cmd_propose(args) -> int:
    wf = load_workflow(args.workflow)
    costfn = CostFunction.load(args.objectives)
    kb = _kb(args, readonly=True)
    bindings = load_bindings(args.bindings) if args.bindings else []
    proposals = run_agents(wf, kb, costfn.weights, bindings=bindings, rule=_rule(args), threshold=args.threshold)
    plan = superintend(proposals, wf, kb, costfn, args.mode)
    cost = evaluate_plan(plan, wf, kb, costfn)
    data = {**plan.to_dict(), "cost": cost, "proposals": [p.id for p in proposals]}
    if args.output:
        Path(args.output).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    _emit(args, data, f"plan {plan.id} ({len(plan.substitutions)} substitutions) cost {cost:.4f}"
          + (f", written to {args.output}" if args.output else ""))
    return 0


def cmd_apply_plan(args) -> int:
    wf = load_workflow(args.workflow)
    plan = SubstitutionPlan.from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8")))
    kb = _kb(args, readonly=True)
    bindings = load_bindings(args.bindings) if args.bindings else []
    result, conflicts = apply_plan(wf, plan, kb, bindings, args.threshold, args.force)
    payload = {"plan": plan.id, "conflicts": [c.__dict__ for c in conflicts], "written": None}
    if conflicts and not args.force:
        _emit(args, payload, "\n".join(f"conflict [{c.kind}] {c.locus}: {c.detail}" for c in conflicts))
        return 1
    save_workflow(result, args.output)
    payload["written"] = args.output
    _emit(args, payload, f"workflow written to {args.output}")
    return 0


def cmd_kb_init(args) -> int:
    root = args.directory or args.kb or os.environ.get("AWF_KB")
    if not root:
        raise Failure("no knowledge base given (use a directory argument, --kb or AWF_KB)")
    kb = KnowledgeBase.init(root, algorithm=args.algorithm)
    kb.close()
    _emit(args, {"kb": str(Path(root).resolve()), "digest_algorithm": args.algorithm}, f"initialized {root}")
    return 0


def cmd_kb_register(args) -> int:
    with _kb(args, create=True) as kb:
        rows = []
        for path in args.workflows:
            wf = resolve_parameters(load_workflow(path))
            if args.nodes:
                ids = {"selection": kb.register_subgraph(make_entry(wf, args.nodes, path, kb.algorithm))}
            else:
                ids = register_workflow(kb, wf, path)
            rows.append({"workflow": path, "entries": ids})
        if args.edges:
            kb.compute_edges()
    _emit(args, {"registered": rows}, "\n".join(f"{r['workflow']}: {len(r['entries'])} entries" for r in rows))
    return 0


def cmd_kb_edges(args) -> int:
    if not args.recompute:
        kb = _kb(args, readonly=True)
        rows = [{"kind": e.kind, "a": e.a, "b": e.b, "metric": e.metric, "status": e.status, "weights": e.weights}
                for e in kb.edges()]
        _emit(args, {"edges": rows},
              "\n".join(f"{r['kind']:18s} {r['a'][:12]} {r['b'][:12]} {r['weights']}" for r in rows) or "no edges")
        return 0
    with _kb(args) as kb:
        written = kb.compute_edges()
        counts = kb.stats()["edges"]
    _emit(args, {"written": written, "edges": counts}, f"{written} edges written")
    return 0


def cmd_kb_query(args) -> int:
    kb = _kb(args, readonly=True)
    if args.hash:
        records = kb.executions(args.hash)
        best = kb.lookup_execution(args.hash)
        rows = [r.__dict__ for r in records]
        _emit(args, {"hash": args.hash, "executions": rows, "authoritative": best.__dict__ if best else None},
              "\n".join(f"{r.run_id or '-':28s} {r.node:20s} exit={r.exit_code} memoized={r.memoized} {r.platform}"
                        for r in records) or "no executions")
        return 0
    target = args.equivalent_to or args.target
    if not target:
        raise Failure("give --hash H, --equivalent-to ID or a workflow file")
    try:
        kb.entry(target)
        entry_id = target
    except KBError:
        if args.equivalent_to:
            raise
        wf = resolve_parameters(load_workflow(target))
        entry_id = make_entry(wf, args.nodes or None, algorithm=kb.algorithm).id
        kb.entry(entry_id)
    found = kb.find_equivalents(entry_id, args.metric, args.threshold, args.wl_mode, include_self=False)
    rows = [{"entry": e, "score": s, "source": kb.entry(e).source} for e, s in found]
    _emit(args, {"entry": entry_id, "metric": args.metric, "matches": rows},
          "\n".join(f"{r['score']:.4f}  {r['entry'][:16]}  {r['source'].get('workflow', '')}" for r in rows) or "no matches")
    return 0


def cmd_kb_stats(args) -> int:
    kb = _kb(args, readonly=True)
    stats = kb.stats()
    _emit(args, stats, "\n".join(f"{k}: {v}" for k, v in stats.items()))
    return 0


def cmd_kb_verify(args) -> int:
    kb = _kb(args, readonly=True)
    bad = kb.verify()
    _emit(args, {"corrupt": bad, "ok": not bad}, "ok" if not bad else "\n".join(f"corrupt: {p}" for p in bad))
    return 0 if not bad else 1


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--kb", default=argparse.SUPPRESS, help="knowledge base directory (default: $AWF_KB)")
    common.add_argument("--format", choices=("human", "json"), default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="awf", description="Workflow equivalence, memoization and substitution.",
                                     parents=[common])
    parser.add_argument("--version", action="version", version=f"awf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, fn, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(fn=fn)
        return p

    p = command("validate", cmd_validate, "check a workflow description")
    p.add_argument("workflow")
    p.add_argument("--platform", action="append", help="parameter layer to resolve against (repeatable)")

    p = command("run", cmd_run, "execute a workflow")
    p.add_argument("workflow")
    p.add_argument("--platform", help="platform parameter layer; its file stem is the platform tag")
    p.add_argument("--no-memo", action="store_true", help="never reuse recorded results")
    p.add_argument("--max-parallel", type=int, default=os.cpu_count() or 1)
    p.add_argument("--restart-limit", type=int, default=1, help="retries after a failing exit code")
    p.add_argument("--run-root", default="runs")
    p.add_argument("--run-id")
    p.add_argument("--bindings", help="surrogate bindings file")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--canary", action="store_true", help="shadow-run surrogates and record their error")
    mode.add_argument("--adjudicate", action="store_true", help="substitute surrogates the prior rule approves")
    _add_rule_args(p)

    p = command("hash", cmd_hash, "interface hash of every node")
    p.add_argument("workflow")
    p.add_argument("--node", action="append")
    p.add_argument("--algorithm", default="sha256")

    p = command("similarity", cmd_similarity, "domain, co-domain and function similarity")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--nodes-a", nargs="+")
    p.add_argument("--nodes-b", nargs="+")
    p.add_argument("--metric", choices=("domain", "codomain", "function"), help="print only this score")
    p.add_argument("--wl-mode", choices=("name", "command"), default="command")
    p.add_argument("--iterations", type=int, default=3)

    p = command("factor", cmd_factor, "partition a workflow into blocks")
    p.add_argument("workflow")
    p.add_argument("--raw", action="store_true",
                   help="report the bare leaf-signature classes, without folding leaf-only classes upstream")
    p.add_argument("-o", "--output", help="write each block as a standalone workflow, plus boundary.json")

    p = command("patch", None, "extract or apply graph patches")
    psub = p.add_subparsers(dest="patch_command", metavar="ACTION")
    psub.required = True
    q = psub.add_parser("extract", help="lift nodes out as a patch", parents=[common])
    q.set_defaults(fn=cmd_patch_extract)
    q.add_argument("workflow")
    which = q.add_mutually_exclusive_group(required=True)
    which.add_argument("--block", help="block id as printed by `awf factor`")
    which.add_argument("--nodes", nargs="+")
    q.add_argument("--remove", nargs="+", help="nodes the patch replaces in its target")
    q.add_argument("-o", "--output", required=True, help="patch directory")
    q = psub.add_parser("apply", help="splice a patch into a workflow", parents=[common])
    q.set_defaults(fn=cmd_patch_apply)
    q.add_argument("workflow")
    q.add_argument("patch")
    q.add_argument("--remove", nargs="+")
    q.add_argument("--threshold", type=float, default=0.8)
    q.add_argument("--force", action="store_true")
    q.add_argument("-o", "--output", required=True)

    p = command("compose", cmd_compose, "new workflows from a factored library")
    p.add_argument("workflows", nargs="*")
    p.add_argument("--library", help="directory of library workflows (*.json)")
    p.add_argument("-o", "--output", required=True, help="directory for the candidates")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--iterations", type=int, default=3)

    p = command("propose", cmd_propose, "choose a substitution plan")
    p.add_argument("workflow")
    p.add_argument("--objectives", required=True, help="objective weights file")
    p.add_argument("--mode", choices=("pick", "mix"), default="pick")
    p.add_argument("--bindings")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("-o", "--output")
    _add_rule_args(p)

    p = command("apply-plan", cmd_apply_plan, "apply a substitution plan")
    p.add_argument("workflow")
    p.add_argument("plan")
    p.add_argument("--bindings")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--force", action="store_true")
    p.add_argument("-o", "--output", required=True)

    p = command("kb", None, "knowledge base maintenance")
    ksub = p.add_subparsers(dest="kb_command", metavar="ACTION")
    ksub.required = True
    q = ksub.add_parser("init", help="create a knowledge base", parents=[common])
    q.set_defaults(fn=cmd_kb_init)
    q.add_argument("directory", nargs="?")
    q.add_argument("--algorithm", default="sha256")
    q = ksub.add_parser("register", help="register workflows and their blocks", parents=[common])
    q.set_defaults(fn=cmd_kb_register)
    q.add_argument("workflows", nargs="+")
    q.add_argument("--nodes", nargs="+", help="register only this sub-graph")
    q.add_argument("--edges", action="store_true", help="recompute edges afterwards")
    q = ksub.add_parser("edges", help="list (or --recompute) equivalence and composability edges", parents=[common])
    q.set_defaults(fn=cmd_kb_edges)
    q.add_argument("--recompute", action="store_true", help="recompute all edges (needs the write lock)")
    q = ksub.add_parser("query", help="entries equivalent to an entry or workflow", parents=[common])
    q.set_defaults(fn=cmd_kb_query)
    q.add_argument("target", nargs="?", help="entry id or workflow file")
    q.add_argument("--hash", help="list recorded executions of an interface hash")
    q.add_argument("--equivalent-to", help="entry id")
    q.add_argument("--nodes", nargs="+")
    q.add_argument("--metric", choices=("domain", "codomain", "function"), default="function")
    q.add_argument("--threshold", type=float, default=0.0)
    q.add_argument("--wl-mode", choices=("name", "command"), default="name")
    q = ksub.add_parser("stats", help="counts of entries, edges, records", parents=[common])
    q.set_defaults(fn=cmd_kb_stats)
    q = ksub.add_parser("verify", help="check object store integrity", parents=[common])
    q.set_defaults(fn=cmd_kb_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.kb = getattr(args, "kb", None)
    args.format = getattr(args, "format", "human")
    args.verbose = getattr(args, "verbose", 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (Failure, WorkflowError, KBError, PatchError, PolicyError, OSError) as e:
        payload = {"error": str(e), "type": type(e).__name__, **getattr(e, "payload", {})}
        if args.format == "json":
            print(json.dumps(payload, indent=2, sort_keys=True))
        else:
            print(f"awf: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
