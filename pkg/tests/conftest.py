from __future__ import annotations

import json
from pathlib import Path

import pytest

from awf.kb import KnowledgeBase
from awf.model import from_dict

FIXTURES = Path(__file__).parent / "fixtures"
COMPOSITION = FIXTURES / "composition"


def ref(node, output, name=None):
    return {"name": name or output, "source": {"kind": "reference", "node": node, "output": output}}


def lit(path, name=None):
    return {"name": name or Path(path).name, "source": {"kind": "literal-file", "path": path}}


def param(key, name=None):
    return {"name": name or key, "source": {"kind": "parameter", "key": key}}


def node(name, exe="tool", args=(), inputs=(), outputs=("out.dat",), env=None, resources=None, annotations=None):
    return {
        "name": name,
        "command": {"executable": exe, "arguments": list(args), "environment": dict(env or {})},
        "inputs": list(inputs),
        "outputs": [{"name": o, "path": o} for o in outputs],
        "resources": dict(resources or {}),
        "annotations": dict(annotations or {}),
    }


def sh(name, script, inputs=(), outputs=("out.txt",), **kw):
    """A node running a shell snippet from its sandbox."""
    return node(name, "sh", ["-c", script], inputs, outputs, **kw)


def workflow(name, nodes, base_dir=".", parameters=None):
    return from_dict({"name": name, "parameters": dict(parameters or {}), "nodes": list(nodes)}, base_dir)


@pytest.fixture
def kb(tmp_path):
    k = KnowledgeBase.init(tmp_path / "kb")
    yield k
    k.close()


@pytest.fixture
def composition_manifest():
    return json.loads((COMPOSITION / "manifest.json").read_text())


ACCEPTANCE: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[acceptance {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
    print(line)
    ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
