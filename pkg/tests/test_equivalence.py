import hashlib
import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awf.equivalence import (
    DescriptorSet,
    InputUnreadableError,
    SubGraph,
    WLConfig,
    canonical_descriptor,
    codomain_descriptors,
    codomain_from_consumers,
    codomain_similarity,
    composability,
    domain_descriptors,
    domain_similarity,
    file_digest,
    function_similarity,
    hash_payload,
    hash_workflow,
    interface_hash,
    jaccard,
    multiset_jaccard,
    wl_hash,
    wl_labels,
)
from awf.model import canonical_json, dependency_graph, from_dict, serialize

from conftest import lit, node, ref, workflow


@pytest.fixture
def chain(tmp_path):
    (tmp_path / "seed.txt").write_bytes(b"seed-0")
    return workflow(
        "chain",
        [
            node("a", "gen", ["--n", "3"], [lit("seed.txt")], resources={"queue": "short"}),
            node("b", "step", ["{{ref:a/out.dat}}"], [ref("a", "out.dat")]),
            node("c", "step", ["-x"], [ref("b", "out.dat")]),
        ],
        base_dir=tmp_path,
    )


def test_hash_is_deterministic(chain):
    assert interface_hash(chain, "c") == interface_hash(chain, "c")
    assert len(interface_hash(chain, "c").digest) == 64


def test_resources_and_restarts_do_not_matter(chain):
    before = hash_workflow(chain)
    data = json.loads(serialize(chain))
    data["nodes"][0]["resources"] = {"queue": "long", "restarts": 3}
    data["nodes"][2]["annotations"] = {"attempts": 3}
    after = hash_workflow(from_dict(data, chain.base_dir))
    assert before == after


def test_literal_byte_flip(chain):
    seed = chain.base_dir / "seed.txt"
    digests_before = {"seed.txt": file_digest(seed)}
    before_payload = hash_payload(chain, "a", {}, digests_before)
    before = hash_workflow(chain)
    seed.write_bytes(b"seed-1")
    after_payload = hash_payload(chain, "a", {}, {"seed.txt": file_digest(seed)})
    after = hash_workflow(chain)
    # oracle: the serializations themselves differ, so must the digests
    assert canonical_json(before_payload) != canonical_json(after_payload)
    assert all(before[n] != after[n] for n in "abc")


def test_upstream_change_propagates(chain):
    data = json.loads(serialize(chain))
    data["nodes"][0]["command"]["arguments"] = ["--n", "4"]
    other = hash_workflow(from_dict(data, chain.base_dir))
    base = hash_workflow(chain)
    assert all(base[n] != other[n] for n in "abc")


def test_node_names_are_not_functional(chain):
    data = json.loads(serialize(chain).replace('"b"', '"renamed"').replace("{{ref:b/", "{{ref:renamed/"))
    other = hash_workflow(from_dict(data, chain.base_dir))
    assert other["c"] == hash_workflow(chain)["c"]


def test_unreadable_literal(tmp_path):
    wf = workflow("w", [node("a", inputs=[lit("missing.txt")])], base_dir=tmp_path)
    with pytest.raises(InputUnreadableError):
        interface_hash(wf, "a")
    assert interface_hash(wf, "a", {"missing.txt": "0" * 64}).digest


def test_long_chain_has_no_recursion_limit(tmp_path):
    nodes = [node("n0")] + [node(f"n{i}", inputs=[ref(f"n{i-1}", "out.dat")]) for i in range(1, 3000)]
    wf = workflow("long", nodes, base_dir=tmp_path)
    assert interface_hash(wf, "n2999").digest


# --- set similarity --------------------------------------------------------------


def test_jaccard_examples():
    assert domain_similarity({"a", "b"}, {"a", "b"}).value == 1.0
    assert domain_similarity({"a"}, {"b"}).value == 0.0
    assert domain_similarity({"a", "b", "c"}, {"b", "c", "d"}).value == 0.5
    assert domain_similarity(set(), set()).value == 1.0
    assert codomain_similarity(set(), {"x"}).value == 0.0
    assert codomain_similarity({"x"}, {"x"}).metric == "codomain"


def test_descriptor_canonicalization():
    assert canonical_descriptor("Data/Sub/OUT.Dat") == "out.dat"
    assert canonical_descriptor("C:\\runs\\a.XYZ") == "a.xyz"
    assert DescriptorSet.of("domain", ["A.txt", "a.txt", "x/a.txt"]).items == {"a.txt"}


def test_codomain_from_consumer_references():
    wf = workflow(
        "w",
        [
            node("p", outputs=["energy.dat", "geom.xyz"]),
            node("q", args=["{{ref:p/geom.xyz}}"], inputs=[ref("p", "energy.dat")]),
        ],
    )
    sg = SubGraph.of(wf, ["p"])
    direct, indirect = codomain_descriptors(sg), codomain_from_consumers(sg)
    assert direct == indirect
    for third in ({"energy.dat"}, {"geom.xyz", "x"}, set()):
        assert codomain_similarity(direct, third) == codomain_similarity(indirect, third)


def test_domain_excludes_internal_edges():
    wf = workflow("w", [node("a", inputs=[lit("in.txt")]), node("b", inputs=[ref("a", "out.dat")])])
    assert domain_descriptors(SubGraph.of(wf)).items == {"in.txt"}
    assert domain_descriptors(SubGraph.of(wf, ["b"])).items == {"out.dat"}


# --- WL -------------------------------------------------------------------------------


def _blake(text):
    return hashlib.blake2b(text.encode(), digest_size=16).hexdigest()


def test_single_node_labels_by_hand():
    a = workflow("a", [node("x", "tool", ["-a"])])
    b = workflow("b", [node("x", "tool", ["-b"])])
    cfg = WLConfig(2, "command")

    def expected(arg):
        labels = [_blake("0:" + canonical_json(["tool", [arg], []]))]
        for _ in range(2):
            labels.append(_blake(labels[-1] + "|in:|out:"))
        return sorted(labels)

    assert wl_labels(SubGraph.of(a), cfg) == expected("-a")
    assert wl_labels(SubGraph.of(b), cfg) == expected("-b")
    assert function_similarity(SubGraph.of(a), SubGraph.of(b), cfg).value == multiset_jaccard(expected("-a"), expected("-b"))
    assert function_similarity(SubGraph.of(a), SubGraph.of(b), cfg).value < 1.0


def _pipeline(names, tail_arg="-q"):
    a, b, c = names
    return workflow(
        "p",
        [
            node(a, "gen", ["-n"], [lit("in.txt")]),
            node(b, "mid", ["{{ref:%s/out.dat}}" % a]),
            node(c, "end", [tail_arg], [ref(b, "out.dat")]),
        ],
    )


def test_command_mode_ignores_names():
    one, two = _pipeline("abc"), _pipeline(["x1", "x2", "x3"])
    cfg = WLConfig(3, "command")
    assert wl_hash(SubGraph.of(one), cfg) == wl_hash(SubGraph.of(two), cfg)
    assert function_similarity(SubGraph.of(one), SubGraph.of(two), cfg).value == 1.0
    name_cfg = WLConfig(3, "name")
    assert wl_hash(SubGraph.of(one), name_cfg) != wl_hash(SubGraph.of(two), name_cfg)


def test_wl_edge_labels_count():
    a = workflow("a", [node("p", outputs=["x.dat", "y.dat"]), node("q", inputs=[ref("p", "x.dat")])])
    b = workflow("b", [node("p", outputs=["x.dat", "y.dat"]), node("q", inputs=[ref("p", "y.dat", "x.dat")])])
    assert wl_hash(SubGraph.of(a)) != wl_hash(SubGraph.of(b))


def test_wl_rejects_empty():
    wf = _pipeline("abc")
    with pytest.raises(ValueError):
        wl_hash(SubGraph.of(wf, []))
    with pytest.raises(ValueError):
        WLConfig(0)


@st.composite
def dags(draw):
    n = draw(st.integers(1, 7))
    nodes = []
    for i in range(n):
        preds = draw(st.lists(st.integers(0, i - 1), unique=True, max_size=2)) if i else []
        nodes.append(
            node(f"v{i}", draw(st.sampled_from(["a", "b", "c"])), [draw(st.sampled_from(["-x", "-y"]))],
                 [ref(f"v{p}", "out.dat", f"in{p}") for p in preds])
        )
    return workflow("g", nodes)


@settings(max_examples=80, deadline=None)
@given(dags(), st.randoms(use_true_random=False))
def test_wl_invariant_under_renaming(wf, rnd):
    names = wf.names()
    shuffled = names[:]
    rnd.shuffle(shuffled)
    mapping = {a: f"r_{b}" for a, b in zip(names, shuffled)}
    text = serialize(wf)
    for a in sorted(names, key=len, reverse=True):
        text = text.replace(f'"{a}"', f'"{mapping[a]}"')
    data = json.loads(text)
    rnd.shuffle(data["nodes"])
    other = from_dict(data)
    cfg = WLConfig(3, "command")
    assert wl_hash(SubGraph.of(wf), cfg) == wl_hash(SubGraph.of(other), cfg)


@settings(max_examples=80, deadline=None)
@given(dags(), dags())
def test_similarity_properties(a, b):
    sa, sb = SubGraph.of(a), SubGraph.of(b)
    for metric in (
        lambda x, y: function_similarity(x, y).value,
        lambda x, y: domain_similarity(domain_descriptors(x), domain_descriptors(y)).value,
        lambda x, y: codomain_similarity(codomain_descriptors(x), codomain_descriptors(y)).value,
    ):
        v = metric(sa, sb)
        assert 0.0 <= v <= 1.0
        assert v == metric(sb, sa)
        assert metric(sa, sa) == 1.0
    if wl_hash(sa) == wl_hash(sb):
        assert function_similarity(sa, sb).value == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcdef"), max_size=6), st.lists(st.sampled_from("abcdef"), max_size=6))
def test_jaccard_oracle(a, b):
    sa, sb = set(a), set(b)
    expected = 1.0 if not (sa | sb) else len(sa & sb) / len(sa | sb)
    assert jaccard(a, b) == expected


def test_isomorphic_graphs_share_hash_networkx_oracle():
    nx = pytest.importorskip("networkx")
    one, two = _pipeline("abc"), _pipeline(["z", "y", "x"])

    def graph(wf):
        g = nx.DiGraph()
        for n in wf.nodes:
            g.add_node(n.name, label=n.command.executable)
        for e in dependency_graph(wf):
            g.add_edge(e.producer, e.consumer, label=e.output)
        return g

    match = nx.algorithms.isomorphism.categorical_node_match("label", None)
    assert nx.is_isomorphic(graph(one), graph(two), node_match=match)
    assert wl_hash(SubGraph.of(one)) == wl_hash(SubGraph.of(two))


# --- composability ----------------------------------------------------------------------


class _FakeKB:
    def __init__(self, entries, producers=None, consumers=None):
        self._entries, self._p, self._c = entries, producers or {}, consumers or {}

    def entry(self, i):
        return self._entries[i]

    def producers_of(self, i):
        return self._p.get(i, [])

    def consumers_of(self, i):
        return self._c.get(i, [])


class _E:
    def __init__(self, domain, codomain):
        self.domain = DescriptorSet.of("domain", domain)
        self.codomain = DescriptorSet.of("codomain", codomain)


def test_composability_directions():
    files = [f"f{i}.dat" for i in range(9)]
    entries = {
        "A": _E(["in.txt"], ["x.dat"] + files),
        "B": _E(["x.dat"] + files, ["out.txt"]),
        "C": _E(files + ["extra.dat"], ["other.txt"]),
    }
    kb = _FakeKB(entries, producers={"B": ["A"]}, consumers={"A": ["B"]})
    assert composability("A", "B", "downstream", kb).value == 1.0
    # C consumes 9 of B's 10 inputs plus one more: 9/11
    assert composability("A", "C", "downstream", kb).value == pytest.approx(9 / 11)
    assert composability("A", "B", "upstream", kb).value == 1.0
    assert composability("C", "A", "downstream", kb).value == 0.0
    assert composability("A", "C", "upstream", _FakeKB(entries)).value == 0.0
    with pytest.raises(ValueError):
        composability("A", "B", "sideways", kb)


def test_hash_speed_smoke(tmp_path):
    (tmp_path / "in.bin").write_bytes(b"x" * 1024)
    nodes = [node("n0", inputs=[lit("in.bin")])]
    nodes += [node(f"n{i}", args=[str(i)], inputs=[lit("in.bin"), ref(f"n{i-1}", "out.dat")]) for i in range(1, 100)]
    wf = workflow("speed", nodes, base_dir=tmp_path)
    start = time.perf_counter()
    hash_workflow(wf)
    assert time.perf_counter() - start < 2.0
