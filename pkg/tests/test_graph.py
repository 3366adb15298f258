import json
import re
from pathlib import Path

import pytest

from ctiforge.extraction import IocRecord
from ctiforge.graph import RelationshipGraph, build_graph, emit_rules, export_graph
from ctiforge.regexgen import RegexPattern, ValidationReport
from ctiforge.relations import RelationEdge

DATA_DIR = Path(__file__).parent / "data"

RUN_KEY = "hkcu\\software\\run\\auto_update"
RUNDLL = "rundll32.exe payload.dll"

PASS_REPORT = ValidationReport(
    compiled=True,
    matches_original=True,
    matches_mutants=(),
    rejects_negatives=(),
    verdict="pass",
    failure=None,
)


def _pattern(pattern: str, ioc_type: str, signature: tuple, *refs: str) -> RegexPattern:
    return RegexPattern(
        pattern=pattern,
        ioc_ref=refs[0],
        ioc_type=ioc_type,
        signature=signature,
        validation=PASS_REPORT,
        attempts=1,
        origin="model",
        merged_ioc_refs=tuple(refs),
    )


def _ioc(canonical: str, ioc_type: str) -> IocRecord:
    return IocRecord(
        canonical=canonical,
        ioc_type=ioc_type,
        paragraph_ref=("r", 0),
        votes=5,
        runs_total=5,
        status="retained",
        kb_evidence={"method": "structural", "rule": "x_grammar"},
        reason=None,
    )


def _edge(src: IocRecord, dst: IocRecord, category: str, verb: str = "runs",
          ref: tuple = ("acme-ir", 2), verified: bool = True) -> RelationEdge:
    return RelationEdge(
        src=src, dst=dst, category=category, raw_verb=verb,
        paragraph_ref=ref, verified=verified,
    )


def _persistence_graph(verified: bool = True) -> RelationshipGraph:
    patterns = [
        _pattern(r"(?i)hkcu\\software\\run\\[^\\]+", "registry_key",
                 ("hkcu", "software", "run"), RUN_KEY),
        _pattern(r"rundll32\.exe\s+\S+", "command_line",
                 ("rundll32.exe",), RUNDLL),
    ]
    edge = _edge(_ioc(RUN_KEY, "registry_key"), _ioc(RUNDLL, "command_line"),
                 "execute", verb="executes", verified=verified)
    return build_graph(patterns, [edge])


def test_nodes_and_edges_repoint_to_pattern_ids():
    graph = _persistence_graph()
    assert len(graph.nodes) == 2
    assert len(graph.edges) == 1
    edge = graph.edges[0]
    assert graph.node_by_id(edge["src_node"])["ioc_type"] == "registry_key"
    assert graph.node_by_id(edge["dst_node"])["ioc_type"] == "command_line"
    assert edge["category"] == "execute"
    assert edge["verified"] is True
    assert edge["provenance"] == [["acme-ir", 2, "executes"]]


def test_node_ids_name_the_type_and_hash_the_signature():
    graph = _persistence_graph()
    for node in graph.nodes:
        assert re.fullmatch(rf"{node['ioc_type']}-[0-9a-f]{{12}}", node["node_id"])
    again = _persistence_graph()
    assert [n["node_id"] for n in again.nodes] == [n["node_id"] for n in graph.nodes]


def test_graph_without_edges_keeps_isolated_nodes():
    patterns = [_pattern("(?i)a\\.example", "domain", ("a.example",), "a.example")]
    graph = build_graph(patterns, [])
    assert len(graph.nodes) == 1
    assert graph.edges == ()


def test_parallel_edges_collapse_with_merged_provenance():
    src, dst = _ioc(RUN_KEY, "registry_key"), _ioc(RUNDLL, "command_line")
    patterns = [
        _pattern("p1", "registry_key", ("run",), RUN_KEY),
        _pattern("p2", "command_line", ("rundll32.exe",), RUNDLL),
    ]
    edges = [
        _edge(src, dst, "execute", verb="ran", ref=("r1", 0)),
        _edge(src, dst, "execute", verb="launched", ref=("r2", 3), verified=False),
    ]
    graph = build_graph(patterns, edges)
    assert len(graph.edges) == 1
    assert graph.edges[0]["provenance"] == [["r1", 0, "ran"], ["r2", 3, "launched"]]
    assert graph.edges[0]["verified"] is True  # any verified witness wins


def test_identical_provenance_is_stored_once():
    src, dst = _ioc(RUN_KEY, "registry_key"), _ioc(RUNDLL, "command_line")
    patterns = [
        _pattern("p1", "registry_key", ("run",), RUN_KEY),
        _pattern("p2", "command_line", ("rundll32.exe",), RUNDLL),
    ]
    edges = [_edge(src, dst, "execute"), _edge(src, dst, "execute")]
    graph = build_graph(patterns, edges)
    assert len(graph.edges[0]["provenance"]) == 1


def test_different_categories_stay_separate_edges():
    src, dst = _ioc(RUN_KEY, "registry_key"), _ioc(RUNDLL, "command_line")
    patterns = [
        _pattern("p1", "registry_key", ("run",), RUN_KEY),
        _pattern("p2", "command_line", ("rundll32.exe",), RUNDLL),
    ]
    edges = [_edge(src, dst, "execute"), _edge(src, dst, "reference")]
    assert len(build_graph(patterns, edges).edges) == 2


def test_merge_induced_self_loops_are_dropped():
    merged = _pattern("(?i)hklm\\\\run\\\\[^\\\\]+", "registry_key", ("hklm", "run"),
                      "hklm\\run\\svc_a", "hklm\\run\\svc_b")
    edge = _edge(_ioc("hklm\\run\\svc_a", "registry_key"),
                 _ioc("hklm\\run\\svc_b", "registry_key"), "reference")
    graph = build_graph([merged], [edge])
    assert len(graph.nodes) == 1
    assert graph.edges == ()


def test_edges_must_point_at_known_patterns():
    patterns = [_pattern("p1", "registry_key", ("run",), RUN_KEY)]
    edge = _edge(_ioc(RUN_KEY, "registry_key"), _ioc("ghost.exe", "filename"), "execute")
    with pytest.raises(ValueError):
        build_graph(patterns, [edge])


def test_colliding_node_ids_are_rejected():
    duplicate = [
        _pattern("p1", "registry_key", ("run",), "hklm\\run\\a"),
        _pattern("p2", "registry_key", ("run",), "hklm\\run\\b"),
    ]
    with pytest.raises(ValueError):
        build_graph(duplicate, [])


def test_empty_graph_exports_a_bare_digraph():
    dot = export_graph(RelationshipGraph(nodes=(), edges=()), "dot").decode("utf-8")
    assert dot.split() == ["digraph", "cti", "{", "}"]


def test_dot_export_matches_the_golden_file():
    dot = export_graph(_persistence_graph(), "dot")
    golden = (DATA_DIR / "persistence_graph.dot").read_bytes()
    assert dot == golden


def test_dot_labels_edges_with_their_category():
    dot = export_graph(_persistence_graph(), "dot").decode("utf-8")
    assert '[label="execute"]' in dot
    assert "style=dashed" not in dot


def test_dot_dashes_unverified_edges():
    dot = export_graph(_persistence_graph(verified=False), "dot").decode("utf-8")
    assert 'label="execute", style=dashed' in dot


def test_unknown_export_format_is_rejected():
    with pytest.raises(ValueError):
        export_graph(RelationshipGraph(nodes=(), edges=()), "gexf")


def test_json_export_round_trips_byte_identically():
    graph = _persistence_graph()
    blob = export_graph(graph, "json")
    payload = json.loads(blob)
    rebuilt = RelationshipGraph(
        nodes=tuple(payload["nodes"]), edges=tuple(payload["edges"])
    )
    assert export_graph(rebuilt, "json") == blob


def test_registry_persistence_edge_emits_a_two_field_rule():
    drafts = emit_rules(_persistence_graph())
    assert len(drafts) == 1
    draft = drafts[0]
    assert draft.title == "Registry persistence via autorun entry"
    assert re.fullmatch(r"rule-[0-9a-f]{12}", draft.rule_id)
    assert draft.relation == "execute"
    fields = {f["field"]: f["pattern"] for f in draft.condition_fields}
    assert fields == {
        "registry.key": r"(?i)hkcu\\software\\run\\[^\\]+",
        "process.command_line": r"rundll32\.exe\s+\S+",
    }
    assert draft.provenance == ({"report_id": "acme-ir", "paragraph_index": 2},)


def test_unverified_edges_emit_no_rules():
    assert emit_rules(_persistence_graph(verified=False)) == []


def test_connection_edge_uses_the_network_template():
    patterns = [
        _pattern(r"spools\.exe", "command_line", ("spools.exe",), "spools.exe"),
        _pattern(r"192\.0\.2\.19", "ip_address", ("192.0.2.19",), "192.0.2.19"),
    ]
    edge = _edge(_ioc("spools.exe", "command_line"), _ioc("192.0.2.19", "ip_address"),
                 "connect", verb="contacted")
    drafts = emit_rules(build_graph(patterns, [edge]))
    assert len(drafts) == 1
    assert drafts[0].title == "Outbound connection to attacker infrastructure"
    fields = {f["field"] for f in drafts[0].condition_fields}
    assert fields == {"process.command_line", "destination.ip"}


def test_edges_without_a_template_emit_nothing():
    patterns = [
        _pattern("(?i)abc123", "hash", ("abc123",), "abc123"),
        _pattern("(?i)def456", "hash", ("def456",), "def456"),
    ]
    edge = _edge(_ioc("abc123", "hash"), _ioc("def456", "hash"), "reference")
    assert emit_rules(build_graph(patterns, [edge])) == []


def test_rule_ids_are_unique_per_edge():
    patterns = [
        _pattern("p1", "registry_key", ("runonce",), "hkcu\\runonce\\a"),
        _pattern("p2", "command_line", ("cmd.exe",), "cmd.exe /c a"),
        _pattern("p3", "command_line", ("powershell.exe",), "powershell.exe -enc x"),
    ]
    reg = _ioc("hkcu\\runonce\\a", "registry_key")
    edges = [
        _edge(reg, _ioc("cmd.exe /c a", "command_line"), "execute"),
        _edge(reg, _ioc("powershell.exe -enc x", "command_line"), "execute"),
    ]
    drafts = emit_rules(build_graph(patterns, edges))
    assert len(drafts) == 2
    assert len({d.rule_id for d in drafts}) == 2


def test_rule_provenance_deduplicates_paragraphs():
    src, dst = _ioc(RUN_KEY, "registry_key"), _ioc(RUNDLL, "command_line")
    patterns = [
        _pattern("p1", "registry_key", ("run",), RUN_KEY),
        _pattern("p2", "command_line", ("rundll32.exe",), RUNDLL),
    ]
    edges = [
        _edge(src, dst, "execute", verb="ran", ref=("r1", 0)),
        _edge(src, dst, "execute", verb="launched", ref=("r1", 0)),
    ]
    drafts = emit_rules(build_graph(patterns, edges))
    assert drafts[0].provenance == ({"report_id": "r1", "paragraph_index": 0},)
