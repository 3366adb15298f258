"""Relationship graph assembly, exports, and SIEM rule drafts.

Nodes are deduplicated regex patterns (one per capture signature), so
the same indicator seen in several reports becomes a single node. Edge
endpoints re-point from IOC surfaces to node ids, parallel edges
collapse with merged provenance, and verified edges whose endpoint
types fit a rule template turn into field/pattern rule drafts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .regexgen import RegexPattern
from .relations import RelationEdge


@dataclass(frozen=True)
class RelationshipGraph:
    nodes: tuple[dict, ...]  # {node_id, ioc_type, pattern, merged_ioc_refs}
    edges: tuple[dict, ...]  # {src_node, dst_node, category, verified, provenance}

    def node_by_id(self, node_id: str) -> dict:
        for node in self.nodes:
            if node["node_id"] == node_id:
                return node
        raise KeyError(node_id)


@dataclass(frozen=True)
class SiemRuleDraft:
    rule_id: str
    title: str
    condition_fields: tuple[dict, ...]  # {field, pattern}
    relation: str
    provenance: tuple[dict, ...]  # {report_id, paragraph_index}

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "title": self.title,
            "condition_fields": list(self.condition_fields),
            "relation": self.relation,
            "provenance": list(self.provenance),
        }


def _node_id(pattern: RegexPattern) -> str:
    digest = hashlib.sha256("\x1f".join(pattern.signature).encode("utf-8")).hexdigest()
    return f"{pattern.ioc_type}-{digest[:12]}"


def build_graph(patterns: list[RegexPattern], edges: list[RelationEdge]) -> RelationshipGraph:
    """Nodes from dedup representatives; edges re-pointed and collapsed.

    Self-loops created by the merge are dropped; parallel edges with
    the same category collapse into one with concatenated provenance.
    """
    nodes = []
    index: dict[tuple[str, str], str] = {}
    for pattern in patterns:
        node_id = _node_id(pattern)
        refs = pattern.merged_ioc_refs or (pattern.ioc_ref,)
        nodes.append(
            {
                "node_id": node_id,
                "ioc_type": pattern.ioc_type,
                "pattern": pattern.pattern,
                "merged_ioc_refs": sorted(refs),
            }
        )
        for ref in refs:
            index[(pattern.ioc_type, ref)] = node_id
    nodes.sort(key=lambda n: n["node_id"])
    if len({n["node_id"] for n in nodes}) != len(nodes):
        raise ValueError("node ids collide; patterns were not deduplicated")

    collapsed: dict[tuple[str, str, str], dict] = {}
    for edge in edges:
        src_key = (edge.src.ioc_type, edge.src.canonical)
        dst_key = (edge.dst.ioc_type, edge.dst.canonical)
        if src_key not in index or dst_key not in index:
            raise ValueError(f"edge endpoint without a pattern node: {src_key} -> {dst_key}")
        src_node, dst_node = index[src_key], index[dst_key]
        if src_node == dst_node:
            continue
        provenance = [edge.paragraph_ref[0], edge.paragraph_ref[1], edge.raw_verb]
        slot = collapsed.setdefault(
            (src_node, dst_node, edge.category),
            {
                "src_node": src_node,
                "dst_node": dst_node,
                "category": edge.category,
                "verified": False,
                "provenance": [],
            },
        )
        slot["verified"] = slot["verified"] or edge.verified
        if provenance not in slot["provenance"]:
            slot["provenance"].append(provenance)
    out_edges = []
    for slot in collapsed.values():
        slot["provenance"] = sorted(slot["provenance"])
        out_edges.append(slot)
    out_edges.sort(key=lambda e: (e["src_node"], e["dst_node"], e["category"]))
    return RelationshipGraph(nodes=tuple(nodes), edges=tuple(out_edges))


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def export_graph(graph: RelationshipGraph, format: str) -> bytes:
    """Stable JSON or DOT bytes; both diff cleanly across runs."""
    if format == "json":
        payload = {"nodes": list(graph.nodes), "edges": list(graph.edges)}
        return (json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode(
            "utf-8"
        )
    if format == "dot":
        lines = ["digraph cti {"]
        for node in graph.nodes:
            label = _dot_escape(f"{node['ioc_type']}\n{node['pattern']}")
            lines.append(f'  "{node["node_id"]}" [label="{label}"];')
        for edge in graph.edges:
            style = "" if edge["verified"] else ", style=dashed"
            lines.append(
                f'  "{edge["src_node"]}" -> "{edge["dst_node"]}"'
                f' [label="{edge["category"]}"{style}];'
            )
        lines.append("}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown export format: {format!r}")


def load_rule_templates(path=None) -> list[dict]:
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    return json.loads(resources.files("ctiforge").joinpath("data", "rule_templates.json").read_text("utf-8"))


def emit_rules(graph: RelationshipGraph, templates: list[dict] | None = None) -> list[SiemRuleDraft]:
    """One draft per verified edge whose endpoint types fit a template."""
    if templates is None:
        templates = load_rule_templates()
    nodes = {node["node_id"]: node for node in graph.nodes}
    drafts = []
    for edge in graph.edges:
        if not edge["verified"]:
            continue
        src = nodes[edge["src_node"]]
        dst = nodes[edge["dst_node"]]
        draft = _match_template(templates, edge, src, dst)
        if draft is not None:
            drafts.append(draft)
    drafts.sort(key=lambda d: d.rule_id)
    return drafts


def _match_template(templates, edge, src, dst) -> SiemRuleDraft | None:
    for template in templates:
        if edge["category"] not in template["categories"]:
            continue
        for pair in template["pairs"]:
            if pair["src_type"] != src["ioc_type"] or pair["dst_type"] != dst["ioc_type"]:
                continue
            fields = tuple(
                {"field": name, "pattern": (src if which == "src" else dst)["pattern"]}
                for name, which in pair["fields"]
            )
            digest = hashlib.sha256(
                "\x1f".join(
                    [template["template_id"], edge["src_node"], edge["dst_node"], edge["category"]]
                ).encode("utf-8")
            ).hexdigest()
            provenance = tuple(
                {"report_id": report_id, "paragraph_index": paragraph_index}
                for report_id, paragraph_index in sorted(
                    {(p[0], p[1]) for p in edge["provenance"]}
                )
            )
            return SiemRuleDraft(
                rule_id=f"rule-{digest[:12]}",
                title=template["title"],
                condition_fields=fields,
                relation=edge["category"],
                provenance=provenance,
            )
    return None
