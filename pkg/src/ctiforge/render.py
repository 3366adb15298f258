"""Matplotlib figures rendered next to the JSON artifacts.

Layout is seeded and the Agg backend is forced, so figure bytes are
reproducible across runs and concurrency levels like every other
artifact.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import networkx as nx

from .graph import RelationshipGraph

_TYPE_COLORS = {
    "filename": "#1f77b4",
    "command_line": "#ff7f0e",
    "registry_key": "#2ca02c",
    "registry_value": "#98df8a",
    "ip_address": "#d62728",
    "domain": "#9467bd",
    "hash": "#8c564b",
}

_LAYOUT_SEED = 42


def render_graph_figure(graph: RelationshipGraph, path) -> None:
    """Node-and-edge view; unverified edges draw dashed."""
    g = nx.DiGraph()
    for node in graph.nodes:
        g.add_node(node["node_id"], ioc_type=node["ioc_type"])
    for edge in graph.edges:
        g.add_edge(edge["src_node"], edge["dst_node"], category=edge["category"],
                   verified=edge["verified"])
    fig, ax = plt.subplots(figsize=(10, 7))
    if g.number_of_nodes():
        pos = nx.spring_layout(g, seed=_LAYOUT_SEED)
        colors = [_TYPE_COLORS.get(g.nodes[n]["ioc_type"], "#7f7f7f") for n in g.nodes]
        nx.draw_networkx_nodes(g, pos, ax=ax, node_color=colors, node_size=900, alpha=0.9)
        nx.draw_networkx_labels(
            g, pos, ax=ax, labels={n: g.nodes[n]["ioc_type"] for n in g.nodes}, font_size=7
        )
        solid = [(u, v) for u, v, d in g.edges(data=True) if d["verified"]]
        dashed = [(u, v) for u, v, d in g.edges(data=True) if not d["verified"]]
        nx.draw_networkx_edges(g, pos, ax=ax, edgelist=solid, arrows=True)
        nx.draw_networkx_edges(g, pos, ax=ax, edgelist=dashed, style="dashed", arrows=True)
        nx.draw_networkx_edge_labels(
            g,
            pos,
            ax=ax,
            edge_labels={(u, v): d["category"] for u, v, d in g.edges(data=True)},
            font_size=7,
        )
    ax.set_title("IOC relationship graph")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150)
    plt.close(fig)


def render_summary_figure(counts: dict, path) -> None:
    """Bar chart of pipeline stage counts from the run manifest."""
    keys = sorted(counts)
    values = [counts[k] for k in keys]
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.bar(range(len(keys)), values, color="#1f77b4")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("count")
    ax.set_title("Pipeline stage counts")
    for i, value in enumerate(values):
        ax.text(i, value, str(value), ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150)
    plt.close(fig)
