"""Noun-pair extraction, verb mapping, and edge verification.

Per paragraph, the model lists (left, verb, right) noun pairs. Pairs
are kept only when both nouns resolve to purified IOCs (after alias
substitution for pronouns like "the dropper"), verbs map onto a fixed
seven-category table, and every edge is checked against a type
compatibility matrix. Violations go back to the model for bounded
re-identification; stubborn edges are demoted to a flagged reference
rather than silently dropped.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

from . import promptlib
from .extraction import IocCandidate, IocRecord, normalize_candidate
from .gateway import ModelGateway, Prompt
from .ingest import Paragraph

logger = logging.getLogger(__name__)

CATEGORIES = ("create", "write", "read", "execute", "delete", "connect", "reference")

DEFAULT_MAX_REIDENTIFY = 2

_IRREGULAR_VERBS = {
    "ran": "run",
    "wrote": "write",
    "written": "write",
    "made": "make",
    "built": "build",
    "sent": "send",
    "was": "be",
    "were": "be",
    "is": "be",
    "are": "be",
    "been": "be",
    "known": "know",
    "knew": "know",
    "set": "set",
    "read": "read",
    "ate": "eat",
    "stole": "steal",
    "stolen": "steal",
}


@dataclass(frozen=True)
class NounPair:
    left: str
    verb: str
    right: str
    paragraph_ref: tuple[str, int]


@dataclass(frozen=True)
class RelationEdge:
    src: IocRecord
    dst: IocRecord
    category: str
    raw_verb: str
    paragraph_ref: tuple[str, int]
    verified: bool = False
    reidentify_count: int = 0

    def to_dict(self) -> dict:
        return {
            "src": {"canonical": self.src.canonical, "ioc_type": self.src.ioc_type},
            "dst": {"canonical": self.dst.canonical, "ioc_type": self.dst.ioc_type},
            "category": self.category,
            "raw_verb": self.raw_verb,
            "paragraph_ref": list(self.paragraph_ref),
            "verified": self.verified,
            "reidentify_count": self.reidentify_count,
        }


class CompatibilityMatrix:
    """Allowed (src_type, category, dst_type) triples; reference is always allowed."""

    def __init__(self, allowed: set[tuple[str, str, str]]):
        self.allowed = allowed

    def is_allowed(self, src_type: str, category: str, dst_type: str) -> bool:
        if category == "reference":
            return True
        return (src_type, category, dst_type) in self.allowed

    @classmethod
    def from_file(cls, path=None) -> "CompatibilityMatrix":
        data = _load_data_json("compat_matrix.json", path)
        triples = {tuple(row) for row in data["allowed"]}
        for triple in triples:
            if len(triple) != 3 or triple[1] not in CATEGORIES:
                raise ValueError(f"bad matrix triple: {triple!r}")
        return cls(triples)


def _load_data_json(name: str, path=None):
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    return json.loads(resources.files("ctiforge").joinpath("data", name).read_text("utf-8"))


@lru_cache(maxsize=None)
def _default_table(name: str) -> dict:
    return _load_data_json(name)


def load_verb_map(path=None) -> dict[str, str]:
    table = _load_data_json("verb_map.json", path) if path else dict(_default_table("verb_map.json"))
    for verb, category in table.items():
        if category not in CATEGORIES:
            raise ValueError(f"verb table maps {verb!r} to unknown category {category!r}")
    return table


def load_alias_verbs(path=None) -> frozenset[str]:
    data = _load_data_json("alias_verbs.json", path)
    return frozenset(str(v).casefold() for v in data)


def extract_pairs(
    paragraph: Paragraph, gateway: ModelGateway, diagnostics: list[str] | None = None
) -> list[NounPair]:
    """One completion per paragraph, parsed as a JSON array of {left, verb, right}."""
    prompt = Prompt(
        task_tag="extract_pairs",
        system_text=promptlib.system_text(),
        user_text=promptlib.render("extract_pairs", paragraph=paragraph.text),
    )
    completion = gateway.complete(prompt)
    where = f"{paragraph.report_id}[{paragraph.index}]"
    try:
        items = json.loads(completion.text)
        if not isinstance(items, list):
            raise ValueError("not an array")
    except (json.JSONDecodeError, ValueError):
        message = f"unparseable pair response at {where}"
        logger.warning("%s", message)
        if diagnostics is not None:
            diagnostics.append(message)
        return []
    pairs = []
    for item in items:
        if not isinstance(item, dict):
            continue
        left = str(item.get("left", "")).strip()
        verb = str(item.get("verb", "")).strip()
        right = str(item.get("right", "")).strip()
        if not left or not verb or not right:
            continue
        if left.casefold() == right.casefold():
            continue
        pairs.append(
            NounPair(
                left=left,
                verb=verb,
                right=right,
                paragraph_ref=(paragraph.report_id, paragraph.index),
            )
        )
    return pairs


def lemmatize_verb(verb: str, vocabulary: frozenset[str] | set[str] = frozenset()) -> str:
    """Rule-based lemma: first word of the phrase, irregulars, then suffixes."""
    word = verb.strip().casefold()
    if word in vocabulary:
        return word
    word = word.split()[0] if word.split() else word
    if word in vocabulary or not word:
        return word
    if word in _IRREGULAR_VERBS:
        return _IRREGULAR_VERBS[word]
    candidates = []
    if word.endswith("ies") and len(word) > 4:
        candidates.append(word[:-3] + "y")
    if word.endswith("es") and len(word) > 3:
        candidates.append(word[:-2])
    if word.endswith("s") and not word.endswith("ss"):
        candidates.append(word[:-1])
    for suffix in ("ing", "ed"):
        if word.endswith(suffix) and len(word) > len(suffix) + 2:
            stem = word[: -len(suffix)]
            candidates.append(stem)
            if len(stem) > 2 and stem[-1] == stem[-2]:
                candidates.append(stem[:-1])  # dropped -> drop
            candidates.append(stem + "e")  # deleting -> delete
    for candidate in candidates:
        if candidate in vocabulary:
            return candidate
    return candidates[0] if candidates and candidates[0] else word


def _record_key(record: IocRecord) -> tuple[str, str]:
    return (record.canonical, record.ioc_type)


def _match_ioc(noun: str, iocs: list[IocRecord]) -> IocRecord | None:
    """A noun matches a record when it normalizes to the record's canonical."""
    for record in iocs:
        if record.status not in ("retained", "adjusted"):
            continue
        normalized = normalize_candidate(
            IocCandidate(
                surface=noun,
                ioc_type=record.ioc_type,
                paragraph_ref=record.paragraph_ref,
                run_index=0,
            )
        )
        if normalized == record.canonical:
            return record
    return None


def resolve_pronouns(
    pairs: list[NounPair], iocs: list[IocRecord], alias_verbs: frozenset[str] | None = None
) -> list[NounPair]:
    """Substitute alias nouns ("the dropper") with the IOC they stand for.

    An alias pair links an IOC to a non-IOC noun via an aliasing verb;
    the alias propagates into every other pair and the alias pair
    itself disappears. Chains resolve transitively.
    """
    if alias_verbs is None:
        alias_verbs = load_alias_verbs()
    aliases: dict[str, str] = {}  # casefolded alias noun -> IOC canonical
    remaining = list(pairs)
    changed = True
    while changed:
        changed = False
        for pair in list(remaining):
            if lemmatize_verb(pair.verb, alias_verbs) not in alias_verbs:
                continue
            left_ioc = _match_ioc(_apply_alias(pair.left, aliases), iocs)
            right_ioc = _match_ioc(_apply_alias(pair.right, aliases), iocs)
            if left_ioc is not None and right_ioc is None:
                aliases[pair.right.casefold()] = left_ioc.canonical
            elif right_ioc is not None and left_ioc is None:
                aliases[pair.left.casefold()] = right_ioc.canonical
            else:
                continue
            remaining.remove(pair)
            changed = True
    return [
        replace(pair, left=_apply_alias(pair.left, aliases), right=_apply_alias(pair.right, aliases))
        for pair in remaining
    ]


def _apply_alias(noun: str, aliases: dict[str, str]) -> str:
    seen = set()
    current = noun
    while current.casefold() in aliases and current.casefold() not in seen:
        seen.add(current.casefold())
        current = aliases[current.casefold()]
    # Articles do not block resolution: "the dropper" == "dropper".
    stripped = re.sub(r"^(the|a|an)\s+", "", current, flags=re.IGNORECASE)
    if stripped != current and stripped.casefold() in aliases:
        return _apply_alias(stripped, aliases)
    return current


def filter_pairs(
    pairs: list[NounPair],
    iocs: list[IocRecord],
    diagnostics: list[str] | None = None,
) -> list[tuple[NounPair, IocRecord, IocRecord]]:
    """Keep pairs whose two sides both resolve to purified IOC records."""
    kept = []
    for pair in pairs:
        left = _match_ioc(pair.left, iocs)
        right = _match_ioc(pair.right, iocs)
        if left is None or right is None:
            side = "neither side" if left is None and right is None else (
                "left side" if left is None else "right side"
            )
            message = (
                f"dropped pair ({pair.left!r}, {pair.verb!r}, {pair.right!r}): {side} is not an IOC"
            )
            logger.info("%s", message)
            if diagnostics is not None:
                diagnostics.append(message)
            continue
        if _record_key(left) == _record_key(right):
            continue
        kept.append((pair, left, right))
    return kept


def map_verb(raw_verb: str, table: dict[str, str]) -> str | None:
    """Category per the verb table; None signals a table gap."""
    lemma = lemmatize_verb(raw_verb, frozenset(table))
    return table.get(lemma)


def build_edges(
    kept_pairs: list[tuple[NounPair, IocRecord, IocRecord]],
    table: dict[str, str],
    diagnostics: list[str] | None = None,
) -> list[RelationEdge]:
    """Map each kept pair's verb; gaps become reference edges with a warning."""
    edges = []
    seen = set()
    for pair, src, dst in kept_pairs:
        category = map_verb(pair.verb, table)
        if category is None:
            message = f"unmapped verb {pair.verb!r}; edge kept as reference"
            logger.warning("%s", message)
            if diagnostics is not None:
                diagnostics.append(message)
            category = "reference"
        key = (_record_key(src), _record_key(dst), category, pair.verb, pair.paragraph_ref)
        if key in seen:
            continue
        seen.add(key)
        edges.append(
            RelationEdge(
                src=src,
                dst=dst,
                category=category,
                raw_verb=pair.verb,
                paragraph_ref=pair.paragraph_ref,
            )
        )
    return edges


def verify_edge(
    edge: RelationEdge,
    matrix: CompatibilityMatrix,
    gateway: ModelGateway,
    paragraph_text: str,
    table: dict[str, str],
    max_reidentify: int = DEFAULT_MAX_REIDENTIFY,
    diagnostics: list[str] | None = None,
) -> RelationEdge:
    """Check the edge against the matrix, re-identifying on violation.

    After max_reidentify failed rounds the edge demotes to a reference
    with verified=false, kept for audit rather than dropped.
    """
    if matrix.is_allowed(edge.src.ioc_type, edge.category, edge.dst.ioc_type):
        return replace(edge, verified=True)
    category = edge.category
    for round_number in range(1, max_reidentify + 1):
        prompt = Prompt(
            task_tag="reidentify_relation",
            system_text=promptlib.system_text(),
            user_text=promptlib.render(
                "reidentify_relation",
                paragraph=paragraph_text,
                source=edge.src.canonical,
                source_type=edge.src.ioc_type,
                target=edge.dst.canonical,
                target_type=edge.dst.ioc_type,
                rejected_category=category,
                categories=", ".join(CATEGORIES),
            ),
            run_index=round_number - 1,
        )
        answer = gateway.complete(prompt).text.strip().splitlines()
        word = answer[0].strip().strip(".").casefold() if answer else ""
        if word in CATEGORIES:
            category = word
        else:
            mapped = map_verb(word, table) if word else None
            if mapped is None:
                continue
            category = mapped
        if matrix.is_allowed(edge.src.ioc_type, category, edge.dst.ioc_type):
            return replace(
                edge, category=category, verified=True, reidentify_count=round_number
            )
    message = (
        f"edge {edge.src.canonical!r} -[{edge.category}]-> {edge.dst.canonical!r} "
        f"failed verification; demoted to reference"
    )
    logger.warning("%s", message)
    if diagnostics is not None:
        diagnostics.append(message)
    return replace(
        edge, category="reference", verified=False, reidentify_count=max_reidentify
    )
