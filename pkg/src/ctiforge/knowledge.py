"""OS domain-knowledge vector store.

Holds canonical strings (default paths, system programs, shell commands,
file extensions, registry roots) with their embeddings. Purification and
capture-group classification both ask the same two questions: does a
candidate hit a structural rule (lexical probe), and failing that, is it
close enough to a known entry in embedding space.

The store is a flat array searched exhaustively; at a few thousand
entries an index would only add failure modes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

from .errors import DimensionMismatch, EmptyStore, ZeroVector
from .gateway import EmbeddingVector, ModelGateway

logger = logging.getLogger(__name__)

ENTRY_KINDS = ("path", "program", "command", "extension", "registry_root")

DEFAULT_SIMILARITY_THRESHOLD = 0.82


@dataclass(frozen=True)
class KnowledgeEntry:
    """One unit of OS domain knowledge."""

    text: str
    kind: str
    source: str = ""

    def __post_init__(self):
        if not self.text or self.text != self.text.strip():
            raise ValueError(f"entry text must be non-empty and trimmed: {self.text!r}")
        if self.kind not in ENTRY_KINDS:
            raise ValueError(f"unknown entry kind: {self.kind!r}")


@dataclass(frozen=True)
class Match:
    entry: KnowledgeEntry
    score: float


@dataclass(frozen=True)
class KbEvidence:
    """Why a candidate was accepted: a lexical rule or a vector match."""

    method: str  # "lexical" or "vector"
    entry: KnowledgeEntry
    score: float | None = None

    def to_dict(self) -> dict:
        out = {"method": self.method, "entry": self.entry.text, "kind": self.entry.kind}
        if self.score is not None:
            out["score"] = round(self.score, 6)
        return out


class VectorStore:
    """Flat (entry, vector) store; immutable once built."""

    def __init__(self, dim: int):
        self.dim = dim
        self.entries: list[KnowledgeEntry] = []
        self.vectors: list[tuple[float, ...]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: KnowledgeEntry, vector: EmbeddingVector) -> None:
        if vector.dim != self.dim:
            raise DimensionMismatch(f"store dim {self.dim}, vector dim {vector.dim}")
        self.vectors.append(_to_float32(vector.values))
        self.entries.append(entry)

    # Persisted form: <II dim,count> header, count*dim little-endian float32,
    # then a UTF-8 JSON table of {text, kind, source}.
    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = bytearray(struct.pack("<II", self.dim, len(self.entries)))
        for vec in self.vectors:
            blob += struct.pack(f"<{self.dim}f", *vec)
        table = [{"text": e.text, "kind": e.kind, "source": e.source} for e in self.entries]
        blob += json.dumps(table, ensure_ascii=False).encode("utf-8")
        path.write_bytes(bytes(blob))

    @classmethod
    def load(cls, path) -> "VectorStore":
        raw = Path(path).read_bytes()
        dim, count = struct.unpack_from("<II", raw, 0)
        store = cls(dim)
        offset = 8
        stride = dim * 4
        for _ in range(count):
            store.vectors.append(struct.unpack_from(f"<{dim}f", raw, offset))
            offset += stride
        table = json.loads(raw[offset:].decode("utf-8"))
        if len(table) != count:
            raise ValueError(f"store entry table holds {len(table)} rows, header says {count}")
        store.entries = [
            KnowledgeEntry(text=row["text"], kind=row["kind"], source=row.get("source", ""))
            for row in table
        ]
        return store


def _to_float32(values) -> tuple[float, ...]:
    packed = struct.pack(f"<{len(values)}f", *values)
    return struct.unpack(f"<{len(values)}f", packed)


def load_seed_entries(path) -> list[KnowledgeEntry]:
    """Read the line-delimited JSON seed file ({text, kind, source})."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            row = json.loads(line)
            entries.append(
                KnowledgeEntry(text=row["text"], kind=row["kind"], source=row.get("source", ""))
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad seed entry: {exc}") from exc
    return entries


def build_store(
    entries: list[KnowledgeEntry], gateway: ModelGateway, out_path=None
) -> VectorStore:
    """Embed every entry into a fresh store; duplicates warn and are skipped.

    Rebuilding from the same entries and fixtures is byte-identical.
    """
    if not entries:
        raise ValueError("cannot build a store from zero entries")
    store: VectorStore | None = None
    seen: set[tuple[str, str]] = set()
    for entry in entries:
        dedup_key = (entry.text, entry.kind)
        if dedup_key in seen:
            logger.warning("duplicate knowledge entry skipped: %s (%s)", entry.text, entry.kind)
            continue
        seen.add(dedup_key)
        vector = gateway.embed(entry.text)
        if store is None:
            store = VectorStore(vector.dim)
        store.add(entry, vector)
    if out_path is not None:
        store.save(out_path)
    return store


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(f"{a.dim} != {b.dim}")
    dot = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(a.values, b.values):
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity undefined for zero-norm vector")
    return dot / ((norm_a**0.5) * (norm_b**0.5))


def nearest(store: VectorStore, query: EmbeddingVector, k: int) -> list[Match]:
    """Top-k entries by cosine score; ties break by entry text ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not store.entries:
        raise EmptyStore("similarity query against an empty store")
    scored = [
        Match(entry=entry, score=cosine_similarity(EmbeddingVector(vec, store.dim), query))
        for entry, vec in zip(store.entries, store.vectors)
    ]
    scored.sort(key=lambda m: (-m.score, m.entry.text))
    return scored[:k]


def _normalize_pathish(text: str) -> str:
    out = text.casefold()
    while "\\\\" in out:
        out = out.replace("\\\\", "\\")
    return out


def _prefix_hit(candidate: str, prefix: str) -> bool:
    if not candidate.startswith(prefix):
        return False
    return len(candidate) == len(prefix) or candidate[len(prefix)] in "\\/"


def lexical_probe(store: VectorStore, candidate: str) -> KnowledgeEntry | None:
    """Structural checks that bypass embeddings.

    Priority: known extension suffix, then known path prefix, then
    registry root prefix. Prefix matches must land on a separator
    boundary so "Software_evil" does not ride on "Software".
    """
    if not candidate:
        return None
    folded = _normalize_pathish(candidate)
    for entry in store.entries:
        if entry.kind == "extension" and folded.endswith(entry.text.casefold()):
            return entry
    for entry in store.entries:
        if entry.kind == "path" and _prefix_hit(folded, _normalize_pathish(entry.text)):
            return entry
    for entry in store.entries:
        if entry.kind == "registry_root" and _prefix_hit(folded, entry.text.casefold()):
            return entry
    return None


def probe_knowledge(
    store: VectorStore,
    candidate: str,
    gateway: ModelGateway,
    threshold: float = DEFAULT_SIMILARITY_THRESHOLD,
) -> KbEvidence | None:
    """Lexical probe first, then embedding similarity against the store."""
    hit = lexical_probe(store, candidate)
    if hit is not None:
        return KbEvidence(method="lexical", entry=hit)
    top = nearest(store, gateway.embed(candidate), k=1)[0]
    if top.score >= threshold:
        return KbEvidence(method="vector", entry=top.entry, score=top.score)
    return None
