import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import STORE_PATH
from ctiforge.errors import DimensionMismatch, EmptyStore, ZeroVector
from ctiforge.gateway import EmbeddingVector
from ctiforge.knowledge import (
    DEFAULT_SIMILARITY_THRESHOLD,
    KnowledgeEntry,
    VectorStore,
    build_store,
    cosine_similarity,
    lexical_probe,
    load_seed_entries,
    nearest,
    probe_knowledge,
)

SEED_PATH = STORE_PATH.parent.parent.parent / "src" / "ctiforge" / "data" / "knowledge.jsonl"


def _vec(*values) -> EmbeddingVector:
    return EmbeddingVector.from_list(values)


def _entries(n: int) -> list[KnowledgeEntry]:
    return [KnowledgeEntry(text=f"prog{i}", kind="program") for i in range(n)]


def test_build_store_counts_and_dim(mock_gateway):
    store = build_store(_entries(3), mock_gateway)
    assert len(store) == 3
    assert all(len(vec) == store.dim for vec in store.vectors)


def test_duplicate_entries_are_skipped_once(mock_gateway):
    entries = _entries(2) + [_entries(1)[0]]
    store = build_store(entries, mock_gateway)
    assert len(store) == 2


def test_rebuild_is_byte_identical(tmp_path, mock_gateway):
    first = tmp_path / "a.bin"
    second = tmp_path / "b.bin"
    build_store(_entries(5), mock_gateway, out_path=first)
    build_store(_entries(5), mock_gateway, out_path=second)
    assert first.read_bytes() == second.read_bytes()


def test_empty_entry_list_rejected(mock_gateway):
    with pytest.raises(ValueError):
        build_store([], mock_gateway)


def test_seed_file_builds_the_committed_store(store):
    entries = load_seed_entries(SEED_PATH)
    assert len(entries) >= 500
    assert len(store) == len(entries)
    assert store.dim == 96


def test_entry_validation():
    with pytest.raises(ValueError):
        KnowledgeEntry(text=" padded ", kind="program")
    with pytest.raises(ValueError):
        KnowledgeEntry(text="x", kind="widget")


def test_add_rejects_dimension_mismatch():
    store = VectorStore(3)
    with pytest.raises(DimensionMismatch):
        store.add(KnowledgeEntry(text="x", kind="program"), _vec(1.0, 0.0))


def test_persistence_round_trip(tmp_path, mock_gateway):
    store = build_store(_entries(4), mock_gateway)
    path = tmp_path / "store.bin"
    store.save(path)
    loaded = VectorStore.load(path)
    assert loaded.dim == store.dim
    assert loaded.entries == store.entries
    query = mock_gateway.embed("prog2")
    assert [m.entry for m in nearest(loaded, query, 4)] == [
        m.entry for m in nearest(store, query, 4)
    ]


def test_cosine_self_similarity_is_one():
    v = _vec(0.3, 0.4, 0.5)
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_is_zero():
    assert cosine_similarity(_vec(1.0, 0.0), _vec(0.0, 1.0)) == 0.0


def test_cosine_known_value():
    got = cosine_similarity(_vec(1.0, 0.0), _vec(1.0, 1.0))
    assert got == pytest.approx(2 ** -0.5, abs=1e-12)


def test_cosine_rejects_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_similarity(_vec(0.0, 0.0), _vec(1.0, 0.0))


def test_cosine_rejects_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_similarity(_vec(1.0), _vec(1.0, 0.0))


def test_nearest_single_entry(mock_gateway):
    store = build_store(_entries(1), mock_gateway)
    matches = nearest(store, mock_gateway.embed("unrelated text"), k=1)
    assert matches[0].entry.text == "prog0"


def test_nearest_clamps_k_to_store_size(mock_gateway):
    store = build_store(_entries(3), mock_gateway)
    matches = nearest(store, mock_gateway.embed("prog1"), k=10)
    assert len(matches) == 3
    assert [m.score for m in matches] == sorted((m.score for m in matches), reverse=True)


def test_nearest_rejects_empty_store():
    with pytest.raises(EmptyStore):
        nearest(VectorStore(2), _vec(1.0, 0.0), k=1)


def test_pathed_program_query_lands_on_program_or_path(store, mock_gateway):
    query = mock_gateway.embed("C:\\Windows\\System32\\cmd.exe")
    top = nearest(store, query, k=1)[0]
    assert top.entry.kind in ("program", "path")


def test_lexical_extension_suffix(store):
    entry = lexical_probe(store, "evil.dll")
    assert entry is not None and entry.kind == "extension" and entry.text == ".dll"


def test_lexical_registry_root(store):
    entry = lexical_probe(store, "HKCU\\Software\\Run\\auto_update")
    assert entry is not None
    assert entry.kind == "registry_root"
    assert entry.text == "HKCU"


def test_lexical_prefix_needs_separator_boundary(store):
    assert lexical_probe(store, "HKCUX\\Software") is None


def test_lexical_miss_on_plain_prose(store):
    assert lexical_probe(store, "totally a sentence about malware") is None


def test_probe_prefers_lexical_over_vector(store, mock_gateway):
    evidence = probe_knowledge(store, "evil.dll", mock_gateway)
    assert evidence.method == "lexical"
    assert evidence.score is None


def test_probe_vector_exact_text_scores_one(store, mock_gateway):
    evidence = probe_knowledge(store, "shadowcopy", mock_gateway)
    assert evidence.method == "vector"
    assert evidence.score == pytest.approx(1.0, abs=1e-6)


def test_probe_below_threshold_returns_none(store, mock_gateway):
    assert probe_knowledge(store, "auto_update", mock_gateway) is None
    assert 0.0 < DEFAULT_SIMILARITY_THRESHOLD <= 1.0


unit_floats = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False, width=32)


@given(st.lists(unit_floats, min_size=4, max_size=4), st.lists(unit_floats, min_size=4, max_size=4))
def test_cosine_symmetry(a, b):
    va, vb = _vec(*a), _vec(*b)
    if not any(a) or not any(b):
        return
    assert cosine_similarity(va, vb) == pytest.approx(cosine_similarity(vb, va), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(unit_floats, min_size=4, max_size=4).filter(lambda v: any(v)),
        min_size=1,
        max_size=30,
    ),
    st.lists(unit_floats, min_size=4, max_size=4).filter(lambda v: any(v)),
    st.integers(min_value=1, max_value=8),
)
def test_nearest_agrees_with_brute_force(vectors, query, k):
    store = VectorStore(4)
    for i, values in enumerate(vectors):
        store.add(KnowledgeEntry(text=f"e{i:03d}", kind="program"), _vec(*values))
    q = _vec(*query)
    got = nearest(store, q, k)
    brute = sorted(
        (
            (cosine_similarity(_vec(*vec), q), entry)
            for entry, vec in zip(store.entries, store.vectors)
        ),
        key=lambda pair: (-pair[0], pair[1].text),
    )[:k]
    assert [m.entry for m in got] == [entry for _, entry in brute]
    assert [m.score for m in got] == pytest.approx([score for score, _ in brute])


@given(st.text(min_size=1, max_size=40).map(str.strip).filter(bool))
def test_mock_embeddings_have_unit_norm(text):
    from mock_model import embed_text

    values = embed_text(text)
    assert math.isclose(math.fsum(v * v for v in values), 1.0, abs_tol=1e-9)
