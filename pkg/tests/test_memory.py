"""Artifact store, embeddings, vector retrieval, run archive."""

import hashlib
import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ata.errors import IntegrityError, NotFoundError, ValidationError
from ata.memory import (
    ArtifactStore,
    EphemeralArtifactStore,
    RunArchive,
    VectorMemory,
    canonical_json,
    embed_text,
)
from ata.model import IterationCounts, IterationMetrics

from conftest import make_suite, make_test


# ------------------------------------------------------------------- store

def test_put_addresses_by_content_digest(tmp_path):
    store = ArtifactStore(tmp_path)
    data = b"suite payload"
    address = store.put(data, "test-suite")
    assert address.digest == hashlib.sha256(data).hexdigest()
    assert store.get(address) == data


def test_object_lands_under_two_char_fanout(tmp_path):
    store = ArtifactStore(tmp_path)
    address = store.put(b"xyz", "text")
    expected = tmp_path / "objects" / address.digest[:2] / address.digest
    assert expected.is_file()


def test_put_is_idempotent_and_append_only(tmp_path):
    store = ArtifactStore(tmp_path)
    first = store.put(b"same bytes", "text")
    second = store.put(b"same bytes", "text")
    assert first.digest == second.digest
    index = (tmp_path / "index.ndjson").read_text().splitlines()
    digests = [json.loads(line)["digest"] for line in index]
    # the index records the write, not a duplicate object
    assert digests.count(first.digest) == 1


def test_unknown_media_type_is_rejected(tmp_path):
    with pytest.raises(ValidationError):
        ArtifactStore(tmp_path).put(b"x", "spreadsheet")


def test_get_missing_digest_raises(tmp_path):
    with pytest.raises(NotFoundError):
        ArtifactStore(tmp_path).get("0" * 64)


def test_json_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    doc = {"b": [1, 2], "a": "text"}
    address = store.put_json(doc, "report")
    assert store.get_json(address) == doc


def test_canonical_json_is_key_order_independent():
    assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})


def test_ephemeral_store_mirrors_disk_semantics():
    store = EphemeralArtifactStore()
    address = store.put(b"payload", "trace")
    assert store.get(address) == b"payload"
    assert address.digest in store
    with pytest.raises(NotFoundError):
        store.get("1" * 64)


def test_same_bytes_same_digest_across_store_kinds(tmp_path):
    data = canonical_json({"k": "v"})
    on_disk = ArtifactStore(tmp_path).put(data, "config")
    in_memory = EphemeralArtifactStore().put(data, "config")
    assert on_disk.digest == in_memory.digest


# --------------------------------------------------------------- embedding

def _oracle_embedding(text, dimensions):
    """Independent re-derivation of the documented embedding scheme."""
    import re

    tokens = re.findall(r"\w+", text.lower())
    if len(tokens) < 3:
        grams = [" ".join(tokens)]
    else:
        grams = [" ".join(tokens[i : i + 3]) for i in range(len(tokens) - 2)]
    vec = [0.0] * dimensions
    first = None
    for gram in grams:
        h = int.from_bytes(hashlib.blake2b(gram.encode(), digest_size=8).digest(), "big")
        if first is None:
            first = h % dimensions
        vec[h % dimensions] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0.0:
        vec[first] = 1.0
        norm = 1.0
    return tuple(x / norm for x in vec)


def test_embedding_matches_independent_reimplementation():
    texts = [
        "AssertionError: expected 4, got 5",
        "ModuleNotFoundError: No module named requests",
        "short",
        "a b",
        "timeout exceeded while waiting for the database fixture to start",
    ]
    for text in texts:
        assert embed_text(text, 64) == _oracle_embedding(text, 64)
        assert embed_text(text) == _oracle_embedding(text, 256)


def test_embedding_is_deterministic_across_calls():
    assert embed_text("same input text here") == embed_text("same input text here")


def test_embedding_is_unit_norm():
    vec = embed_text("some message with several tokens inside it")
    assert math.sqrt(sum(x * x for x in vec)) == pytest.approx(1.0)


def test_embedding_rejects_tokenless_text():
    with pytest.raises(ValidationError):
        embed_text("!!! --- !!!")


def test_embedding_rejects_bad_dimensions():
    with pytest.raises(ValidationError):
        embed_text("text", dimensions=0)


@given(st.text(alphabet=st.characters(codec="ascii"), min_size=1))
@settings(max_examples=100)
def test_embedding_norm_property(text):
    import re

    if not re.findall(r"\w+", text.lower()):
        return
    vec = embed_text(text, 32)
    assert math.sqrt(sum(x * x for x in vec)) == pytest.approx(1.0)


# --------------------------------------------------------------- retrieval

def test_identical_text_retrieves_itself_first():
    memory = VectorMemory(dimensions=64)
    memory.add("failure", "AssertionError in parser", "ref-a", 1)
    memory.add("failure", "network unreachable", "ref-b", 1)
    query = embed_text("AssertionError in parser", 64)
    (top, similarity), *_ = memory.query_similar(query, k=1)
    assert top.payload_ref == "ref-a"
    assert similarity == pytest.approx(1.0)


def test_query_matches_exhaustive_scan_exactly():
    # oracle: a flat cosine scan over every record, same tiebreak
    rng = random.Random(7)
    memory = VectorMemory(dimensions=32)
    words = ["parse", "fail", "timeout", "assert", "import", "mock", "db", "value"]
    for i in range(300):
        text = " ".join(rng.choices(words, k=rng.randint(1, 6)))
        memory.add("failure", text, f"ref-{i}", 1)
    query = embed_text("timeout while waiting on db", 32)

    def cosine(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return 0.0 if na == 0 or nb == 0 else dot / na / nb

    scan = sorted(
        ((r, cosine(query, r.embedding)) for r in memory.records()),
        key=lambda pair: (-pair[1], pair[0].insertion_seq),
    )
    for k in (1, 5, 50, 300):
        assert memory.query_similar(query, k) == scan[:k]


def test_equal_similarity_breaks_ties_by_insertion_order():
    memory = VectorMemory(dimensions=32)
    memory.add("failure", "identical message", "first", 1)
    memory.add("failure", "identical message", "second", 1)
    hits = memory.query_similar(embed_text("identical message", 32), k=2)
    assert [h.payload_ref for h, _ in hits] == ["first", "second"]


def test_query_dimension_mismatch_is_rejected():
    memory = VectorMemory(dimensions=16)
    memory.add("failure", "text", "ref", 1)
    with pytest.raises(ValidationError):
        memory.query_similar((0.0,) * 8, k=1)


def test_query_k_must_be_positive():
    with pytest.raises(ValidationError):
        VectorMemory().query_similar((0.0,) * 256, k=0)


# ------------------------------------------------------------------- prune

def test_prune_keeps_the_last_window_of_iterations():
    memory = VectorMemory(dimensions=16, window=2, capacity=100)
    for stamp in (1, 2, 3, 4, 5, 6):
        memory.add("failure", f"iteration {stamp} message", f"ref-{stamp}", stamp)
        memory.add("feedback", f"iteration {stamp} summary", f"sum-{stamp}", stamp)
    removed = memory.prune()
    # 12 records over 6 iterations, window 2: stamps 5 and 6 survive
    assert removed == 8
    assert sorted({r.iteration_stamp for r in memory.records()}) == [5, 6]
    assert len(memory) == 4


def test_prune_enforces_capacity_oldest_first():
    memory = VectorMemory(dimensions=16, window=10, capacity=3)
    for i in range(6):
        memory.add("failure", f"message number {i}", f"ref-{i}", 1)
    memory.prune()
    assert [r.payload_ref for r in memory.records()] == ["ref-3", "ref-4", "ref-5"]


def test_prune_window_then_capacity():
    memory = VectorMemory(dimensions=16, window=1, capacity=2)
    for i in range(4):
        memory.add("failure", f"old {i}", f"old-{i}", 1)
    for i in range(4):
        memory.add("failure", f"new {i}", f"new-{i}", 2)
    removed = memory.prune()
    assert removed == 6
    refs = [r.payload_ref for r in memory.records()]
    assert refs == ["new-2", "new-3"]


def test_prune_on_empty_store_is_a_noop():
    assert VectorMemory().prune() == 0


def test_prune_keeps_insertion_order():
    memory = VectorMemory(dimensions=16, window=4, capacity=100)
    for i in range(5):
        memory.add("failure", f"m {i}", f"r-{i}", 1)
    memory.prune()
    seqs = [r.insertion_seq for r in memory.records()]
    assert seqs == sorted(seqs)


# ----------------------------------------------------------------- archive

def _metrics(iteration):
    return IterationMetrics(
        iteration=iteration,
        coverage=0.5,
        failure_rate=0.5,
        wall_time_s=1.0,
        counts=IterationCounts(1, 0, 1, 0, 0),
    )


def test_archive_metrics_round_trip(tmp_path):
    archive = RunArchive(tmp_path, "run-x").create()
    archive.record_metrics(_metrics(1))
    archive.record_metrics(_metrics(2))
    history = archive.metrics_history()
    assert [m.iteration for m in history] == [1, 2]
    assert history[0] == _metrics(1)


def test_archive_rejects_gaps_in_the_iteration_order(tmp_path):
    archive = RunArchive(tmp_path, "run-x").create()
    archive.record_metrics(_metrics(1))
    with pytest.raises(IntegrityError):
        archive.record_metrics(_metrics(3))


def test_archive_first_iteration_must_be_one(tmp_path):
    archive = RunArchive(tmp_path, "run-x").create()
    with pytest.raises(IntegrityError):
        archive.record_metrics(_metrics(2))


def test_archive_maps_iterations_to_digests(tmp_path):
    archive = RunArchive(tmp_path, "run-x").create()
    archive.map_suite(1, "a" * 64)
    archive.map_result(1, "b" * 64)
    assert archive.suite_digest(1) == "a" * 64
    assert archive.result_digest(1) == "b" * 64
    with pytest.raises(NotFoundError):
        archive.suite_digest(2)


def test_archive_suite_digest_joins_with_the_store(tmp_path):
    store = ArtifactStore(tmp_path)
    archive = RunArchive(tmp_path, "run-y").create()
    suite = make_suite([make_test()])
    address = store.put_json(suite.to_dict(), "test-suite")
    archive.map_suite(1, address.digest)
    loaded = store.get_json(archive.suite_digest(1))
    assert loaded == suite.to_dict()


def test_archive_config_and_report_round_trip(tmp_path):
    archive = RunArchive(tmp_path, "run-z").create()
    archive.write_config({"generator": "synthetic"})
    archive.write_report({"converged": True})
    assert archive.read_config() == {"generator": "synthetic"}
    assert archive.read_report() == {"converged": True}
