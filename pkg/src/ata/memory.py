"""Shared persistence: content-addressed artifacts, vector memory, run records.

Three storage concerns live here because every agent touches them through
the same narrow surface:

- ArtifactStore: immutable blobs named by their SHA-256 digest, with an
  append-only NDJSON index. Suites, result documents, feedback bundles and
  reports all land here, so any trace line can be followed back to bytes.
- VectorMemory: deterministic embeddings over token 3-grams with exact
  cosine retrieval. This is the rolling context the review agent consults
  when forming repair hypotheses.
- Run archives: one directory per run holding config, per-iteration metrics,
  suite/result artifact addresses, the trace, and the final report. The
  ephemeral variants keep the same interface in memory for simulation
  batches where disk churn would dominate runtime.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import IntegrityError, NotFoundError, ValidationError
from .model import IterationMetrics

__all__ = [
    "canonical_json",
    "MEDIA_TYPES",
    "ArtifactAddress",
    "ArtifactStore",
    "EphemeralArtifactStore",
    "embed_text",
    "MemoryRecord",
    "VectorMemory",
    "RunArchive",
    "EphemeralArchive",
    "DEFAULT_DIMENSIONS",
]

DEFAULT_DIMENSIONS = 256

# Every blob in the store is tagged with one of these.
MEDIA_TYPES = frozenset(
    {
        "test-suite",
        "result-document",
        "feedback",
        "report",
        "trace",
        "scenario",
        "config",
        "text",
    }
)


def canonical_json(obj: Any) -> bytes:
    """Stable byte serialization: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True, slots=True)
class ArtifactAddress:
    digest: str
    media_type: str

    def __str__(self) -> str:
        return f"{self.media_type}:{self.digest}"


class ArtifactStore:
    """Content-addressed blob store on disk.

    The address is a pure function of the stored bytes, so put is idempotent
    and equality of addresses is equality of content.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self._objects = self.root / "objects"
        self._index = self.root / "index.ndjson"
        self._objects.mkdir(parents=True, exist_ok=True)

    def _path_for(self, digest: str) -> Path:
        return self._objects / digest[:2] / digest

    def put(self, data: bytes, media_type: str) -> ArtifactAddress:
        if media_type not in MEDIA_TYPES:
            raise ValidationError(f"unknown media type {media_type!r}")
        digest = hashlib.sha256(data).hexdigest()
        path = self._path_for(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.rename(path)
            entry = {
                "digest": digest,
                "media_type": media_type,
                "size": len(data),
                "ts": time.time(),
            }
            with self._index.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return ArtifactAddress(digest=digest, media_type=media_type)

    def put_json(self, obj: Any, media_type: str) -> ArtifactAddress:
        return self.put(canonical_json(obj), media_type)

    def get(self, address: ArtifactAddress | str) -> bytes:
        digest = address.digest if isinstance(address, ArtifactAddress) else address
        path = self._path_for(digest)
        if not path.exists():
            raise NotFoundError(f"no artifact with digest {digest!r}")
        return path.read_bytes()

    def get_json(self, address: ArtifactAddress | str) -> Any:
        return json.loads(self.get(address).decode("utf-8"))

    def __contains__(self, digest: str) -> bool:
        return self._path_for(digest).exists()


class EphemeralArtifactStore:
    """Same contract as ArtifactStore, held in a dict. For simulation runs."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}

    def put(self, data: bytes, media_type: str) -> ArtifactAddress:
        if media_type not in MEDIA_TYPES:
            raise ValidationError(f"unknown media type {media_type!r}")
        digest = hashlib.sha256(data).hexdigest()
        self._blobs.setdefault(digest, data)
        return ArtifactAddress(digest=digest, media_type=media_type)

    def put_json(self, obj: Any, media_type: str) -> ArtifactAddress:
        return self.put(canonical_json(obj), media_type)

    def get(self, address: ArtifactAddress | str) -> bytes:
        digest = address.digest if isinstance(address, ArtifactAddress) else address
        try:
            return self._blobs[digest]
        except KeyError:
            raise NotFoundError(f"no artifact with digest {digest!r}") from None

    def get_json(self, address: ArtifactAddress | str) -> Any:
        return json.loads(self.get(address).decode("utf-8"))

    def __contains__(self, digest: str) -> bool:
        return digest in self._blobs


_TOKEN = re.compile(r"\w+")


def embed_text(text: str, dimensions: int = DEFAULT_DIMENSIONS) -> tuple[float, ...]:
    """Deterministic unit-norm embedding via signed feature hashing.

    Tokens are lowercased word characters; features are consecutive token
    3-grams (or the whole token sequence when shorter). Each feature hashes
    to a bucket and a sign through blake2b, which is stable across processes
    and platforms, unlike the builtin hash. Raises ValidationError on text
    with no tokens at all.
    """
    if dimensions < 1:
        raise ValidationError("dimensions must be >= 1")
    tokens = _TOKEN.findall(text.lower())
    if not tokens:
        raise ValidationError("cannot embed text with no token content")
    if len(tokens) < 3:
        grams = [" ".join(tokens)]
    else:
        grams = [" ".join(tokens[i : i + 3]) for i in range(len(tokens) - 2)]

    vec = [0.0] * dimensions
    first_bucket = None
    for gram in grams:
        h = int.from_bytes(
            hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big"
        )
        bucket = h % dimensions
        if first_bucket is None:
            first_bucket = bucket
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[bucket] += sign

    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0.0:
        # opposite-signed grams can cancel; fall back to a deterministic axis
        assert first_bucket is not None
        vec[first_bucket] = 1.0
        norm = 1.0
    return tuple(x / norm for x in vec)


@dataclass(frozen=True, slots=True)
class MemoryRecord:
    record_id: str
    kind: str
    embedding: tuple[float, ...]
    payload_ref: str
    iteration_stamp: int
    insertion_seq: int

    def __post_init__(self) -> None:
        if self.iteration_stamp < 0:
            raise ValidationError("iteration_stamp must be >= 0")


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / math.sqrt(na) / math.sqrt(nb)


class VectorMemory:
    """Exact cosine retrieval over deterministic embeddings.

    Insertion order is the tiebreak: equal similarity ranks the earlier
    record first, so retrieval is reproducible run over run.
    """

    def __init__(
        self,
        dimensions: int = DEFAULT_DIMENSIONS,
        window: int = 4,
        capacity: int = 512,
    ):
        if dimensions < 1:
            raise ValidationError("dimensions must be >= 1")
        if window < 1:
            raise ValidationError("window must be >= 1")
        if capacity < 1:
            raise ValidationError("capacity must be >= 1")
        self.dimensions = dimensions
        self.window = window
        self.capacity = capacity
        self._records: list[MemoryRecord] = []
        self._next_seq = 0

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> tuple[MemoryRecord, ...]:
        return tuple(self._records)

    def add(
        self,
        kind: str,
        text: str,
        payload_ref: str,
        iteration_stamp: int,
    ) -> MemoryRecord:
        record = MemoryRecord(
            record_id=f"m{self._next_seq:06d}",
            kind=kind,
            embedding=embed_text(text, self.dimensions),
            payload_ref=payload_ref,
            iteration_stamp=iteration_stamp,
            insertion_seq=self._next_seq,
        )
        self._next_seq += 1
        self._records.append(record)
        return record

    def query_similar(
        self, query: Sequence[float], k: int
    ) -> list[tuple[MemoryRecord, float]]:
        """Top-k records by cosine similarity, exact and exhaustive."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        if len(query) != self.dimensions:
            raise ValidationError(
                f"query has {len(query)} dimensions, store uses {self.dimensions}"
            )
        scored = [
            (record, _cosine(query, record.embedding)) for record in self._records
        ]
        scored.sort(key=lambda pair: (-pair[1], pair[0].insertion_seq))
        return scored[:k]

    def prune(self, window: int | None = None, capacity: int | None = None) -> int:
        """Drop records outside the rolling window, then enforce capacity.

        Window pruning keeps the last W distinct iteration stamps relative to
        the newest one; capacity pruning then removes oldest insertions
        first. Returns the number of records removed.
        """
        window = self.window if window is None else window
        capacity = self.capacity if capacity is None else capacity
        if window < 1 or capacity < 1:
            raise ValidationError("window and capacity must be >= 1")
        if not self._records:
            return 0
        before = len(self._records)
        current = max(r.iteration_stamp for r in self._records)
        floor = current - window
        kept = [r for r in self._records if r.iteration_stamp > floor]
        if len(kept) > capacity:
            kept.sort(key=lambda r: r.insertion_seq)
            kept = kept[len(kept) - capacity :]
        self._records = sorted(kept, key=lambda r: r.insertion_seq)
        return before - len(self._records)


def _check_metrics_order(history: Sequence[IterationMetrics], new: IterationMetrics) -> None:
    if history:
        expected = history[-1].iteration + 1
        if new.iteration != expected:
            raise IntegrityError(
                f"metrics iteration {new.iteration} breaks the gap-free order, "
                f"expected {expected}"
            )
    elif new.iteration != 1:
        raise IntegrityError(
            f"first recorded metrics must be iteration 1, got {new.iteration}"
        )


class RunArchive:
    """Per-run record under <store root>/runs/<run id>/."""

    def __init__(self, store_root: Path | str, run_id: str):
        if not run_id or "/" in run_id:
            raise ValidationError(f"bad run id {run_id!r}")
        self.run_id = run_id
        self.root = Path(store_root) / "runs" / run_id
        self.trace_path = self.root / "trace.ndjson"
        self._metrics_path = self.root / "metrics.ndjson"
        self._suites_path = self.root / "suites.json"
        self._results_path = self.root / "results.json"
        self._config_path = self.root / "config.json"
        self._report_path = self.root / "report.json"

    def create(self) -> "RunArchive":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def exists(self) -> bool:
        return self._metrics_path.exists() or self._report_path.exists()

    def record_metrics(self, metrics: IterationMetrics) -> None:
        _check_metrics_order(self.metrics_history(), metrics)
        with self._metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")

    def metrics_history(self) -> list[IterationMetrics]:
        if not self._metrics_path.exists():
            return []
        out = []
        for line in self._metrics_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(IterationMetrics.from_dict(json.loads(line)))
        return out

    def _map_put(self, path: Path, iteration: int, digest: str) -> None:
        table = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        table[str(iteration)] = digest
        path.write_text(json.dumps(table, indent=2, sort_keys=True), encoding="utf-8")

    def _map_get(self, path: Path, iteration: int) -> str:
        table = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        try:
            return table[str(iteration)]
        except KeyError:
            raise NotFoundError(
                f"run {self.run_id!r} has no entry for iteration {iteration}"
            ) from None

    def map_suite(self, iteration: int, digest: str) -> None:
        self._map_put(self._suites_path, iteration, digest)

    def suite_digest(self, iteration: int) -> str:
        return self._map_get(self._suites_path, iteration)

    def map_result(self, iteration: int, digest: str) -> None:
        self._map_put(self._results_path, iteration, digest)

    def result_digest(self, iteration: int) -> str:
        return self._map_get(self._results_path, iteration)

    def result_digests(self) -> dict[int, str]:
        if not self._results_path.exists():
            return {}
        table = json.loads(self._results_path.read_text(encoding="utf-8"))
        return {int(k): v for k, v in table.items()}

    def write_config(self, config_doc: Mapping) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._config_path.write_text(
            json.dumps(config_doc, indent=2, sort_keys=True), encoding="utf-8"
        )

    def read_config(self) -> dict:
        if not self._config_path.exists():
            raise NotFoundError(f"run {self.run_id!r} has no stored config")
        return json.loads(self._config_path.read_text(encoding="utf-8"))

    def write_report(self, report_doc: Mapping) -> None:
        self._report_path.write_text(
            json.dumps(report_doc, indent=2, sort_keys=True), encoding="utf-8"
        )

    def read_report(self) -> dict:
        if not self._report_path.exists():
            raise NotFoundError(f"run {self.run_id!r} has no report")
        return json.loads(self._report_path.read_text(encoding="utf-8"))


class EphemeralArchive:
    """RunArchive lookalike with no disk. trace_path stays None."""

    trace_path = None

    def __init__(self, run_id: str = "ephemeral"):
        self.run_id = run_id
        self._metrics: list[IterationMetrics] = []
        self._suites: dict[int, str] = {}
        self._results: dict[int, str] = {}
        self._config: dict | None = None
        self._report: dict | None = None

    def create(self) -> "EphemeralArchive":
        return self

    def exists(self) -> bool:
        return bool(self._metrics or self._report)

    def record_metrics(self, metrics: IterationMetrics) -> None:
        _check_metrics_order(self._metrics, metrics)
        self._metrics.append(metrics)

    def metrics_history(self) -> list[IterationMetrics]:
        return list(self._metrics)

    def map_suite(self, iteration: int, digest: str) -> None:
        self._suites[iteration] = digest

    def suite_digest(self, iteration: int) -> str:
        try:
            return self._suites[iteration]
        except KeyError:
            raise NotFoundError(f"no suite recorded for iteration {iteration}") from None

    def map_result(self, iteration: int, digest: str) -> None:
        self._results[iteration] = digest

    def result_digest(self, iteration: int) -> str:
        try:
            return self._results[iteration]
        except KeyError:
            raise NotFoundError(f"no result recorded for iteration {iteration}") from None

    def result_digests(self) -> dict[int, str]:
        return dict(self._results)

    def write_config(self, config_doc: Mapping) -> None:
        self._config = dict(config_doc)

    def read_config(self) -> dict:
        if self._config is None:
            raise NotFoundError("no stored config")
        return dict(self._config)

    def write_report(self, report_doc: Mapping) -> None:
        self._report = dict(report_doc)

    def read_report(self) -> dict:
        if self._report is None:
            raise NotFoundError("no report")
        return dict(self._report)
