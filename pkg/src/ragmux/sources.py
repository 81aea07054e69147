"""Source registry and retrieval backends: vector corpus, SQL table, JSON log.

Every backend answers a subquery with a :class:`RetrievalResult`; the registry
makes them routable by name and can expose a merged flat-corpus view for runs
with routing disabled.
"""

from __future__ import annotations

import hashlib
import json
import re
import sqlite3
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RagmuxError, SourceDescriptor, tokenize
from .gateway import ChatRequest
from .stages import DEFAULT_PROMPTS, PromptLibrary

DEFAULT_DIMENSION = 256
DEFAULT_ROW_LIMIT = 20

SEGMENTS = ("local", "global", "unassigned")

_SELECT_RE = re.compile(r"^\s*select\b", re.IGNORECASE)
_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*?)\n?```\s*$", re.DOTALL)


class RegistryError(RagmuxError):
    """Bad source registration or lookup."""


class IngestionError(RagmuxError):
    """A corpus, log, or dataset file failed to parse or violates invariants."""


class EmptyCorpusError(RagmuxError):
    """Retrieval was attempted against a corpus with no documents."""


class SqlGuardError(RagmuxError):
    """Generated SQL was rejected: only a single SELECT statement may run."""


class SqlExecutionError(RagmuxError):
    """The backing store failed to execute a guarded SELECT."""


class UnsupportedMergeError(RagmuxError):
    """The merged view requires every registered source to be a vector corpus."""


@dataclass(frozen=True)
class CorpusDocument:
    id: str
    title: str
    text: str
    segment: str = "unassigned"

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")
        if self.segment not in SEGMENTS:
            raise ValueError(f"document {self.id!r} has unknown segment {self.segment!r}")


@dataclass(frozen=True)
class Passage:
    doc_id: str
    title: str
    text: str
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    passages: tuple[Passage, ...]
    source_name: str

    def __post_init__(self):
        scores = [p.score for p in self.passages]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieval scores must be non-increasing")

    def evidence_text(self) -> str:
        parts = []
        for p in self.passages:
            parts.append(f"- {p.title}: {p.text}" if p.title else f"- {p.text}")
        return "\n\n".join(parts)


@dataclass(frozen=True)
class EmbeddingVector:
    components: tuple[float, ...]
    norm: float

    def as_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=np.float64)


def _token_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def embed(text: str, dimension: int = DEFAULT_DIMENSION) -> EmbeddingVector:
    """Deterministic signed feature-hashing embedder, L2-normalized.

    Tokens hash into ``dimension`` buckets with a fixed 64-bit hash; the top
    bit picks the sign. Identical text embeds identically on every platform.
    """
    vec = np.zeros(dimension, dtype=np.float64)
    for token in tokenize(text):
        h = _token_hash(token)
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[h % dimension] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec = vec / norm
        norm = 1.0
    return EmbeddingVector(components=tuple(float(x) for x in vec), norm=norm)


class VectorCorpus:
    """Flat corpus with precomputed embeddings and exact top-k cosine search."""

    kind = "vector_corpus"

    def __init__(self, documents, dimension: int = DEFAULT_DIMENSION, name: str = ""):
        docs = list(documents)
        seen: set[str] = set()
        for doc in docs:
            if doc.id in seen:
                raise IngestionError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
        self.documents: list[CorpusDocument] = docs
        self.dimension = dimension
        self.name = name
        if docs:
            self._matrix = np.vstack([embed(d.text, dimension).as_array() for d in docs])
        else:
            self._matrix = np.zeros((0, dimension), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.documents)

    def retrieve(self, query_text: str, k: int) -> RetrievalResult:
        if not self.documents:
            raise EmptyCorpusError(f"corpus {self.name!r} has no documents")
        if k < 1:
            raise ValueError("k must be >= 1")
        qvec = embed(query_text, self.dimension).as_array()
        # Quantize before ranking: equal cosines must tie exactly regardless of
        # the platform's dot-product summation order, so id tie-breaks hold.
        scores = [round(float(s), 12) for s in self._matrix @ qvec]
        order = sorted(
            range(len(self.documents)),
            key=lambda i: (-scores[i], self.documents[i].id),
        )[:k]
        passages = tuple(
            Passage(
                doc_id=self.documents[i].id,
                title=self.documents[i].title,
                text=self.documents[i].text,
                score=scores[i],
            )
            for i in order
        )
        return RetrievalResult(passages=passages, source_name=self.name)


class JsonLogSource:
    """Semi-structured JSON records ranked by shared-token count."""

    kind = "json_log"

    def __init__(self, records, name: str = ""):
        self.records: list[dict] = list(records)
        self.name = name
        self._rendered = [self._render(r) for r in self.records]
        self._tokens = [set(tokenize(text)) for text in self._rendered]

    @staticmethod
    def _render(record: dict) -> str:
        return "\n".join(f"{key}={value}" for key, value in record.items())

    def __len__(self) -> int:
        return len(self.records)

    def retrieve(self, query_text: str, k: int) -> RetrievalResult:
        if not self.records:
            raise EmptyCorpusError(f"json log {self.name!r} has no records")
        query_tokens = set(tokenize(query_text))
        overlaps = [len(query_tokens & toks) for toks in self._tokens]
        order = sorted(range(len(self.records)), key=lambda i: (-overlaps[i], i))[:k]
        passages = tuple(
            Passage(
                doc_id=str(i),
                title=f"record {i}",
                text=self._rendered[i],
                score=float(overlaps[i]),
            )
            for i in order
        )
        return RetrievalResult(passages=passages, source_name=self.name)


@dataclass(frozen=True)
class SqlSchemaCard:
    table: str
    columns: tuple[tuple[str, str, str], ...]  # (name, type tag, description)

    def __post_init__(self):
        if not self.columns:
            raise ValueError(f"schema for table {self.table!r} declares no columns")

    def render(self) -> str:
        return "\n".join(f"- {n} ({t}): {d}" for n, t, d in self.columns)


def strip_fences(text: str) -> str:
    """Drop a ``` wrapper (with optional language tag) around generated SQL."""
    stripped = text.strip()
    match = _FENCE_RE.match(stripped)
    if match:
        stripped = match.group(1).strip()
    return stripped


def is_single_select(sql: str) -> bool:
    """Statement classifier: exactly one statement, and it starts with SELECT."""
    body = sql.strip().rstrip(";").strip()
    if not body or ";" in body:
        return False
    return bool(_SELECT_RE.match(body))


class SqlSource:
    """Single-file relational store queried via guarded text-to-SQL."""

    kind = "sql_table"

    def __init__(
        self,
        path: str | Path,
        schema: SqlSchemaCard,
        name: str = "",
        row_limit: int = DEFAULT_ROW_LIMIT,
    ):
        self.path = Path(path)
        self.schema = schema
        self.name = name
        self.row_limit = row_limit

    def translation_prompt(self, subquery_text: str, prompts: PromptLibrary) -> str:
        return prompts.render(
            "sql_translation",
            table=self.schema.table,
            columns=self.schema.render(),
            question=subquery_text,
        )

    def execute_guarded(self, sql: str) -> RetrievalResult:
        statement = strip_fences(sql)
        if not is_single_select(statement):
            raise SqlGuardError(f"rejected non-SELECT statement: {statement[:160]!r}")
        try:
            conn = sqlite3.connect(f"file:{self.path}?mode=ro", uri=True)
            try:
                cursor = conn.execute(statement)
                columns = [c[0] for c in cursor.description] if cursor.description else []
                rows = cursor.fetchmany(self.row_limit)
            finally:
                conn.close()
        except sqlite3.Error as exc:
            raise SqlExecutionError(f"SQL execution failed: {exc}") from exc
        lines = [
            ", ".join(f"{col}={value}" for col, value in zip(columns, row)) for row in rows
        ]
        passage = Passage(
            doc_id="rows",
            title=f"{self.schema.table} query result",
            text="\n".join(lines),
            score=1.0,
        )
        return RetrievalResult(passages=(passage,), source_name=self.name)


def sql_retrieve(
    source: SqlSource,
    subquery_text: str,
    gateway,
    model: str,
    temperature: float = 0.0,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
    on_call=None,
) -> RetrievalResult:
    """Translate the subquery to one SELECT via the gateway, then execute it."""
    prompt = source.translation_prompt(subquery_text, prompts)
    response = gateway.complete(ChatRequest.single(model, prompt, temperature))
    if on_call is not None:
        on_call(prompt, response)
    return source.execute_guarded(response.content)


class Registry:
    """Insertion-ordered mapping of source name to (descriptor, backend)."""

    def __init__(self):
        self._entries: dict[str, tuple[SourceDescriptor, object]] = {}
        self._merged: VectorCorpus | None = None

    def register(self, descriptor: SourceDescriptor, backend) -> "Registry":
        if descriptor.name in self._entries:
            raise RegistryError(f"source {descriptor.name!r} is already registered")
        if descriptor.kind == "merged":
            raise RegistryError("the merged view is derived, not registered")
        backend.name = descriptor.name
        self._entries[descriptor.name] = (descriptor, backend)
        self._merged = None
        return self

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def get(self, name: str) -> tuple[SourceDescriptor, object]:
        if name not in self._entries:
            raise RegistryError(f"unknown source {name!r}")
        return self._entries[name]

    def router_view(self) -> list[tuple[str, str]]:
        return [(d.name, d.profile) for d, _ in self._entries.values()]

    def merged_view(self) -> tuple[SourceDescriptor, VectorCorpus]:
        """Union of all corpora as one flat corpus; requires corpus-only sources."""
        non_corpus = [
            d.name for d, _ in self._entries.values() if d.kind != "vector_corpus"
        ]
        if non_corpus:
            raise UnsupportedMergeError(
                "cannot merge non-corpus sources into a single index: "
                + ", ".join(non_corpus)
            )
        if not self._entries:
            raise RegistryError("registry has no sources to merge")
        if self._merged is None:
            backends = [b for _, b in self._entries.values()]
            dimensions = {b.dimension for b in backends}
            if len(dimensions) > 1:
                raise UnsupportedMergeError(
                    f"corpora disagree on embedding dimension: {sorted(dimensions)}"
                )
            documents = [doc for b in backends for doc in b.documents]
            self._merged = VectorCorpus(
                documents, dimension=dimensions.pop(), name="merged"
            )
        descriptor = SourceDescriptor(
            name="merged",
            kind="merged",
            profile="Union of every registered corpus as one flat index.",
        )
        return descriptor, self._merged


def register_source(registry: Registry, descriptor: SourceDescriptor, backend) -> Registry:
    return registry.register(descriptor, backend)


def vector_retrieve(corpus: VectorCorpus, query_text: str, k: int) -> RetrievalResult:
    return corpus.retrieve(query_text, k)


def json_retrieve(source: JsonLogSource, query_text: str, k: int) -> RetrievalResult:
    return source.retrieve(query_text, k)


def merged_view(registry: Registry) -> tuple[SourceDescriptor, VectorCorpus]:
    return registry.merged_view()


def load_corpus(path: str | Path) -> list[CorpusDocument]:
    """Read a JSON Lines corpus of {id, title, text, segment?} documents."""
    documents: list[CorpusDocument] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            try:
                doc = CorpusDocument(
                    id=str(raw["id"]),
                    title=str(raw.get("title", "")),
                    text=str(raw["text"]),
                    segment=raw.get("segment", "unassigned"),
                )
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"{path}: line {lineno}: {exc}") from exc
            if doc.id in seen:
                raise IngestionError(f"{path}: line {lineno}: duplicate id {doc.id!r}")
            seen.add(doc.id)
            documents.append(doc)
    return documents


def save_corpus(path: str | Path, documents) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(
                json.dumps(
                    {"id": doc.id, "title": doc.title, "text": doc.text, "segment": doc.segment},
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_json_log(path: str | Path) -> list[dict]:
    records: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise IngestionError(f"{path}: line {lineno}: expected a JSON object")
            records.append(raw)
    return records


def load_registry(path: str | Path) -> Registry:
    """Build a registry from a JSON document {"sources": [{name, kind, profile, params}]}.

    Relative paths in params resolve against the registry file's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("sources"), list):
        raise IngestionError(f"{path}: expected an object with a 'sources' list")
    registry = Registry()
    for i, entry in enumerate(raw["sources"]):
        try:
            descriptor = SourceDescriptor(
                name=entry["name"],
                kind=entry["kind"],
                profile=entry["profile"],
                params=entry.get("params", {}),
            )
        except (KeyError, ValueError) as exc:
            raise IngestionError(f"{path}: sources[{i}]: {exc}") from exc
        backend = _build_backend(descriptor, base_dir=path.parent)
        registry.register(descriptor, backend)
    if not len(registry):
        raise IngestionError(f"{path}: registry lists no sources")
    return registry


def _resolve(base_dir: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base_dir / p


def _build_backend(descriptor: SourceDescriptor, base_dir: Path):
    params = descriptor.params
    if "path" not in params:
        raise IngestionError(f"source {descriptor.name!r}: params.path is required")
    data_path = _resolve(base_dir, params["path"])
    if descriptor.kind == "vector_corpus":
        documents = load_corpus(data_path)
        dimension = int(params.get("dimension", DEFAULT_DIMENSION))
        return VectorCorpus(documents, dimension=dimension, name=descriptor.name)
    if descriptor.kind == "json_log":
        return JsonLogSource(load_json_log(data_path), name=descriptor.name)
    if descriptor.kind == "sql_table":
        if "table" not in params or "columns" not in params:
            raise IngestionError(
                f"source {descriptor.name!r}: sql_table needs params.table and params.columns"
            )
        columns = tuple(
            (c["name"], c.get("type", "TEXT"), c.get("description", ""))
            for c in params["columns"]
        )
        schema = SqlSchemaCard(table=params["table"], columns=columns)
        return SqlSource(
            data_path,
            schema,
            name=descriptor.name,
            row_limit=int(params.get("row_limit", DEFAULT_ROW_LIMIT)),
        )
    raise IngestionError(f"source {descriptor.name!r}: unsupported kind {descriptor.kind!r}")
