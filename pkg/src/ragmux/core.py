"""Domain types, configuration, and structural validation shared by all modules."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields
from typing import Iterable

PLACEHOLDER_RE = re.compile(r"#(\d+)")

# Stages that accumulate tokens in a ledger. "retrieval_aux" covers LLM calls
# made on behalf of retrieval itself (e.g. text-to-SQL translation).
LEDGER_STAGES = (
    "decomposition",
    "routing",
    "extraction",
    "reflexion",
    "fusion",
    "retrieval_aux",
)

SOURCE_KINDS = ("vector_corpus", "sql_table", "json_log", "merged")


class RagmuxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RagmuxError):
    """Invalid configuration value or config file."""


class DagValidationError(RagmuxError):
    """A structurally invalid subquery DAG was used where a valid one is required."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def placeholder_indices(text: str) -> set[int]:
    """Indices k referenced as "#k" in a subquery template."""
    return {int(m) for m in PLACEHOLDER_RE.findall(text)}


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text must be non-empty after trimming")


@dataclass(frozen=True)
class SubqueryNode:
    """One atomic subquestion. ``template`` may reference earlier answers as "#k"."""

    index: int
    template: str
    depends_on: frozenset[int] = frozenset()


@dataclass(frozen=True)
class SubqueryDAG:
    nodes: tuple[SubqueryNode, ...]

    def node(self, index: int) -> SubqueryNode:
        return self.nodes[index - 1]

    def __len__(self) -> int:
        return len(self.nodes)


def validate_dag(dag: SubqueryDAG) -> list[str]:
    """Check all DAG invariants. Returns a list of violations; empty means ok."""
    violations: list[str] = []
    for position, node in enumerate(dag.nodes, start=1):
        if node.index != position:
            violations.append(
                f"node at position {position} has index {node.index} (indices must be 1..n)"
            )
    for node in dag.nodes:
        for dep in sorted(node.depends_on):
            if dep >= node.index:
                violations.append(f"forward dependency {node.index}->{dep}")
            elif dep < 1:
                violations.append(f"node {node.index}: dependency {dep} out of range")
        for k in sorted(placeholder_indices(node.template)):
            if k not in node.depends_on:
                violations.append(f"node {node.index}: unhoused placeholder #{k}")
    return violations


def topological_order(dag: SubqueryDAG) -> list[int]:
    """Execution order of node indices. Indices ascend, so this is 1..n."""
    violations = validate_dag(dag)
    if violations:
        raise DagValidationError(violations)
    return [node.index for node in dag.nodes]


def single_node_dag(text: str) -> SubqueryDAG:
    """The degenerate plan used when decomposition is disabled or unparseable."""
    return SubqueryDAG(nodes=(SubqueryNode(index=1, template=text),))


@dataclass(frozen=True)
class SourceDescriptor:
    """A named (tool kind, corpus handle) pair plus its router-visible profile."""

    name: str
    kind: str
    profile: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not self.profile.strip():
            raise ValueError(f"source {self.name!r} has an empty profile")


@dataclass(frozen=True)
class TokenCount:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0
    estimated: bool = False

    def __post_init__(self):
        if min(self.prompt_tokens, self.completion_tokens, self.total_tokens) < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenCount") -> "TokenCount":
        return TokenCount(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
            total_tokens=self.total_tokens + other.total_tokens,
            estimated=self.estimated or other.estimated,
        )

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "estimated": self.estimated,
        }


ZERO_TOKENS = TokenCount()


@dataclass(frozen=True)
class PipelineConfig:
    """Stage toggles and model parameters governing one pipeline run."""

    decompose: bool = True
    use_routing: bool = True
    use_reflexion: bool = True
    max_reflexion_attempts: int = 3
    top_k: int = 5
    model: str = "gpt-4o"
    temperature: float = 0.0
    request_timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if self.max_reflexion_attempts < 1:
            raise ConfigError("max_reflexion_attempts must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_CONFIG_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}


def parse_config(text: str) -> PipelineConfig:
    """Parse the flat key-value config document. Unknown keys are rejected."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    unknown = sorted(set(raw) - set(_CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config key {key!r} must be a scalar")
    try:
        return PipelineConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def render_config(config: PipelineConfig) -> str:
    """Render a config so that parse_config(render_config(c)) == c."""
    return json.dumps(config.to_dict(), indent=2) + "\n"


def load_config(path: str) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


@dataclass(frozen=True)
class AttemptRecord:
    """Outcome of one retrieval attempt for one subquery."""

    subquery_index: int
    resolved_text: str
    source_name: str
    raw_evidence: str
    extracted_answer: str
    success: bool
    attempt_number: int
    tokens: TokenCount = ZERO_TOKENS

    def to_dict(self) -> dict:
        return {
            "subquery_index": self.subquery_index,
            "resolved_text": self.resolved_text,
            "source_name": self.source_name,
            "raw_evidence": self.raw_evidence,
            "extracted_answer": self.extracted_answer,
            "success": self.success,
            "attempt_number": self.attempt_number,
            "tokens": self.tokens.to_dict(),
        }


class Memory:
    """Per-question success and failure logs. Confined to one pipeline run."""

    def __init__(self):
        self.successes: list[AttemptRecord] = []
        self.failures: list[AttemptRecord] = []

    def log_success(self, record: AttemptRecord) -> None:
        if not record.success:
            raise ValueError("cannot log a failed attempt as a success")
        if self.success_for(record.subquery_index) is not None:
            raise ValueError(
                f"subquery {record.subquery_index} already has a success record"
            )
        self.successes.append(record)

    def log_failure(self, record: AttemptRecord) -> None:
        if record.success:
            raise ValueError("cannot log a successful attempt as a failure")
        self.failures.append(record)

    def success_for(self, index: int) -> AttemptRecord | None:
        for record in self.successes:
            if record.subquery_index == index:
                return record
        return None

    def failed_sources(self, index: int) -> set[str]:
        """Names of sources that already failed for this subquery (route exclusion)."""
        return {
            r.source_name
            for r in self.failures
            if r.subquery_index == index and r.source_name
        }

    def to_dict(self) -> dict:
        return {
            "successes": [r.to_dict() for r in self.successes],
            "failures": [r.to_dict() for r in self.failures],
        }


@dataclass(frozen=True)
class TokenLedger:
    """Per-stage token accounting for one question."""

    stages: dict = field(default_factory=lambda: {s: 0 for s in LEDGER_STAGES})
    prompt_tokens: int = 0
    completion_tokens: int = 0
    estimated: bool = False

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    def to_dict(self) -> dict:
        return {
            "stages": {s: self.stages[s] for s in LEDGER_STAGES},
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total": self.total,
            "estimated": self.estimated,
        }


@dataclass(frozen=True)
class TranscriptEntry:
    """One LLM interaction: the stage it served, the exchange, and its cost."""

    stage: str
    prompt: str
    response: str
    tokens: TokenCount
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "prompt": self.prompt,
            "response": self.response,
            "tokens": self.tokens.to_dict(),
            "wall_time": self.wall_time,
        }


@dataclass
class RunTrace:
    """Full audit of one question, serializable as a single JSON document."""

    config: PipelineConfig
    query: Query
    dag: SubqueryDAG
    transcript: list[TranscriptEntry]
    attempts: list[AttemptRecord]
    memory: Memory
    ledger: TokenLedger
    final_answer: str

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "query": {"id": self.query.id, "text": self.query.text},
            "dag": {
                "nodes": [
                    {
                        "index": n.index,
                        "template": n.template,
                        "depends_on": sorted(n.depends_on),
                    }
                    for n in self.dag.nodes
                ]
            },
            "transcript": [e.to_dict() for e in self.transcript],
            "attempts": [a.to_dict() for a in self.attempts],
            "memory": self.memory.to_dict(),
            "ledger": self.ledger.to_dict(),
            "final_answer": self.final_answer,
        }

    def to_json(self) -> str:
        return to_canonical_json(self.to_dict())


def to_canonical_json(payload: dict) -> str:
    """The one JSON rendering used for traces and reports (byte-stable)."""
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def estimate_tokens(text: str) -> int:
    """Deterministic fallback token count: ceil(len/4)."""
    return math.ceil(len(text) / 4)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs. Shared by scoring backends."""
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def ledger_from_entries(entries: Iterable[TranscriptEntry]) -> TokenLedger:
    """Roll transcript entries up into per-stage counts."""
    stages = {s: 0 for s in LEDGER_STAGES}
    prompt = completion = 0
    estimated = False
    for entry in entries:
        bucket = "retrieval_aux" if entry.stage == "retrieval" else entry.stage
        if bucket not in stages:
            raise ValueError(f"unknown stage tag {entry.stage!r}")
        stages[bucket] += entry.tokens.total_tokens
        prompt += entry.tokens.prompt_tokens
        completion += entry.tokens.completion_tokens
        estimated = estimated or entry.tokens.estimated
    return TokenLedger(
        stages=stages,
        prompt_tokens=prompt,
        completion_tokens=completion,
        estimated=estimated,
    )
