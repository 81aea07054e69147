"""Prompt builders and response parsers for the four pipeline stages.

All functions are pure; templates live in text assets under ``ragmux/prompts``
so they can be audited or overridden without code changes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import (
    Memory,
    AttemptRecord,
    PLACEHOLDER_RE,
    Query,
    RagmuxError,
    SubqueryDAG,
    SubqueryNode,
    placeholder_indices,
    validate_dag,
)

EVIDENCE_CAP = 8000
TRUNCATION_MARKER = "\n[evidence truncated]"

_NUMBERED_LINE_RE = re.compile(r"^\s*\d+\s*[.)\-]\s*(\S.*?)\s*$")
_ANSWER_LINE_RE = re.compile(r"^\s*answer\s*:\s*(.*)$", re.IGNORECASE)
_SUCCESS_LINE_RE = re.compile(r"^\s*success\s*:\s*(.*)$", re.IGNORECASE)
_REFLECTED_RE = re.compile(r"reflected subquestion\s*:", re.IGNORECASE)
_FINAL_ANSWER_RE = re.compile(r"final answer\s*:", re.IGNORECASE)


class DecompositionParseError(RagmuxError):
    """The planner response contained no parseable subquestion list."""


class DependencyUnresolvedError(RagmuxError):
    """A subquery depends on an answer that is not in memory."""


class RoutingExhaustedError(RagmuxError):
    """Every registered source has already failed for this subquery."""


class RouteParseError(RagmuxError):
    """The router response named no available source."""


class ReflexionParseError(RagmuxError):
    """The reflexion response contained no usable subquestion."""


class PromptLibrary:
    """Loads stage templates from package assets or an override directory."""

    _NAMES = ("decomposition", "routing", "extraction", "reflexion", "fusion", "sql_translation")

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._cache: dict[str, str] = {}

    def template(self, name: str) -> str:
        if name not in self._cache:
            if name not in self._NAMES:
                raise KeyError(f"unknown prompt template {name!r}")
            override = self.directory / f"{name}.txt" if self.directory else None
            if override is not None and override.exists():
                text = override.read_text(encoding="utf-8")
            else:
                text = (resources.files("ragmux") / "prompts" / f"{name}.txt").read_text(
                    encoding="utf-8"
                )
            self._cache[name] = text
        return self._cache[name]

    def render(self, name: str, **slots: str) -> str:
        return self.template(name).format(**slots)


DEFAULT_PROMPTS = PromptLibrary()


@dataclass(frozen=True)
class RoutingContext:
    """What the router sees for one subquery: candidates minus known failures."""

    subquery_text: str
    sources: tuple[tuple[str, str], ...]  # (name, profile), registry order
    excluded: frozenset[str] = frozenset()

    def __post_init__(self):
        names = {name for name, _ in self.sources}
        stray = self.excluded - names
        if stray:
            raise ValueError(f"excluded names not in source list: {sorted(stray)}")

    @property
    def candidates(self) -> list[tuple[str, str]]:
        return [(n, p) for n, p in self.sources if n not in self.excluded]


@dataclass(frozen=True)
class ExtractionVerdict:
    answer: str
    success: bool

    def __post_init__(self):
        if self.success and (not self.answer or self.answer.strip().upper() == "UNKNOWN"):
            raise ValueError("a successful verdict requires a grounded, non-UNKNOWN answer")


def build_decomposition_prompt(query: Query, prompts: PromptLibrary = DEFAULT_PROMPTS) -> str:
    if not query.text.strip():
        raise ValueError("cannot decompose an empty query")
    return prompts.render("decomposition", query=query.text)


def parse_subqueries(response: str) -> SubqueryDAG:
    """Parse a numbered subquestion list into a dependency DAG.

    Dependencies come from "#k" placeholders; a list with no placeholders at
    all falls back to a sequential chain (each node depends on the previous).
    """
    texts: list[str] = []
    for line in response.splitlines():
        match = _NUMBERED_LINE_RE.match(line)
        if match:
            texts.append(match.group(1))
    if not texts:
        raise DecompositionParseError(
            f"no numbered subquestions in response: {response[:160]!r}"
        )
    has_placeholders = any(placeholder_indices(t) for t in texts)
    nodes = []
    for i, text in enumerate(texts, start=1):
        if has_placeholders:
            deps = frozenset(placeholder_indices(text))
        else:
            deps = frozenset({i - 1}) if i > 1 else frozenset()
        nodes.append(SubqueryNode(index=i, template=text, depends_on=deps))
    dag = SubqueryDAG(nodes=tuple(nodes))
    violations = validate_dag(dag)
    if violations:
        raise DecompositionParseError("invalid subquery DAG: " + "; ".join(violations))
    return dag


def render_subqueries(dag: SubqueryDAG) -> str:
    """Inverse of parse_subqueries for well-formed DAGs."""
    return "\n".join(f"{n.index}. {n.template}" for n in dag.nodes)


def substitute_variables(node: SubqueryNode, memory: Memory) -> str:
    """Resolve every "#k" in the template against the answer of subquery k."""
    missing = sorted(k for k in node.depends_on if memory.success_for(k) is None)
    if missing:
        raise DependencyUnresolvedError(
            f"subquery {node.index}: no answer yet for dependencies {missing}"
        )

    def _replace(match: re.Match) -> str:
        record = memory.success_for(int(match.group(1)))
        if record is None:
            raise DependencyUnresolvedError(
                f"subquery {node.index}: placeholder {match.group(0)} has no answer"
            )
        return record.extracted_answer

    return PLACEHOLDER_RE.sub(_replace, node.template)


def build_routing_prompt(ctx: RoutingContext, prompts: PromptLibrary = DEFAULT_PROMPTS) -> str:
    candidates = ctx.candidates
    if not candidates:
        raise RoutingExhaustedError(
            f"all sources have failed for subquery: {ctx.subquery_text[:120]!r}"
        )
    source_lines = "\n".join(f"- {name}: {profile}" for name, profile in candidates)
    if ctx.excluded:
        failed = ", ".join(sorted(ctx.excluded))
        failed_note = (
            f"These sources already failed for this query and must not be chosen"
            f" again: {failed}.\n\n"
        )
    else:
        failed_note = ""
    choices = " or ".join(name for name, _ in candidates)
    return prompts.render(
        "routing",
        sources=source_lines,
        query=ctx.subquery_text,
        failed_note=failed_note,
        choices=choices,
    )


def parse_route(response: str, available: list[str]) -> str:
    """Map a router response to one of the available source names."""
    if not available:
        raise ValueError("parse_route requires at least one available source")
    cleaned = response.strip().casefold()
    for name in available:
        if cleaned == name.casefold():
            return name
    for name in available:
        if name.casefold() in cleaned:
            return name
    raise RouteParseError(
        f"router response names no available source {available}: {response[:120]!r}"
    )


def build_extraction_prompt(
    subquery_text: str, raw_evidence: str, prompts: PromptLibrary = DEFAULT_PROMPTS
) -> str:
    evidence = raw_evidence
    if len(evidence) > EVIDENCE_CAP:
        evidence = evidence[:EVIDENCE_CAP] + TRUNCATION_MARKER
    return prompts.render("extraction", query=subquery_text, evidence=evidence)


def parse_answer_success(response: str) -> ExtractionVerdict:
    """Read the two-line ANSWER/SUCCESS format; anything else is a failure."""
    answer: str | None = None
    said_yes = False
    for line in response.splitlines():
        if answer is None:
            match = _ANSWER_LINE_RE.match(line)
            if match:
                answer = match.group(1).strip()
                continue
        match = _SUCCESS_LINE_RE.match(line)
        if match:
            said_yes = match.group(1).strip().lower().startswith("yes")
    if answer is None:
        return ExtractionVerdict(answer=response.strip(), success=False)
    success = said_yes and bool(answer) and answer.strip().upper() != "UNKNOWN"
    return ExtractionVerdict(answer=answer, success=success)


def build_reflexion_prompt(
    failed_query: str, failed_result: str, prompts: PromptLibrary = DEFAULT_PROMPTS
) -> str:
    result = failed_result.strip() or "(no evidence)"
    return prompts.render("reflexion", failed_query=failed_query, failed_result=result)


def parse_reflected_subquestion(response: str) -> str:
    matches = list(_REFLECTED_RE.finditer(response))
    text = response[matches[-1].end():] if matches else response
    text = text.strip()
    if not text:
        raise ReflexionParseError("reflexion response contained no subquestion")
    return text


def build_fusion_prompt(
    query: Query,
    successes: list[AttemptRecord],
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> str:
    if not successes:
        raise ValueError("fusion requires at least one success record")
    ordered = sorted(successes, key=lambda r: r.subquery_index)
    chain = "\n".join(
        f"{r.subquery_index}. {r.resolved_text} → {r.extracted_answer}" for r in ordered
    )
    return prompts.render("fusion", question=query.text, chain=chain)


def parse_final_answer(response: str) -> str:
    """Text after the last "Final Answer:" marker; empty means caller falls back."""
    matches = list(_FINAL_ANSWER_RE.finditer(response))
    text = response[matches[-1].end():] if matches else response
    return text.strip()
