"""Pipeline controller: decompose, then per subquery substitute -> route ->
retrieve -> extract with a bounded self-correction loop, then fuse.

Produces a :class:`~ragmux.core.RunTrace` auditing every prompt, response,
routing decision, attempt, and the per-stage token ledger.
"""

from __future__ import annotations

from .core import (
    AttemptRecord,
    Memory,
    PipelineConfig,
    Query,
    RagmuxError,
    RunTrace,
    TokenCount,
    TokenLedger,
    TranscriptEntry,
    ZERO_TOKENS,
    ledger_from_entries,
    single_node_dag,
    topological_order,
)
from .gateway import ChatRequest, SystemClock
from .sources import Registry, RetrievalResult, SqlSource, sql_retrieve
from .stages import (
    DEFAULT_PROMPTS,
    DecompositionParseError,
    DependencyUnresolvedError,
    PromptLibrary,
    ReflexionParseError,
    RouteParseError,
    RoutingContext,
    build_decomposition_prompt,
    build_extraction_prompt,
    build_fusion_prompt,
    build_reflexion_prompt,
    build_routing_prompt,
    parse_answer_success,
    parse_final_answer,
    parse_reflected_subquestion,
    parse_route,
    parse_subqueries,
    substitute_variables,
)

UNKNOWN_ANSWER = "UNKNOWN"


class _RunState:
    """Mutable bookkeeping for one question's pipeline execution."""

    def __init__(self, query, registry, config, gateway, prompts):
        self.query: Query | None = query
        self.registry: Registry = registry
        self.config: PipelineConfig = config
        self.gateway = gateway
        self.prompts: PromptLibrary = prompts
        self.memory = Memory()
        self.transcript: list[TranscriptEntry] = []
        self.attempts: list[AttemptRecord] = []
        self.merged = None  # (descriptor, backend) when routing is disabled
        self.clock = getattr(gateway, "clock", None) or SystemClock()
        self.pending_tokens: TokenCount = ZERO_TOKENS

    def call(self, stage: str, prompt: str) -> str:
        request = ChatRequest.single(self.config.model, prompt, self.config.temperature)
        started = self.clock.now()
        response = self.gateway.complete(request)
        wall = self.clock.now() - started
        self.transcript.append(
            TranscriptEntry(
                stage=stage,
                prompt=prompt,
                response=response.content,
                tokens=response.usage,
                wall_time=wall,
            )
        )
        self.pending_tokens = self.pending_tokens + response.usage
        return response.content


class _RecordingGateway:
    """Adapter that routes a backend's LLM call through run-state recording."""

    def __init__(self, state: _RunState, stage: str):
        self.state = state
        self.stage = stage
        self.clock = state.clock

    def complete(self, request: ChatRequest):
        started = self.clock.now()
        response = self.state.gateway.complete(request)
        wall = self.clock.now() - started
        self.state.transcript.append(
            TranscriptEntry(
                stage=self.stage,
                prompt=request.content,
                response=response.content,
                tokens=response.usage,
                wall_time=wall,
            )
        )
        self.state.pending_tokens = self.state.pending_tokens + response.usage
        return response


def run_pipeline(
    query: Query,
    registry: Registry,
    config: PipelineConfig,
    gateway,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> RunTrace:
    """Run the full pipeline for one question and return its trace."""
    if not len(registry):
        raise RagmuxError("registry has no sources")
    state = _RunState(query, registry, config, gateway, prompts)
    if not config.use_routing:
        # Refuse up front rather than silently dropping non-mergeable sources.
        state.merged = registry.merged_view()

    if config.decompose:
        prompt = build_decomposition_prompt(query, prompts)
        response = state.call("decomposition", prompt)
        try:
            dag = parse_subqueries(response)
        except DecompositionParseError:
            dag = single_node_dag(query.text)
    else:
        dag = single_node_dag(query.text)

    for index in topological_order(dag):
        _execute_subquery(state, dag.node(index))

    final_answer = _fuse(state, dag)
    return RunTrace(
        config=config,
        query=query,
        dag=dag,
        transcript=state.transcript,
        attempts=state.attempts,
        memory=state.memory,
        ledger=ledger_from_entries(state.transcript),
        final_answer=final_answer,
    )


def execute_subquery(
    node,
    registry: Registry,
    memory: Memory,
    config: PipelineConfig,
    gateway,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
    transcript: list[TranscriptEntry] | None = None,
) -> AttemptRecord | None:
    """Run the attempt loop for one node against an existing memory."""
    state = _RunState(None, registry, config, gateway, prompts)
    state.memory = memory
    if transcript is not None:
        state.transcript = transcript
    if not config.use_routing:
        state.merged = registry.merged_view()
    return _execute_subquery(state, node)


def _record_failure(state: _RunState, record: AttemptRecord) -> AttemptRecord:
    state.memory.log_failure(record)
    state.attempts.append(record)
    return record


def _execute_subquery(state: _RunState, node) -> AttemptRecord | None:
    config = state.config
    try:
        resolved = substitute_variables(node, state.memory)
    except DependencyUnresolvedError as exc:
        # A node whose dependencies failed is failed without spending LLM calls.
        return _record_failure(
            state,
            AttemptRecord(
                subquery_index=node.index,
                resolved_text=node.template,
                source_name="",
                raw_evidence=f"[dependency unresolved] {exc}",
                extracted_answer="",
                success=False,
                attempt_number=1,
                tokens=ZERO_TOKENS,
            ),
        )

    current_text = resolved
    max_attempts = config.max_reflexion_attempts if config.use_reflexion else 1
    all_names = set(state.registry.names())
    attempt = 0
    last_record: AttemptRecord | None = None

    while attempt < max_attempts:
        if config.use_routing:
            excluded = state.memory.failed_sources(node.index) & all_names
            if not all_names - excluded:
                break  # routing exhausted: every source already failed here
        attempt += 1
        state.pending_tokens = ZERO_TOKENS

        source_name, backend, route_error = _route(state, node, current_text)
        if route_error is not None:
            last_record = _record_failure(
                state,
                AttemptRecord(
                    subquery_index=node.index,
                    resolved_text=current_text,
                    source_name="",
                    raw_evidence=f"[route parse error] {route_error}",
                    extracted_answer="",
                    success=False,
                    attempt_number=attempt,
                    tokens=state.pending_tokens,
                ),
            )
            current_text = _maybe_reflect(
                state, node, current_text, str(route_error), attempt, max_attempts, last_record
            )
            continue

        try:
            result = _retrieve(state, backend, current_text)
            evidence = result.evidence_text()
        except RagmuxError as exc:
            last_record = _record_failure(
                state,
                AttemptRecord(
                    subquery_index=node.index,
                    resolved_text=current_text,
                    source_name=source_name,
                    raw_evidence=f"[retrieval error] {exc}",
                    extracted_answer="",
                    success=False,
                    attempt_number=attempt,
                    tokens=state.pending_tokens,
                ),
            )
            current_text = _maybe_reflect(
                state, node, current_text, str(exc), attempt, max_attempts, last_record
            )
            continue

        prompt = build_extraction_prompt(current_text, evidence, state.prompts)
        response = state.call("extraction", prompt)
        verdict = parse_answer_success(response)
        record = AttemptRecord(
            subquery_index=node.index,
            resolved_text=current_text,
            source_name=source_name,
            raw_evidence=evidence,
            extracted_answer=verdict.answer,
            success=verdict.success,
            attempt_number=attempt,
            tokens=state.pending_tokens,
        )
        if verdict.success:
            state.memory.log_success(record)
            state.attempts.append(record)
            return record
        last_record = _record_failure(state, record)
        current_text = _maybe_reflect(
            state, node, current_text, verdict.answer, attempt, max_attempts, last_record
        )

    return last_record


def _route(state: _RunState, node, current_text: str):
    """Pick the backend for this attempt: LLM routing or the merged view."""
    if not state.config.use_routing:
        descriptor, backend = state.merged
        return descriptor.name, backend, None
    excluded = state.memory.failed_sources(node.index) & set(state.registry.names())
    ctx = RoutingContext(
        subquery_text=current_text,
        sources=tuple(state.registry.router_view()),
        excluded=frozenset(excluded),
    )
    prompt = build_routing_prompt(ctx, state.prompts)
    response = state.call("routing", prompt)
    try:
        name = parse_route(response, [n for n, _ in ctx.candidates])
    except RouteParseError as exc:
        return "", None, exc
    _, backend = state.registry.get(name)
    return name, backend, None


def _retrieve(state: _RunState, backend, current_text: str) -> RetrievalResult:
    if isinstance(backend, SqlSource):
        return sql_retrieve(
            backend,
            current_text,
            gateway=_RecordingGateway(state, "retrieval"),
            model=state.config.model,
            temperature=state.config.temperature,
            prompts=state.prompts,
        )
    return backend.retrieve(current_text, state.config.top_k)


def _maybe_reflect(
    state: _RunState,
    node,
    current_text: str,
    failed_result: str,
    attempt: int,
    max_attempts: int,
    failure: AttemptRecord,
) -> str:
    """After a failure, rephrase the subquery iff another attempt can follow."""
    if not state.config.use_reflexion or attempt >= max_attempts:
        return current_text
    if state.config.use_routing:
        all_names = set(state.registry.names())
        if not all_names - state.memory.failed_sources(node.index):
            return current_text  # next route would be exhausted; skip the call
    state.pending_tokens = ZERO_TOKENS
    prompt = build_reflexion_prompt(current_text, failed_result, state.prompts)
    response = state.call("reflexion", prompt)
    reflexion_tokens = state.pending_tokens
    if reflexion_tokens.total_tokens and failure is not None:
        # Attribute the rephrase cost to the failure that triggered it.
        updated = AttemptRecord(
            subquery_index=failure.subquery_index,
            resolved_text=failure.resolved_text,
            source_name=failure.source_name,
            raw_evidence=failure.raw_evidence,
            extracted_answer=failure.extracted_answer,
            success=failure.success,
            attempt_number=failure.attempt_number,
            tokens=failure.tokens + reflexion_tokens,
        )
        _replace_record(state, failure, updated)
    try:
        return parse_reflected_subquestion(response)
    except ReflexionParseError:
        return current_text  # call consumed; reuse the original text


def _replace_record(state: _RunState, old: AttemptRecord, new: AttemptRecord) -> None:
    for collection in (state.attempts, state.memory.failures):
        for i, record in enumerate(collection):
            if record is old:
                collection[i] = new


def _fuse(state: _RunState, dag) -> str:
    successes = state.memory.successes
    if not successes:
        return UNKNOWN_ANSWER
    if len(dag) == 1:
        # Single-node plans pass the lone subanswer through without an LLM call.
        return successes[-1].extracted_answer
    prompt = build_fusion_prompt(state.query, successes, state.prompts)
    response = state.call("fusion", prompt)
    answer = parse_final_answer(response)
    return answer if answer else successes[-1].extracted_answer


def ledger_rollup(trace: RunTrace) -> TokenLedger:
    """Recompute the per-stage ledger from a trace's transcript."""
    return ledger_from_entries(trace.transcript)


def pre_fusion_answer(trace: RunTrace) -> str:
    """The final subquery's extracted answer, before fusion touched anything."""
    record = trace.memory.success_for(len(trace.dag))
    return record.extracted_answer if record else UNKNOWN_ANSWER
