"""FastAPI service wrapping the engine and evalkit.

The service reads input files (registries, corpora, datasets, scripts) from
its own filesystem; clients own all output files. Requests are stateless, so
one long-running instance can serve many questions and eval jobs.
"""

from __future__ import annotations

import json
from dataclasses import replace

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..core import ConfigError, PipelineConfig, Query, RagmuxError, load_config
from ..engine import run_pipeline
from ..evalkit import ablate, ablation_grid, load_dataset, partition_corpus, run_eval
from ..gateway import HttpChatGateway, ScriptedGateway, load_script
from ..sources import load_corpus, load_registry
from ..stages import DEFAULT_PROMPTS, PromptLibrary
from .models import (
    AblateRequest,
    AblateResponse,
    AskRequest,
    AskResponse,
    ConfigOverrides,
    EvalRequest,
    EvalResponse,
    GatewayChoice,
    PartitionRequest,
    PartitionResponse,
)

app = FastAPI(title="ragmux", version=__version__)


@app.exception_handler(RagmuxError)
async def _domain_error(request: Request, exc: RagmuxError) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": str(exc)})


@app.exception_handler(OSError)
async def _os_error(request: Request, exc: OSError) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": str(exc)})


@app.exception_handler(ValueError)
async def _value_error(request: Request, exc: ValueError) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": str(exc)})


def resolve_config(config_path: str | None, overrides: ConfigOverrides) -> PipelineConfig:
    """Defaults < config file < per-request overrides."""
    config = load_config(config_path) if config_path else PipelineConfig()
    changes = overrides.model_dump(exclude_none=True)
    return replace(config, **changes) if changes else config


def resolve_prompts(prompts_dir: str | None) -> PromptLibrary:
    return PromptLibrary(prompts_dir) if prompts_dir else DEFAULT_PROMPTS


def make_gateway(choice: GatewayChoice, config: PipelineConfig):
    if choice.script_path:
        return ScriptedGateway(load_script(choice.script_path))
    return HttpChatGateway(
        base_url=choice.base_url,
        timeout=config.request_timeout,
        max_retries=config.max_retries,
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/ask", response_model=AskResponse)
def ask(request: AskRequest) -> AskResponse:
    registry = load_registry(request.registry_path)
    config = resolve_config(request.config_path, request.overrides)
    gateway = make_gateway(request.gateway, config)
    trace = run_pipeline(
        Query(id="ask", text=request.question), registry, config, gateway,
        prompts=resolve_prompts(request.prompts_dir),
    )
    return AskResponse(answer=trace.final_answer, trace=trace.to_dict())


@app.post("/eval", response_model=EvalResponse)
def eval_dataset(request: EvalRequest) -> EvalResponse:
    dataset = load_dataset(request.dataset_path)
    if request.limit is not None:
        dataset = dataset[: request.limit]
    registry = load_registry(request.registry_path)
    config = resolve_config(request.config_path, request.overrides)
    gateway = make_gateway(request.gateway, config)
    traces: dict[str, dict] = {}
    sink = (lambda qid, trace: traces.__setitem__(qid, trace.to_dict())) if request.include_traces else None
    report = run_eval(
        dataset, registry, config, gateway, jobs=request.jobs, trace_sink=sink,
        prompts=resolve_prompts(request.prompts_dir),
    )
    return EvalResponse(report=report.to_dict(), traces=traces if request.include_traces else None)


@app.post("/partition", response_model=PartitionResponse)
def partition(request: PartitionRequest) -> PartitionResponse:
    documents = load_corpus(request.corpus_path)
    with open(request.profiles_path, encoding="utf-8") as fh:
        profiles = json.load(fh)
    for key in ("local", "global"):
        if not isinstance(profiles, dict) or key not in profiles:
            raise ConfigError(f"profiles file must define a {key!r} profile")
    config = resolve_config(request.config_path, request.overrides)
    if request.force:
        documents = [replace(doc, segment="unassigned") for doc in documents]
    unassigned = sum(1 for doc in documents if doc.segment == "unassigned")
    if unassigned == 0:
        counts = {
            "local": sum(1 for d in documents if d.segment == "local"),
            "global": sum(1 for d in documents if d.segment == "global"),
            "classified": 0,
        }
        return PartitionResponse(
            counts=counts,
            documents=[_doc_dict(d) for d in documents],
            changed=False,
        )
    gateway = make_gateway(request.gateway, config)
    tagged, counts = partition_corpus(
        documents,
        profiles["local"],
        profiles["global"],
        gateway,
        model=config.model,
        temperature=config.temperature,
        prompts=resolve_prompts(request.prompts_dir),
    )
    return PartitionResponse(
        counts=counts, documents=[_doc_dict(d) for d in tagged], changed=True
    )


def _doc_dict(doc) -> dict:
    return {"id": doc.id, "title": doc.title, "text": doc.text, "segment": doc.segment}


@app.post("/ablate", response_model=AblateResponse)
def run_ablation(request: AblateRequest) -> AblateResponse:
    dataset = load_dataset(request.dataset_path)
    if request.limit is not None:
        dataset = dataset[: request.limit]
    registry = load_registry(request.registry_path)
    config = resolve_config(request.config_path, request.overrides)
    gateway = make_gateway(request.gateway, config)
    grid = ablation_grid(config, request.settings)
    traces: dict[str, dict] = {}
    sink = None
    if request.include_traces:
        sink = lambda setting, qid, trace: traces.__setitem__(
            f"{setting}/{qid}", trace.to_dict()
        )
    rows = ablate(
        dataset, registry, gateway, grid, trace_sink=sink,
        prompts=resolve_prompts(request.prompts_dir),
    )
    return AblateResponse(rows=rows, traces=traces if request.include_traces else None)
