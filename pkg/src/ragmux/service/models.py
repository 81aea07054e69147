"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ConfigOverrides(BaseModel):
    """Per-request overrides; any field set here wins over the config file."""

    decompose: bool | None = None
    use_routing: bool | None = None
    use_reflexion: bool | None = None
    max_reflexion_attempts: int | None = None
    top_k: int | None = None
    model: str | None = None
    temperature: float | None = None
    request_timeout: float | None = None
    max_retries: int | None = None


class GatewayChoice(BaseModel):
    """Which chat gateway serves the request: scripted when script_path is set."""

    script_path: str | None = None
    base_url: str | None = None


class AskRequest(BaseModel):
    question: str
    registry_path: str
    config_path: str | None = None
    prompts_dir: str | None = None
    overrides: ConfigOverrides = Field(default_factory=ConfigOverrides)
    gateway: GatewayChoice = Field(default_factory=GatewayChoice)


class AskResponse(BaseModel):
    answer: str
    trace: dict


class EvalRequest(BaseModel):
    dataset_path: str
    registry_path: str
    config_path: str | None = None
    prompts_dir: str | None = None
    overrides: ConfigOverrides = Field(default_factory=ConfigOverrides)
    gateway: GatewayChoice = Field(default_factory=GatewayChoice)
    limit: int | None = None
    jobs: int = 1
    include_traces: bool = False


class EvalResponse(BaseModel):
    report: dict
    traces: dict[str, dict] | None = None


class PartitionRequest(BaseModel):
    corpus_path: str
    profiles_path: str
    force: bool = False
    config_path: str | None = None
    prompts_dir: str | None = None
    overrides: ConfigOverrides = Field(default_factory=ConfigOverrides)
    gateway: GatewayChoice = Field(default_factory=GatewayChoice)


class PartitionResponse(BaseModel):
    counts: dict[str, int]
    documents: list[dict]
    changed: bool


class AblateRequest(BaseModel):
    dataset_path: str
    registry_path: str
    config_path: str | None = None
    prompts_dir: str | None = None
    overrides: ConfigOverrides = Field(default_factory=ConfigOverrides)
    gateway: GatewayChoice = Field(default_factory=GatewayChoice)
    settings: list[str] | None = None
    limit: int | None = None
    include_traces: bool = False


class AblateResponse(BaseModel):
    rows: list[dict]
    traces: dict[str, dict] | None = None
