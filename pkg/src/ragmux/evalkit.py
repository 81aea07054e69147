"""Dataset ingestion, corpus partitioning, EM/F1 scoring, token accounting,
fusion-effect analysis, and ablation sweeps over the stage toggles."""

from __future__ import annotations

import csv
import io
import json
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .core import (
    LEDGER_STAGES,
    PipelineConfig,
    Query,
    RagmuxError,
    RunTrace,
    TokenLedger,
    to_canonical_json,
)
from .engine import UNKNOWN_ANSWER, pre_fusion_answer, run_pipeline
from .gateway import ChatRequest, ScriptedGateway, ScriptError, SystemClock
from .sources import CorpusDocument, IngestionError, Registry
from .stages import (
    DEFAULT_PROMPTS,
    PromptLibrary,
    RouteParseError,
    RoutingContext,
    build_routing_prompt,
    parse_route,
)

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    gold_passage_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"example {self.id!r} has no gold answers")


@dataclass(frozen=True)
class EvalRecord:
    id: str
    predicted: str
    em: int
    f1: float
    ledger: TokenLedger
    pre_fusion_answer: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "predicted": self.predicted,
            "em": self.em,
            "f1": self.f1,
            "pre_fusion_answer": self.pre_fusion_answer,
            "ledger": self.ledger.to_dict(),
        }


@dataclass(frozen=True)
class FusionEffect:
    fixed: int = 0
    corrupted: int = 0
    unchanged_right: int = 0
    unchanged_wrong: int = 0

    @property
    def total(self) -> int:
        return self.fixed + self.corrupted + self.unchanged_right + self.unchanged_wrong

    def to_dict(self) -> dict:
        return {
            "fixed": self.fixed,
            "corrupted": self.corrupted,
            "unchanged_right": self.unchanged_right,
            "unchanged_wrong": self.unchanged_wrong,
        }


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    return " ".join(_ARTICLES_RE.sub(" ", lowered).split())


def exact_match(predicted: str, gold_answers, normalizer=normalize_answer) -> int:
    normalized = normalizer(predicted)
    return int(any(normalized == normalizer(g) for g in gold_answers))


def _f1_single(predicted: str, gold: str, normalizer) -> float:
    pred_tokens = normalizer(predicted).split()
    gold_tokens = normalizer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(predicted: str, gold_answers, normalizer=normalize_answer) -> float:
    """Token-overlap F1 against the best-matching gold answer."""
    return max(_f1_single(predicted, g, normalizer) for g in gold_answers)


def load_dataset(path) -> list[QaExample]:
    """Read a JSON Lines dataset of {id, question, answers, gold_passage_ids?}."""
    examples: list[QaExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                examples.append(
                    QaExample(
                        id=str(raw["id"]),
                        question=str(raw["question"]),
                        gold_answers=tuple(str(a) for a in raw["answers"]),
                        gold_passage_ids=tuple(
                            str(p) for p in raw.get("gold_passage_ids", [])
                        ),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestionError(f"{path}: line {lineno}: {exc}") from exc
    return examples


def partition_corpus(
    documents,
    local_profile: str,
    global_profile: str,
    gateway,
    model: str = "gpt-4o",
    temperature: float = 0.0,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> tuple[list[CorpusDocument], dict]:
    """Classify every unassigned document as local or global, one LLM call each.

    Route-parse failures fall back to global (the broader segment). Already
    tagged documents are left untouched so paid classification runs once.
    """
    if not local_profile.strip() or not global_profile.strip():
        raise ValueError("both segment profiles must be non-empty")
    tagged: list[CorpusDocument] = []
    counts = {"local": 0, "global": 0, "classified": 0}
    for doc in documents:
        segment = doc.segment
        if segment == "unassigned":
            text = f"{doc.title}\n{doc.text}" if doc.title else doc.text
            ctx = RoutingContext(
                subquery_text=text,
                sources=(("local", local_profile), ("global", global_profile)),
            )
            response = gateway.complete(
                ChatRequest.single(model, build_routing_prompt(ctx, prompts), temperature)
            )
            try:
                segment = parse_route(response.content, ["local", "global"])
            except RouteParseError:
                segment = "global"
            counts["classified"] += 1
            doc = replace(doc, segment=segment)
        counts[segment] += 1
        tagged.append(doc)
    return tagged, counts


@dataclass
class EvalReport:
    config: PipelineConfig
    records: list[EvalRecord]
    aggregate: dict
    fusion: FusionEffect
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "per_question": [r.to_dict() for r in self.records],
            "aggregate": self.aggregate,
            "fusion_effect": self.fusion.to_dict(),
            "wall_time": self.wall_time,
        }

    def to_json(self) -> str:
        return to_canonical_json(self.to_dict())

    def to_csv(self) -> str:
        return render_records_csv([r.to_dict() for r in self.records])


def render_records_csv(record_dicts: list[dict]) -> str:
    """Flatten per-question records into deterministic CSV text."""
    stage_cols = [f"tokens_{s}" for s in LEDGER_STAGES]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["id", "predicted", "em", "f1", "pre_fusion_answer",
         "prompt_tokens", "completion_tokens", "total_tokens", *stage_cols]
    )
    for rec in record_dicts:
        ledger = rec["ledger"]
        writer.writerow(
            [
                rec["id"], rec["predicted"], rec["em"], rec["f1"],
                rec["pre_fusion_answer"],
                ledger["prompt_tokens"], ledger["completion_tokens"], ledger["total"],
                *[ledger["stages"][s] for s in LEDGER_STAGES],
            ]
        )
    return buffer.getvalue()


def _evaluate_one(
    example: QaExample,
    registry: Registry,
    config: PipelineConfig,
    gateway,
    prompts: PromptLibrary,
) -> tuple[EvalRecord, RunTrace | None]:
    query = Query(id=example.id, text=example.question)
    try:
        trace = run_pipeline(query, registry, config, gateway, prompts)
    except ScriptError:
        raise  # a scripted test went off the rails; never mask that
    except RagmuxError:
        record = EvalRecord(
            id=example.id,
            predicted=UNKNOWN_ANSWER,
            em=0,
            f1=0.0,
            ledger=TokenLedger(),
            pre_fusion_answer=UNKNOWN_ANSWER,
        )
        return record, None
    predicted = trace.final_answer
    record = EvalRecord(
        id=example.id,
        predicted=predicted,
        em=exact_match(predicted, example.gold_answers),
        f1=f1_score(predicted, example.gold_answers),
        ledger=trace.ledger,
        pre_fusion_answer=pre_fusion_answer(trace),
    )
    return record, trace


def run_eval(
    dataset: list[QaExample],
    registry: Registry,
    config: PipelineConfig,
    gateway,
    jobs: int = 1,
    trace_sink=None,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> EvalReport:
    """Run the pipeline over a dataset and aggregate EM/F1/token means."""
    if not dataset:
        raise ValueError("dataset is empty")
    if not config.use_routing:
        registry.merged_view()  # unsupported source mixes fail before any call
    if isinstance(gateway, ScriptedGateway):
        jobs = 1  # a shared ordered script cannot be consumed concurrently
    clock = getattr(gateway, "clock", None) or SystemClock()
    started = clock.now()

    def worker(example: QaExample):
        return _evaluate_one(example, registry, config, gateway, prompts)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(worker, dataset))
    else:
        outcomes = [worker(example) for example in dataset]

    records = [record for record, _ in outcomes]
    if trace_sink is not None:
        for example, (_, trace) in zip(dataset, outcomes):
            if trace is not None:
                trace_sink(example.id, trace)

    n = len(records)
    aggregate = {
        "count": n,
        "em": sum(r.em for r in records) / n,
        "f1": sum(r.f1 for r in records) / n,
        "total_tokens": sum(r.ledger.total for r in records) / n,
        "prompt_tokens": sum(r.ledger.prompt_tokens for r in records) / n,
        "completion_tokens": sum(r.ledger.completion_tokens for r in records) / n,
        "stages": {
            s: sum(r.ledger.stages[s] for r in records) / n for s in LEDGER_STAGES
        },
    }
    golds = {example.id: example.gold_answers for example in dataset}
    fusion = fusion_effect(records, golds)
    return EvalReport(
        config=config,
        records=records,
        aggregate=aggregate,
        fusion=fusion,
        wall_time=clock.now() - started,
    )


def fusion_effect(records: list[EvalRecord], golds: dict) -> FusionEffect:
    """Classify each record by exact-match before fusion vs after."""
    fixed = corrupted = unchanged_right = unchanged_wrong = 0
    for record in records:
        before = exact_match(record.pre_fusion_answer, golds[record.id])
        after = record.em
        if before and after:
            unchanged_right += 1
        elif before and not after:
            corrupted += 1
        elif after:
            fixed += 1
        else:
            unchanged_wrong += 1
    return FusionEffect(
        fixed=fixed,
        corrupted=corrupted,
        unchanged_right=unchanged_right,
        unchanged_wrong=unchanged_wrong,
    )


# The eight stage-toggle settings reported by the ablation sweep.
ABLATION_SETTINGS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("full", True, True, True),
    ("no_reflexion", True, True, False),
    ("no_routing", True, False, True),
    ("no_decomposition", False, True, True),
    ("decomposition_only", True, False, False),
    ("routing_only", False, True, False),
    ("reflexion_only", False, False, True),
    ("naive", False, False, False),
)


def ablation_grid(
    base: PipelineConfig, settings: list[str] | None = None
) -> list[tuple[str, PipelineConfig]]:
    chosen = {name: (d, rt, rf) for name, d, rt, rf in ABLATION_SETTINGS}
    names = settings if settings is not None else [n for n, *_ in ABLATION_SETTINGS]
    unknown = [n for n in names if n not in chosen]
    if unknown:
        raise ValueError(f"unknown ablation settings: {', '.join(unknown)}")
    grid = []
    for name in names:
        d, rt, rf = chosen[name]
        grid.append(
            (name, replace(base, decompose=d, use_routing=rt, use_reflexion=rf))
        )
    return grid


def ablate(
    dataset: list[QaExample],
    registry: Registry,
    gateway,
    grid: list[tuple[str, PipelineConfig]],
    trace_sink=None,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> list[dict]:
    """Run one eval per config variant; unsupported variants are marked, not run."""
    if not grid:
        raise ValueError("ablation grid is empty")
    rows: list[dict] = []
    for name, config in grid:
        row = {
            "setting": name,
            "decompose": config.decompose,
            "use_routing": config.use_routing,
            "use_reflexion": config.use_reflexion,
        }
        sink = None
        if trace_sink is not None:
            sink = lambda qid, trace, _name=name: trace_sink(_name, qid, trace)
        try:
            report = run_eval(
                dataset, registry, config, gateway, trace_sink=sink, prompts=prompts
            )
        except RagmuxError as exc:
            if isinstance(exc, ScriptError):
                raise
            row.update(status="unsupported", em=None, f1=None, total_tokens=None,
                       detail=str(exc))
            rows.append(row)
            continue
        row.update(
            status="ok",
            em=report.aggregate["em"],
            f1=report.aggregate["f1"],
            total_tokens=report.aggregate["total_tokens"],
            detail="",
        )
        rows.append(row)
    return rows


def render_ablation_csv(rows: list[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["setting", "decompose", "use_routing", "use_reflexion", "status",
         "em", "f1", "total_tokens"]
    )
    for row in rows:
        writer.writerow(
            [
                row["setting"], row["decompose"], row["use_routing"],
                row["use_reflexion"], row["status"],
                "" if row["em"] is None else row["em"],
                "" if row["f1"] is None else row["f1"],
                "" if row["total_tokens"] is None else row["total_tokens"],
            ]
        )
    return buffer.getvalue()
