"""Shared test utilities: tiny registries and script builders that mirror the
engine's documented call order, so scripted scenarios can be generated."""

from __future__ import annotations

import random

from ragmux.core import PipelineConfig, SourceDescriptor
from ragmux.gateway import Script, ScriptEntry
from ragmux.sources import CorpusDocument, Registry, VectorCorpus

GOLDEN_CASES = [
    # (name, question, expected answer, expected routing sequence)
    (
        "case2",
        "What country is the birthplace of Erik Hort a part of?",
        "United States",
        ["local", "global", "global"],
    ),
    (
        "case3",
        "What is one of the stars of The Newcomers known for?",
        "Captain America",
        ["local", "local", "global"],
    ),
    (
        "case5",
        "Who succeeded the Prime Minister that resigned during the Brexit vote?",
        "Theresa May",
        ["global", "global"],
    ),
]


def make_corpus_registry(names, docs_per_source: int = 2) -> Registry:
    """A registry of small vector corpora, one per name."""
    registry = Registry()
    for name in names:
        docs = [
            CorpusDocument(
                id=f"{name}-{j}",
                title=f"{name} doc {j}",
                text=f"Reference notes about {name}, item number {j}.",
            )
            for j in range(docs_per_source)
        ]
        registry.register(
            SourceDescriptor(
                name=name, kind="vector_corpus", profile=f"Documents about {name}."
            ),
            VectorCorpus(docs),
        )
    return registry


def single_node_scenario(
    rng: random.Random,
    source_names: list[str],
    max_attempts: int,
    always_fail: bool = False,
    force_first_failure: bool = False,
):
    """Script one subquery's attempt loop (decompose off, routing+reflexion on).

    Returns (entries, expected) where expected is the per-attempt list of
    (source_name, success) the engine should record.
    """
    entries: list[ScriptEntry] = []
    expected: list[tuple[str, bool]] = []
    failed: set[str] = set()
    attempt = 0
    while attempt < max_attempts:
        remaining = [n for n in source_names if n not in failed]
        if not remaining:
            break
        attempt += 1
        choice = rng.choice(remaining)
        entries.append(ScriptEntry(response=choice))  # routing
        success = (not always_fail) and (
            attempt == max_attempts or rng.random() < 0.35
        )
        if force_first_failure and attempt == 1:
            success = False
        if success:
            entries.append(ScriptEntry(response=f"ANSWER: finding {attempt}\nSUCCESS: yes"))
            expected.append((choice, True))
            return entries, expected
        entries.append(ScriptEntry(response="ANSWER: UNKNOWN\nSUCCESS: no"))
        expected.append((choice, False))
        failed.add(choice)
        if attempt < max_attempts and any(n not in failed for n in source_names):
            entries.append(
                ScriptEntry(response=f"Reflected Subquestion: probe variant {attempt}")
            )
    return entries, expected


def ablation_fixture():
    """A five-question dataset plus a script builder covering every setting.

    Question q3's final node fails its first extraction; with reflexion on it
    recovers on attempt two, otherwise it stays failed.
    """
    questions = [(f"q{i}", f"What is fact number {i}?", f"fact-{i}") for i in range(1, 6)]
    dataset_rows = [
        {"id": qid, "question": question, "answers": [answer]}
        for qid, question, answer in questions
    ]

    def build_script(config: PipelineConfig) -> Script:
        entries: list[ScriptEntry] = []
        for qid, question, answer in questions:
            if config.decompose:
                entries.append(
                    ScriptEntry(
                        expect=question,
                        response=f"1. First part of {qid}?\n2. Second part of {qid}?",
                    )
                )
            node_count = 2 if config.decompose else 1
            for node in range(1, node_count + 1):
                failing = qid == "q3" and node == node_count
                if config.use_routing:
                    entries.append(ScriptEntry(response="local"))
                if not failing:
                    entries.append(
                        ScriptEntry(response=f"ANSWER: {answer}\nSUCCESS: yes")
                    )
                    continue
                entries.append(ScriptEntry(response="ANSWER: UNKNOWN\nSUCCESS: no"))
                if config.use_reflexion and config.max_reflexion_attempts > 1:
                    entries.append(
                        ScriptEntry(response=f"Reflected Subquestion: retry {qid}")
                    )
                    if config.use_routing:
                        entries.append(ScriptEntry(response="global"))
                    entries.append(
                        ScriptEntry(response=f"ANSWER: {answer}\nSUCCESS: yes")
                    )
            if config.decompose:
                # node 1 always succeeds, so multi-node plans always fuse
                entries.append(ScriptEntry(response=f"Final Answer: {answer}"))
        return Script(entries=entries)

    return dataset_rows, build_script


def write_jsonl(path, rows) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def script_to_jsonl(path, script: Script) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for entry in script.entries:
            row = {"response": entry.response}
            if entry.expect is not None:
                row["expect"] = entry.expect
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
