"""Command-line front door. A thin client of the HTTP service: by default it
mounts the app in process (no network, no credentials needed for scripted
runs); pass --server to talk to a running instance instead.

The client owns every output file; the service only reads inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .core import to_canonical_json
from .evalkit import render_ablation_csv, render_records_csv

OVERRIDE_KEYS = (
    "decompose",
    "use_routing",
    "use_reflexion",
    "max_reflexion_attempts",
    "top_k",
    "model",
    "temperature",
    "request_timeout",
    "max_retries",
)


def make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette's testclient import warns on some httpx pairings; the
        # in-process transport is unaffected, keep stderr clean for users
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--server", help="service URL; default runs the service in process")
    parser.add_argument("--config", help="pipeline config file (flat JSON)")
    parser.add_argument("--prompts-dir", dest="prompts_dir",
                        help="directory of prompt template overrides (*.txt)")
    parser.add_argument("--script", help="scripted gateway responses (JSONL), replaces the live LLM")
    parser.add_argument("--base-url", dest="base_url", help="OpenAI-compatible endpoint base URL")
    parser.add_argument("--model", help="model identifier for every stage")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--top-k", dest="top_k", type=int, help="retrieval depth")
    parser.add_argument(
        "--max-attempts", dest="max_reflexion_attempts", type=int,
        help="bound on retrieval attempts per subquery",
    )
    parser.add_argument("--max-retries", dest="max_retries", type=int)
    parser.add_argument("--timeout", dest="request_timeout", type=float)
    parser.add_argument(
        "--no-decompose", dest="decompose", action="store_const", const=False, default=None
    )
    parser.add_argument(
        "--no-routing", dest="use_routing", action="store_const", const=False, default=None
    )
    parser.add_argument(
        "--no-reflexion", dest="use_reflexion", action="store_const", const=False, default=None
    )


def _overrides(args: argparse.Namespace) -> dict:
    return {
        key: getattr(args, key)
        for key in OVERRIDE_KEYS
        if getattr(args, key, None) is not None
    }


def _gateway_choice(args: argparse.Namespace) -> dict:
    return {"script_path": args.script, "base_url": args.base_url}


def _check_paths(args: argparse.Namespace, *attrs: str) -> str | None:
    """With the in-process service, inputs must exist on this machine."""
    if args.server:
        return None
    for attr in attrs:
        value = getattr(args, attr, None)
        if value is not None and not Path(value).exists():
            return f"{attr.replace('_', '-')} path does not exist: {value}"
    return None


def _post(client, route: str, payload: dict) -> tuple[dict | None, str | None]:
    response = client.post(route, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except json.JSONDecodeError:
            detail = response.text
        return None, f"{route} failed ({response.status_code}): {detail}"
    return response.json(), None


def cmd_ask(args: argparse.Namespace) -> int:
    error = _check_paths(args, "config", "registry", "script", "prompts_dir")
    if error:
        print(error, file=sys.stderr)
        return 1
    payload = {
        "question": args.question,
        "registry_path": args.registry,
        "config_path": args.config,
        "prompts_dir": args.prompts_dir,
        "overrides": _overrides(args),
        "gateway": _gateway_choice(args),
    }
    data, error = _post(make_client(args.server), "/ask", payload)
    if error:
        print(error, file=sys.stderr)
        return 1
    print(data["answer"])
    if args.trace:
        Path(args.trace).write_text(to_canonical_json(data["trace"]), encoding="utf-8")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    error = _check_paths(args, "config", "registry", "script", "dataset", "prompts_dir")
    if error:
        print(error, file=sys.stderr)
        return 1
    payload = {
        "dataset_path": args.dataset,
        "registry_path": args.registry,
        "config_path": args.config,
        "prompts_dir": args.prompts_dir,
        "overrides": _overrides(args),
        "gateway": _gateway_choice(args),
        "limit": args.limit,
        "jobs": args.jobs,
        "include_traces": args.trace_dir is not None,
    }
    data, error = _post(make_client(args.server), "/eval", payload)
    if error:
        print(error, file=sys.stderr)
        return 1
    report = data["report"]
    Path(args.report).write_text(to_canonical_json(report), encoding="utf-8")
    Path(args.csv).write_text(render_records_csv(report["per_question"]), encoding="utf-8")
    if args.trace_dir is not None:
        trace_dir = Path(args.trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        for qid, trace in (data.get("traces") or {}).items():
            (trace_dir / f"{qid}.json").write_text(
                to_canonical_json(trace), encoding="utf-8"
            )
    aggregate = report["aggregate"]
    print(
        f"EM={aggregate['em']:.4f} F1={aggregate['f1']:.4f} "
        f"tokens={aggregate['total_tokens']:.1f}"
    )
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    error = _check_paths(args, "config", "script", "corpus", "profiles", "prompts_dir")
    if error:
        print(error, file=sys.stderr)
        return 1
    payload = {
        "corpus_path": args.corpus,
        "profiles_path": args.profiles,
        "force": args.force,
        "config_path": args.config,
        "prompts_dir": args.prompts_dir,
        "overrides": _overrides(args),
        "gateway": _gateway_choice(args),
    }
    data, error = _post(make_client(args.server), "/partition", payload)
    if error:
        print(error, file=sys.stderr)
        return 1
    if data["changed"]:
        with open(args.corpus, "w", encoding="utf-8") as fh:
            for doc in data["documents"]:
                fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    else:
        print("corpus is already fully partitioned; rerun with --force to reclassify")
    counts = data["counts"]
    print(f"local={counts['local']} global={counts['global']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    error = _check_paths(args, "config", "registry", "script", "dataset", "prompts_dir")
    if error:
        print(error, file=sys.stderr)
        return 1
    payload = {
        "dataset_path": args.dataset,
        "registry_path": args.registry,
        "config_path": args.config,
        "prompts_dir": args.prompts_dir,
        "overrides": _overrides(args),
        "gateway": _gateway_choice(args),
        "settings": args.settings.split(",") if args.settings else None,
        "limit": args.limit,
        "include_traces": args.trace_dir is not None,
    }
    data, error = _post(make_client(args.server), "/ablate", payload)
    if error:
        print(error, file=sys.stderr)
        return 1
    rows = data["rows"]
    Path(args.table).write_text(render_ablation_csv(rows), encoding="utf-8")
    if args.trace_dir is not None:
        for key, trace in (data.get("traces") or {}).items():
            setting, _, qid = key.partition("/")
            directory = Path(args.trace_dir) / setting
            directory.mkdir(parents=True, exist_ok=True)
            (directory / f"{qid}.json").write_text(
                to_canonical_json(trace), encoding="utf-8"
            )
    print(f"wrote {args.table} ({len(rows)} settings)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragmux",
        description="Ask multi-hop questions over routed knowledge sources, or run evaluations.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ask = commands.add_parser("ask", help="answer one question")
    ask.add_argument("question")
    ask.add_argument("--registry", required=True, help="source registry (JSON)")
    ask.add_argument("--trace", help="write the run trace JSON here")
    _add_common_flags(ask)
    ask.set_defaults(func=cmd_ask)

    ev = commands.add_parser("eval", help="score a QA dataset")
    ev.add_argument("dataset", help="JSONL of {id, question, answers}")
    ev.add_argument("--registry", required=True)
    ev.add_argument("--limit", type=int, help="evaluate only the first N examples")
    ev.add_argument("--jobs", type=int, default=1, help="parallel pipelines (live gateway only)")
    ev.add_argument("--report", default="report.json", help="JSON report output path")
    ev.add_argument("--csv", default="report.csv", help="CSV report output path")
    ev.add_argument("--trace-dir", dest="trace_dir", help="write one trace JSON per question here")
    _add_common_flags(ev)
    ev.set_defaults(func=cmd_eval)

    part = commands.add_parser("partition", help="tag corpus documents local/global")
    part.add_argument("corpus", help="JSONL corpus to tag in place")
    part.add_argument("--profiles", required=True, help='JSON {"local": ..., "global": ...}')
    part.add_argument("--force", action="store_true", help="reclassify even if already tagged")
    _add_common_flags(part)
    part.set_defaults(func=cmd_partition)

    abl = commands.add_parser("ablate", help="run the stage-toggle grid")
    abl.add_argument("dataset")
    abl.add_argument("--registry", required=True)
    abl.add_argument("--settings", help="comma-separated subset of the 8 settings")
    abl.add_argument("--limit", type=int)
    abl.add_argument("--table", default="ablation.csv", help="CSV table output path")
    abl.add_argument("--trace-dir", dest="trace_dir", help="write per-setting trace JSONs here")
    _add_common_flags(abl)
    abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except httpx.HTTPError as exc:
        print(f"service unreachable: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"could not write output: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
