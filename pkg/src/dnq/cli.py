"""Command-line entry point.

Subcommands: ``build-base``, ``aggregate``, ``run``, ``eval``, ``export-sft``.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(for ``run``, any termination other than Finished).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from dnq import SCHEMA_VERSION
from dnq.aggregation import (
    AnswerSet,
    LLMClassifier,
    PartitionViolation,
    QuestionType,
    aggregate,
    heuristic_classifier,
)
from dnq.config import Config, ConfigError
from dnq.engine import Budget, Limits, Termination, ToolRegistry, run_episode
from dnq.evaluation import load_dataset, run_baseline, run_eval, write_report
from dnq.grammar import Toolset
from dnq.policy import ChatCompletionBackend, LLMPolicy, ScriptedPolicy, UnconfiguredBackend
from dnq.qabase import (
    HTTPScorer,
    QAStore,
    ScorerConfig,
    build_base,
    heuristic_gec,
    heuristic_intent,
    read_raw_pairs,
)
from dnq.sft import SFTMode, export_sft, write_sft
from dnq.trajectory import read_trajectories, write_trajectories
from dnq.wiki import MediaWikiClient, OfflineCorpus

log = logging.getLogger("dnq")

# CLI flag (argparse dest) -> config key.
FLAG_KEYS = {
    "toolset": "toolset",
    "base": "paths.base",
    "corpus": "paths.corpus",
    "backend": "wiki.backend",
    "workers": "eval.workers",
    "max_calls": "budget.max_calls",
    "max_depth": "limits.max_depth",
    "max_steps": "limits.max_steps",
    "retries": "policy.retries",
    "log": "logging.format",
    "log_level": "logging.level",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse's default exit status is 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "ts": round(record.created, 3),
                "level": record.levelname,
                "logger": record.name,
                "msg": record.getMessage(),
            },
            ensure_ascii=False,
        )


def setup_logging(fmt: str, level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--log", choices=["text", "json"], help="log format on stderr")
    common.add_argument("--log-level", help="logging level (default WARNING)")

    engine = argparse.ArgumentParser(add_help=False)
    engine.add_argument("--toolset", choices=["chitchat", "wiki"], help="tool triple to expose")
    engine.add_argument("--base", help="QA base directory (chitchat toolset)")
    engine.add_argument("--corpus", help="offline corpus JSONL (wiki toolset, offline backend)")
    engine.add_argument("--backend", choices=["offline", "live"],
                        help="wiki backend: frozen corpus or the MediaWiki API")
    engine.add_argument("--max-calls", type=int, help="retriever calls per episode (default 10)")
    engine.add_argument("--max-depth", type=int, help="deepest sub-question level (default 4)")
    engine.add_argument("--max-steps", type=int, help="policy turns per episode (default 25)")
    engine.add_argument("--retries", type=int, help="reparse attempts for LLM output (default 2)")

    parser = _Parser(prog="dnq", description="Decompose-and-query QA engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-base", parents=[common], help="build the reliable QA base")
    p.add_argument("--input", required=True, help="raw QA pairs JSONL")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--epsilon1", type=float, default=0.5, help="grammar score threshold")
    p.add_argument("--epsilon2", type=float, default=0.5, help="intent score threshold")
    p.add_argument("--top-k", type=int, default=50_000, help="questions kept by frequency")
    p.add_argument("--gec-url", help="HTTP grammar scorer (default: built-in heuristic)")
    p.add_argument("--intent-url", help="HTTP intent scorer (default: built-in heuristic)")
    p.add_argument("--aggregator", choices=["heuristic", "llm"], default="heuristic",
                   help="how subjective answers are clustered")

    p = sub.add_parser("aggregate", parents=[common], help="aggregate candidate answers")
    p.add_argument("--input", required=True, help='JSONL of {"question", "answers": [...]}')
    p.add_argument("--out", required=True, help="output JSONL")
    p.add_argument("--backend", choices=["heuristic", "llm"], default="heuristic",
                   help="viewpoint clustering backend")
    p.add_argument("--jaccard-threshold", type=float, default=0.3,
                   help="heuristic clustering link threshold")
    p.add_argument("--question-type", choices=["auto", "objective", "subjective"], default="auto",
                   help="skip classification and treat every question as this type")

    p = sub.add_parser("run", parents=[common, engine], help="answer one question")
    p.add_argument("--question", required=True, help="the question to answer")
    p.add_argument("--out", help="trajectory JSONL to write")
    p.add_argument("--append", action="store_true", help="append to --out instead of overwriting")
    p.add_argument("--script", help="file of action lines to replay instead of an LLM")

    p = sub.add_parser("eval", parents=[common, engine], help="evaluate over a dataset")
    p.add_argument("--dataset", required=True, help="HotPotQA JSON or JSONL")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--items-out", help="per-item JSONL (default: <out>.items.jsonl)")
    p.add_argument("--traj-out", help="write every trajectory to this JSONL")
    p.add_argument("--workers", type=int, help="episodes evaluated concurrently")
    p.add_argument("--baseline", action="store_true",
                   help="also score a single initial-question query of 50 entries")
    p.add_argument("--scripts", help='JSONL of {"id", "actions": [...]} replacing the LLM')
    p.add_argument("--figures", help="directory for PNG report figures")

    p = sub.add_parser("export-sft", parents=[common], help="trajectories to SFT JSONL")
    p.add_argument("--traj", required=True, help="trajectory JSONL")
    p.add_argument("--mode", choices=["per-round", "single"], default="per-round",
                   help="one example per assistant turn, or one per trajectory")
    p.add_argument("--out", required=True, help="SFT JSONL")
    p.add_argument("--toolset", choices=["chitchat", "wiki"],
                   help="toolset for trajectories that do not record one")
    p.add_argument("--include-exhausted", action="store_true",
                   help="keep abandoned branches as untrained context")
    return parser


def load_config(args: argparse.Namespace) -> Config:
    overrides = {key: getattr(args, dest, None) for dest, key in FLAG_KEYS.items()}
    if args.command == "aggregate":
        overrides.pop("wiki.backend")  # --backend means the clustering backend here
    return Config.load(args.config, overrides=overrides)


def chat_backend(cfg: Config):
    if not cfg.backend.url:
        return UnconfiguredBackend()
    return ChatCompletionBackend(
        cfg.backend.url,
        cfg.backend.model,
        token=cfg.api_token(),
        params=cfg.backend.params,
        max_in_flight=cfg.backend.max_in_flight,
        timeout=cfg.backend.timeout,
    )


def make_registry(cfg: Config) -> ToolRegistry:
    if cfg.toolset == "chitchat":
        if not cfg.paths.base:
            raise UsageError("the chitchat toolset needs --base")
        return ToolRegistry.chitchat(QAStore.load(cfg.paths.base))
    if cfg.wiki.backend == "offline":
        if not cfg.paths.corpus:
            raise UsageError("the offline wiki backend needs --corpus")
        backend: Any = OfflineCorpus.from_jsonl(cfg.paths.corpus)
    else:
        backend = MediaWikiClient(
            api_url=cfg.wiki.api_url or None,
            user_agent=cfg.wiki.user_agent,
            min_interval=cfg.wiki.min_interval,
        )
    return ToolRegistry.wiki(backend, cfg.wiki.page_char_cap)


def make_budget(cfg: Config) -> Budget:
    return Budget(cfg.budget.max_calls, cfg.budget.max_entries_per_call)


def make_limits(cfg: Config) -> Limits:
    return Limits(cfg.limits.max_depth, cfg.limits.max_steps)


def cmd_build_base(args: argparse.Namespace, cfg: Config) -> int:
    pairs = read_raw_pairs(args.input)
    scorer_cfg = ScorerConfig(args.epsilon1, args.epsilon2, args.top_k)
    gec = HTTPScorer(args.gec_url) if args.gec_url else heuristic_gec
    intent = HTTPScorer(args.intent_url) if args.intent_url else heuristic_intent
    llm = chat_backend(cfg) if args.aggregator == "llm" else None
    classifier = LLMClassifier(llm) if llm is not None else heuristic_classifier
    store = build_base(pairs, scorer_cfg, gec=gec, intent=intent, classifier=classifier,
                       aggregator=llm)
    store.save(args.out)
    print(f"{len(store)} records from {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_aggregate(args: argparse.Namespace, cfg: Config) -> int:
    llm = chat_backend(cfg) if args.backend == "llm" else None
    classifier = LLMClassifier(llm) if llm is not None else heuristic_classifier
    if args.question_type != "auto":
        forced = QuestionType(args.question_type.capitalize())
        classifier = lambda question: forced  # noqa: E731
    rows = []
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            answers = AnswerSet.from_texts(raw["question"], raw["answers"])
            try:
                qtype, text, viewpoints = aggregate(answers, classifier, llm, args.jaccard_threshold)
            except PartitionViolation as exc:
                log.warning("backend output rejected (%s); using heuristic clustering", exc)
                qtype, text, viewpoints = aggregate(answers, classifier, None, args.jaccard_threshold)
            rows.append(
                {
                    "question": answers.question,
                    "question_type": qtype.value,
                    "aggregated_answer": text,
                    "viewpoints": [v.to_dict() for v in viewpoints] if viewpoints else None,
                    "schema_version": SCHEMA_VERSION,
                }
            )
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"{len(rows)} questions aggregated -> {args.out}")
    return 0


def _read_lines(path: str) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_run(args: argparse.Namespace, cfg: Config) -> int:
    registry = make_registry(cfg)
    if args.script:
        policy: Any = ScriptedPolicy.from_lines(_read_lines(args.script), registry.toolset)
    else:
        policy = LLMPolicy(chat_backend(cfg), retries=cfg.policy.retries)
    result = run_episode(args.question, policy, registry, make_budget(cfg), make_limits(cfg))
    if args.out:
        write_trajectories(args.out, [result.trajectory], append=args.append)
    print(result.final_answer or "")
    print(
        f"termination={result.termination.value} calls={result.budget.calls_used} "
        f"entries={result.budget.entries_returned}",
        file=sys.stderr,
    )
    return 0 if result.termination is Termination.FINISHED else 2


def cmd_eval(args: argparse.Namespace, cfg: Config) -> int:
    registry = make_registry(cfg)
    items = load_dataset(args.dataset)
    if args.scripts:
        scripts: dict[str, list[str]] = {}
        for line in _read_lines(args.scripts):
            if line.strip():
                row = json.loads(line)
                scripts[str(row["id"])] = row["actions"]

        def make_policy(item):
            return ScriptedPolicy.from_lines(scripts.get(item.id, []), registry.toolset)
    else:
        backend = chat_backend(cfg)

        def make_policy(item):
            return LLMPolicy(backend, retries=cfg.policy.retries)

    result, per_item = run_eval(
        items, make_policy, registry, make_budget(cfg), make_limits(cfg), cfg.eval.workers
    )
    baseline = None
    if args.baseline:
        if registry.toolset is not Toolset.WIKI:
            raise UsageError("--baseline needs the wiki toolset")
        search_backend = (
            OfflineCorpus.from_jsonl(cfg.paths.corpus)
            if cfg.wiki.backend == "offline"
            else MediaWikiClient(cfg.wiki.api_url or None, cfg.wiki.user_agent, cfg.wiki.min_interval)
        )
        baseline = run_baseline(items, search_backend.search, cfg.budget.max_calls * cfg.budget.max_entries_per_call)
    items_path = write_report(args.out, result, per_item, baseline, args.items_out)
    if args.traj_out:
        write_trajectories(args.traj_out, [r.trajectory for r in per_item if r.trajectory is not None])
    if args.figures:
        from dnq.plotting import render_report_figures

        render_report_figures(args.figures, result, per_item, baseline)
    summary = result.to_dict()
    if baseline is not None:
        summary["baseline"] = baseline.to_dict()
    print(json.dumps(summary))
    log.info("per-item results in %s", items_path)
    return 0


def cmd_export_sft(args: argparse.Namespace, cfg: Config) -> int:
    examples = []
    skipped = 0
    for traj in read_trajectories(args.traj):
        if not traj.finished:
            skipped += 1
            continue
        examples += export_sft(traj, SFTMode(args.mode), args.toolset, args.include_exhausted)
    n = write_sft(args.out, examples)
    print(f"{n} examples -> {args.out} ({skipped} unfinished trajectories skipped)")
    return 0


COMMANDS = {
    "build-base": cmd_build_base,
    "aggregate": cmd_aggregate,
    "run": cmd_run,
    "eval": cmd_eval,
    "export-sft": cmd_export_sft,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"dnq: config error: {exc}", file=sys.stderr)
        return 1
    setup_logging(cfg.logging.format, cfg.logging.level)
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dnq {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
