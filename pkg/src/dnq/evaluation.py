"""EM / F1 / retrieval-recall scoring and batch evaluation over HotPotQA-style data.

Answer normalization and EM/F1 follow the official HotPotQA scorer:
lowercase, strip punctuation, drop the articles a/an/the, collapse
whitespace; a yes/no/noanswer on either side scores F1 = 0 unless both
normalize identically. One deliberate difference: two answers that both
normalize to nothing score F1 = 1 here (the official script returns 0).
"""

from __future__ import annotations

import json
import logging
import math
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from dnq import SCHEMA_VERSION
from dnq.engine import Budget, EpisodeResult, Limits, ToolRegistry, run_episode
from dnq.policy import Policy
from dnq.wiki import WikiEntry

log = logging.getLogger(__name__)

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_SPECIAL = ("yes", "no", "noanswer")


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def f1_score(pred: str, gold: str) -> float:
    norm_pred = normalize_answer(pred)
    norm_gold = normalize_answer(gold)
    if norm_pred != norm_gold and (norm_pred in _SPECIAL or norm_gold in _SPECIAL):
        return 0.0
    pred_tokens = norm_pred.split()
    gold_tokens = norm_gold.split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


class EmptyGold(ValueError):
    pass


def retrieval_recall(retrieved_titles: Iterable[str], gold_titles: Iterable[str]) -> float:
    gold = set(gold_titles)
    if not gold:
        raise EmptyGold("recall needs at least one gold title")
    return len(set(retrieved_titles) & gold) / len(gold)


@dataclass(frozen=True)
class EvalItem:
    id: str
    question: str
    gold_answer: str
    gold_support_titles: frozenset[str] = frozenset()


def items_from_hotpot(records: Iterable[dict[str, Any]]) -> list[EvalItem]:
    """HotPotQA records (``_id``/``question``/``answer``/``supporting_facts``) to items."""
    items = []
    seen: set[str] = set()
    for rec in records:
        item_id = str(rec.get("_id", rec.get("id")))
        if item_id in seen:
            raise ValueError(f"duplicate item id {item_id!r}")
        seen.add(item_id)
        titles = rec.get("supporting_titles")
        if titles is None:
            titles = [fact[0] for fact in rec.get("supporting_facts", [])]
        items.append(EvalItem(item_id, rec["question"], rec["answer"], frozenset(titles)))
    return items


def load_dataset(path) -> list[EvalItem]:
    """A HotPotQA JSON array, or JSONL with one record per line."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    return items_from_hotpot(records)


@dataclass
class ItemResult:
    id: str
    prediction: str
    gold: str
    em: float
    f1: float
    recall: float | None
    contexts: int
    termination: str
    error: str | None = None
    trajectory: Any = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("trajectory")
        return data


@dataclass(frozen=True)
class EvalResult:
    em: float
    f1: float
    recall: float | None
    avg_contexts: float
    n_items: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "em": self.em,
            "f1": self.f1,
            "recall": self.recall,
            "avg_contexts": self.avg_contexts,
            "n": self.n_items,
        }


def _mean(values: Sequence[float]) -> float:
    # fsum is exactly rounded, so item order cannot change the result.
    return math.fsum(values) / len(values) if values else 0.0


def aggregate_results(results: Sequence[ItemResult]) -> EvalResult:
    recalls = [r.recall for r in results if r.recall is not None]
    return EvalResult(
        em=_mean([r.em for r in results]),
        f1=_mean([r.f1 for r in results]),
        recall=_mean(recalls) if recalls else None,
        avg_contexts=_mean([r.contexts for r in results]),
        n_items=len(results),
    )


def score_episode(item: EvalItem, result: EpisodeResult) -> ItemResult:
    prediction = result.final_answer or ""
    recall = None
    if item.gold_support_titles:
        recall = retrieval_recall(result.trajectory.retrieved_titles(), item.gold_support_titles)
    return ItemResult(
        id=item.id,
        prediction=prediction,
        gold=item.gold_answer,
        em=float(exact_match(prediction, item.gold_answer)),
        f1=f1_score(prediction, item.gold_answer),
        recall=recall,
        contexts=result.budget.entries_returned,
        termination=result.termination.value,
        trajectory=result.trajectory,
    )


def evaluate_item(
    item: EvalItem,
    make_policy: Callable[[EvalItem], Policy],
    registry: ToolRegistry,
    budget: Budget,
    limits: Limits,
) -> ItemResult:
    try:
        result = run_episode(item.question, make_policy(item), registry, budget.fresh(), limits)
    except Exception as exc:
        log.warning("item %s failed: %s", item.id, exc)
        return ItemResult(
            id=item.id,
            prediction="",
            gold=item.gold_answer,
            em=0.0,
            f1=0.0,
            recall=0.0 if item.gold_support_titles else None,
            contexts=0,
            termination="Error",
            error=f"{type(exc).__name__}: {exc}",
        )
    return score_episode(item, result)


def run_eval(
    items: Sequence[EvalItem],
    make_policy: Callable[[EvalItem], Policy],
    registry: ToolRegistry,
    budget: Budget | None = None,
    limits: Limits = Limits(),
    workers: int = 1,
) -> tuple[EvalResult, list[ItemResult]]:
    """Question-only evaluation: one episode per item, metrics averaged over items.

    A failing item scores zero and is reported, never aborting the batch.
    """
    budget = budget or Budget()
    if workers <= 1:
        results = [evaluate_item(it, make_policy, registry, budget, limits) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda it: evaluate_item(it, make_policy, registry, budget, limits), items)
            )
    return aggregate_results(results), results


@dataclass(frozen=True)
class BaselineResult:
    recall: float | None
    avg_contexts: float
    n_items: int

    def to_dict(self) -> dict[str, Any]:
        return {"recall": self.recall, "avg_contexts": self.avg_contexts, "n": self.n_items}


def run_baseline(
    items: Sequence[EvalItem],
    search: Callable[[str, int], list[WikiEntry]],
    k: int = 50,
) -> BaselineResult:
    """Single retrieval of ``k`` entries with the initial question as the query."""
    recalls = []
    contexts = []
    for item in items:
        entries = search(item.question, k)[:k]
        contexts.append(len(entries))
        if item.gold_support_titles:
            recalls.append(retrieval_recall([e.title for e in entries], item.gold_support_titles))
    return BaselineResult(
        recall=_mean(recalls) if recalls else None,
        avg_contexts=_mean(contexts),
        n_items=len(items),
    )


def write_report(
    path,
    result: EvalResult,
    items: Sequence[ItemResult],
    baseline: BaselineResult | None = None,
    items_path=None,
) -> Path:
    """Write the report JSON and the per-item JSONL (``<report>.items.jsonl`` by default)."""
    path = Path(path)
    report = result.to_dict()
    if baseline is not None:
        report["baseline"] = baseline.to_dict()
    report["schema_version"] = SCHEMA_VERSION
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    items_path = Path(items_path) if items_path else path.with_suffix(".items.jsonl")
    with open(items_path, "w", encoding="utf-8") as fh:
        for item in items:
            row = item.to_dict()
            row["schema_version"] = SCHEMA_VERSION
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return items_path
