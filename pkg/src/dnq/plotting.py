"""Evaluation report figures, written as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dnq.evaluation import BaselineResult, EvalResult, ItemResult  # noqa: E402

COLORS = {"dnq": "#1f77b4", "baseline": "#b0b0b0"}


def _label_bars(ax, bars, fmt: str = "{:.2f}") -> None:
    for bar in bars:
        ax.annotate(
            fmt.format(bar.get_height()),
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center", va="bottom", fontsize=8,
        )


def plot_metrics(result: EvalResult, path) -> Path:
    names = ["EM", "F1"]
    values = [result.em, result.f1]
    if result.recall is not None:
        names.append("Recall")
        values.append(result.recall)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bars = ax.bar(names, values, color=COLORS["dnq"])
    _label_bars(ax, bars)
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("score")
    ax.set_title(f"Answer and retrieval metrics (n={result.n_items})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_retrieval(result: EvalResult, baseline: BaselineResult, path) -> Path:
    """Baseline single-query retrieval against the decomposed search."""
    fig, (ax_r, ax_c) = plt.subplots(1, 2, figsize=(7, 3.2))
    labels = ["baseline", "decompose"]
    colors = [COLORS["baseline"], COLORS["dnq"]]
    recalls = [baseline.recall or 0.0, result.recall or 0.0]
    _label_bars(ax_r, ax_r.bar(labels, recalls, color=colors))
    ax_r.set_ylim(0, 1.1)
    ax_r.set_ylabel("title recall")
    contexts = [baseline.avg_contexts, result.avg_contexts]
    _label_bars(ax_c, ax_c.bar(labels, contexts, color=colors), "{:.1f}")
    ax_c.set_ylabel("average contexts")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_terminations(items: list[ItemResult], path) -> Path:
    counts: dict[str, int] = {}
    for item in items:
        counts[item.termination] = counts.get(item.termination, 0) + 1
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = sorted(counts)
    _label_bars(ax, ax.bar(names, [counts[n] for n in names], color=COLORS["dnq"]), "{:.0f}")
    ax.set_ylabel("episodes")
    ax.set_title("Episode terminations")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_report_figures(
    directory, result: EvalResult, items: list[ItemResult], baseline: BaselineResult | None = None
) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [
        plot_metrics(result, directory / "metrics.png"),
        plot_terminations(items, directory / "terminations.png"),
    ]
    if baseline is not None:
        paths.append(plot_retrieval(result, baseline, directory / "retrieval.png"))
    return paths
