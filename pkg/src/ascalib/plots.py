"""Static figure rendering for the report path (file output only, no GUI)."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _group_colors(groups: Sequence[str]):
    uniq = list(dict.fromkeys(groups))
    cmap = plt.get_cmap("tab10")
    return {g: cmap(i % 10) for i, g in enumerate(uniq)}


def save_scores_plot(scores: np.ndarray, groups: Sequence[str], path: str,
                     *, title: str = "Scores") -> str:
    """Scatter of the first two score columns; strip plot when only one exists."""
    scores = np.asarray(scores)
    fig, ax = plt.subplots(figsize=(5, 4))
    colors = _group_colors(groups)
    if scores.shape[1] == 1:
        x = np.arange(scores.shape[0])
        for g in colors:
            sel = [i for i, gg in enumerate(groups) if gg == g]
            ax.scatter(x[sel], scores[sel, 0], s=24, color=colors[g], label=g)
        ax.set_xlabel("sample")
        ax.set_ylabel("component 1")
    else:
        for g in colors:
            sel = [i for i, gg in enumerate(groups) if gg == g]
            ax.scatter(scores[sel, 0], scores[sel, 1], s=24, color=colors[g], label=g)
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.axhline(0.0, color="0.8", lw=0.8)
        ax.axvline(0.0, color="0.8", lw=0.8)
    ax.set_title(title)
    if len(colors) <= 12:
        ax.legend(fontsize=8)
    return _finish(fig, path)


def save_loadings_plot(loadings: np.ndarray, variables: Sequence[str], path: str,
                       *, component: int = 0, title: str = "Loadings") -> str:
    loadings = np.asarray(loadings)
    fig, ax = plt.subplots(figsize=(max(5, len(variables) * 0.06), 4))
    x = np.arange(loadings.shape[0])
    ax.bar(x, loadings[:, component], width=0.85)
    ax.axhline(0.0, color="k", lw=0.8)
    if len(variables) <= 40:
        ax.set_xticks(x)
        ax.set_xticklabels(variables, rotation=90, fontsize=6)
    ax.set_ylabel(f"loading {component + 1}")
    ax.set_title(title)
    return _finish(fig, path)


def save_dq_plot(d: np.ndarray, q: np.ndarray, path: str,
                 *, groups: Sequence[str] | None = None, title: str = "D vs Q") -> str:
    fig, ax = plt.subplots(figsize=(5, 4))
    if groups is None:
        ax.scatter(d, q, s=24)
    else:
        colors = _group_colors(groups)
        for g in colors:
            sel = [i for i, gg in enumerate(groups) if gg == g]
            ax.scatter(np.asarray(d)[sel], np.asarray(q)[sel], s=24,
                       color=colors[g], label=g)
        if len(colors) <= 12:
            ax.legend(fontsize=8)
    ax.set_xlabel("D statistic")
    ax.set_ylabel("Q statistic")
    ax.set_title(title)
    return _finish(fig, path)


def save_scree_plot(singular_values: np.ndarray, path: str,
                    *, title: str = "Scree") -> str:
    s = np.asarray(singular_values, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(s) + 1), s**2, marker="o")
    ax.set_xlabel("component")
    ax.set_ylabel("variance (squared singular value)")
    ax.set_title(title)
    return _finish(fig, path)


def save_power_plot(curve, path: str) -> str:
    """Line plot of one power curve, one line per model term."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for j, label in enumerate(curve.term_labels):
        ax.errorbar(curve.grid, curve.power[:, j], yerr=curve.stderr[:, j],
                    marker="o", capsize=3, label=label)
    ax.axhline(curve.alpha, color="0.6", ls="--", lw=0.9)
    ax.set_xlabel("effect size" if curve.axis == "effect_size" else "replicates")
    ax.set_ylabel("power")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def save_qq_plot(theoretical: np.ndarray, observed: np.ndarray, path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(theoretical, observed, s=10)
    lims = [min(theoretical.min(), observed.min()), max(theoretical.max(), observed.max())]
    ax.plot(lims, lims, color="firebrick", lw=1)
    ax.set_xlabel("normal quantiles")
    ax.set_ylabel("residual quantiles")
    ax.set_title("Residual Q-Q")
    return _finish(fig, path)


def save_residual_order_plot(q: np.ndarray, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(q) + 1), q, marker=".", lw=0.8)
    ax.set_xlabel("sample order")
    ax.set_ylabel("residual Q")
    return _finish(fig, path)


def save_residual_box_plot(level_values: Mapping[str, np.ndarray], path: str,
                           *, factor_name: str) -> str:
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(level_values)), 4))
    labels = list(level_values)
    ax.boxplot([np.asarray(level_values[k]) for k in labels], tick_labels=labels)
    ax.set_xlabel(factor_name)
    ax.set_ylabel("residual Q")
    plt.setp(ax.get_xticklabels(), rotation=45, ha="right", fontsize=8)
    return _finish(fig, path)
