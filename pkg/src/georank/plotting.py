"""Report figures, rendered off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}

MODE_COLORS = {"2d": "#4c72b0", "3d": "#c44e52", "gated": "#55a868", "oracle": "#8172b2"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp metadata so reruns write identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def recall_bars(reports: Mapping[str, dict], path) -> Path:
    """Grouped Recall@{1,2,3} bars, one group per evaluation mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        modes = list(reports)
        width = 0.8 / max(len(modes), 1)
        for j, m in enumerate(modes):
            vals = [reports[m]["recall"][str(k)] for k in (1, 2, 3)]
            xs = [k - 0.4 + width * (j + 0.5) for k in (1, 2, 3)]
            ax.bar(xs, vals, width, label=m, color=MODE_COLORS.get(m))
        ax.set_xticks([1, 2, 3])
        ax.set_xticklabels(["R@1", "R@2", "R@3"])
        ax.set_ylim(0, 1)
        ax.set_ylabel("recall")
        ax.legend(frameon=False, ncol=len(modes), loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def k_sweep(rows: Sequence[dict], path) -> Path:
    """Stage-1 ceiling Recall@K and end-to-end Recall@1 against pool size K."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        Ks = [r["K"] for r in rows]
        ax.plot(Ks, [r["stage1_recall_at_K"] for r in rows], "o--", label="stage-1 Recall@K")
        ax.plot(Ks, [r["recall@1"] for r in rows], "s-", label="end-to-end Recall@1")
        ax.set_xscale("log", base=2)
        ax.set_xticks(Ks)
        ax.set_xticklabels([str(k) for k in Ks])
        ax.set_xlabel("candidate pool K")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def latency_bars(rows: Sequence[dict], path) -> Path:
    """Mean per-sample time per configuration, grouped by K, with std error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        configs = list(dict.fromkeys(r["config"] for r in rows))
        Ks = list(dict.fromkeys(r["K"] for r in rows))
        width = 0.8 / max(len(configs), 1)
        colors = {"2d-only": MODE_COLORS["2d"], "unconditional-3d": MODE_COLORS["3d"], "gated": MODE_COLORS["gated"]}
        for j, c in enumerate(configs):
            sel = {r["K"]: r for r in rows if r["config"] == c}
            xs = [i - 0.4 + width * (j + 0.5) for i in range(len(Ks))]
            ax.bar(
                xs,
                [sel[k]["mean_s"] * 1e3 for k in Ks],
                width,
                yerr=[sel[k]["std_s"] * 1e3 for k in Ks],
                label=c,
                color=colors.get(c),
            )
        ax.set_xticks(range(len(Ks)))
        ax.set_xticklabels([f"K={k}" for k in Ks])
        ax.set_ylabel("ms / query")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
