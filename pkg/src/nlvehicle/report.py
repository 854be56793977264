"""Training/evaluation reports: delimited summary tables plus static figures."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import METRIC_COLUMNS  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    # fixed metadata keeps PNG bytes stable across runs
    "svg.hashsalt": "nlvehicle",
}
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def summarize_metrics(rows: Sequence[Mapping[str, float]]) -> list[dict]:
    """Per-component first/last/min/max/mean over the logged steps."""
    out = []
    for col in METRIC_COLUMNS[1:]:
        v = np.array([r[col] for r in rows], dtype=np.float64)
        out.append(
            {
                "component": col,
                "first": v[0],
                "last": v[-1],
                "min": v.min(),
                "max": v.max(),
                "mean": v.mean(),
            }
        )
    return out


def write_table(rows: Sequence[Mapping], path: str | Path, delimiter: str = ",") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter=delimiter)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def plot_loss_curves(rows: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    steps = [r["step"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for col in ("l_local", "l_global", "l_fusion", "l_instance", "l_barlow"):
            v = [r[col] for r in rows]
            if any(v):
                ax.plot(steps, v, label=col[2:])
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_temperature(rows: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.6))
        ax.plot([r["step"] for r in rows], [r["tau"] for r in rows], color="k")
        ax.set_xlabel("step")
        ax.set_ylabel("temperature")
        fig.tight_layout()
        return _save(fig, Path(path))


def split_scores(
    scores: np.ndarray, query_ids: Sequence[str], track_ids: Sequence[str], truth: Mapping[str, str]
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores of ground-truth pairs and of all other pairs."""
    col = {t: j for j, t in enumerate(track_ids)}
    mask = np.zeros(scores.shape, dtype=bool)
    for i, q in enumerate(query_ids):
        if q in truth and truth[q] in col:
            mask[i, col[truth[q]]] = True
    return scores[mask], scores[~mask]


def plot_score_distribution(positive: np.ndarray, negative: np.ndarray, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bins = np.linspace(-1, 1, 41)
        ax.hist(negative, bins=bins, density=True, alpha=0.6, label=f"non-matching (n={len(negative)})")
        ax.hist(positive, bins=bins, density=True, alpha=0.6, label=f"matching (n={len(positive)})")
        ax.set_xlabel("cosine similarity")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_rank_histogram(ranks: Mapping[str, int], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.6))
        r = np.array(sorted(ranks.values()))
        ax.hist(r, bins=np.arange(0.5, r.max() + 1.5, 1.0), color="0.3")
        ax.set_xlabel("rank of ground-truth track")
        ax.set_ylabel("queries")
        fig.tight_layout()
        return _save(fig, Path(path))
