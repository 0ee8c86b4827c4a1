"""Evaluation metrics, result tables and latent-space projections."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import N_CLASSES, SEQUENCE_LABELS, SliceTable
from .errors import ValidationError, require
from .model_core import Checkpoint, load_model
from .trainer import RunGrid, embed, predict_logits

# Fixed class palette (matplotlib tab10 minus grey), index-aligned with SEQUENCE_LABELS.
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#bcbd22", "#17becf")

# Published accuracies, kept only as comparison targets in run metadata.
REFERENCE_TABLES = {
    "simsiam": {
        "0.5%": [0.655, 0.660, 0.704, 0.657, 0.625, 0.619],
        "1%": [0.789, 0.817, 0.827, 0.780, 0.803, 0.780],
        "5%": [0.921, 0.914, 0.920, 0.910, 0.925, 0.915],
        "50%": [0.964, 0.958, 0.967, 0.959, 0.962, 0.966],
        "100%": [0.963, 0.959, 0.959, 0.9634, 0.963, 0.961],
    },
    "simclr": {
        "0.5%": [0.712, 0.753, 0.790, 0.785, 0.806, 0.794],
        "1%": [0.845, 0.876, 0.905, 0.8884, 0.879, 0.875],
        "5%": [0.901, 0.931, 0.937, 0.938, 0.939, 0.930],
        "50%": [0.941, 0.967, 0.963, 0.966, 0.968, 0.961],
        "100%": [0.961, 0.962, 0.963, 0.968, 0.967, 0.962],
    },
    "resolution": {
        "0.5%": [0.674, 0.438, 0.570, 0.790],
        "1%": [0.829, 0.836, 0.818, 0.827],
        "5%": [0.909, 0.930, 0.909, 0.936],
        "50%": [0.965, 0.975, 0.957, 0.971],
        "100%": [0.961, 0.968, 0.958, 0.964],
    },
}
REFERENCE_COLUMNS = {
    "simsiam": ["64", "128", "256", "512", "1024", "2048"],
    "simclr": ["64", "128", "256", "512", "1024", "2048"],
    "resolution": ["64_84", "64_256", "128_84", "128_256"],
}


def reference_accuracy(table: str, row: str, col: str) -> float | None:
    cols = REFERENCE_COLUMNS.get(table, [])
    if col not in cols or row not in REFERENCE_TABLES[table]:
        return None
    return REFERENCE_TABLES[table][row][cols.index(col)]


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    per_class_recall: list[float | None]
    n_samples: int
    study_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "per_class_recall": self.per_class_recall, "n_samples": self.n_samples,
                "study_level_majority_accuracy": self.study_accuracy,
                "class_names": list(SEQUENCE_LABELS)}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def evaluate_predictions(y_true, y_pred, groups: Sequence[str] | None = None) -> EvalResult:
    """Slice-level metrics; ``groups`` (study ids) adds a majority-vote study accuracy."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    require(len(y_true) > 0, "no samples to evaluate")
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    recall = [None if support[c] == 0 else float(cm[c, c] / support[c]) for c in range(N_CLASSES)]
    n = int(cm.sum())
    study_acc = None
    if groups is not None:
        study_acc = majority_vote_accuracy(y_true, y_pred, groups)
    return EvalResult(float(np.trace(cm) / n), cm, recall, n, study_acc)


def majority_vote_accuracy(y_true, y_pred, groups) -> float:
    """Study-level accuracy: each study is predicted by its most common slice prediction
    (ties to the lowest class index)."""
    by_group: dict[str, list[int]] = {}
    truth = {}
    for t, p, g in zip(y_true, y_pred, groups):
        by_group.setdefault(g, []).append(int(p))
        truth[g] = int(t)
    correct = 0
    for g, preds in by_group.items():
        counts = Counter(preds)
        top = max(counts.values())
        vote = min(c for c, k in counts.items() if k == top)
        correct += vote == truth[g]
    return correct / len(by_group)


def evaluate(checkpoint: Checkpoint, data: SliceTable) -> EvalResult:
    """Score a fine-tuned checkpoint on the test split of ``data``."""
    require(checkpoint.stage == "finetuned", f"expected a finetuned checkpoint, got {checkpoint.stage}")
    test = data.split("test")
    if len(test) == 0:
        raise ValidationError("test split is empty")
    model = load_model(checkpoint)
    test = test.at_resolution(int(checkpoint.metadata.get("resolution", test.resolution)))
    logits = predict_logits(model, test.pixels)
    # argmax returns the lowest index among tied maxima
    return evaluate_predictions(test.labels, logits.argmax(axis=1), test.study_ids)


# --------------------------------------------------------------------------
# tables


def _format_cell(grid: RunGrid, row: str, col: str) -> str:
    cell = grid.cells.get((row, col))
    if cell is None:
        return ""
    if cell.status != "done" or cell.accuracy is None:
        return "failed"
    return f"{cell.accuracy:.3f}"


def table_rows(grid: RunGrid) -> list[list[str]]:
    rows = [[grid.title] + list(grid.column_labels)]
    for r in grid.row_labels:
        rows.append([r] + [_format_cell(grid, r, c) for c in grid.column_labels])
    return rows


def render_table(grid: RunGrid, fmt: str = "csv") -> str:
    rows = table_rows(grid)
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        header, body = rows[0], rows[1:]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown table format {fmt!r}")


def emit_table(grid: RunGrid, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    if fmt is None:
        fmt = "markdown" if path.suffix == ".md" else "csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(render_table(grid, fmt).encode("utf-8"))
    return path


# --------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    coords2d: np.ndarray | None = None
    method: str | None = None


def extract_embeddings(checkpoint: Checkpoint, data: SliceTable) -> EmbeddingSet:
    require(len(data) > 0, "no slices to embed")
    model = load_model(checkpoint)
    data = data.at_resolution(int(checkpoint.metadata.get("resolution", data.resolution)))
    return EmbeddingSet(embed(model, data.pixels), data.labels)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-two principal component scores.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    scores = centered @ comps.T
    if scores.shape[1] < 2:
        scores = np.pad(scores, ((0, 0), (0, 2 - scores.shape[1])))
    return scores


def project_2d(emb: EmbeddingSet, method: str = "pca", seed: int = 0) -> EmbeddingSet:
    m = len(emb.vectors)
    if m < 2:
        raise ValidationError(f"need at least 2 embeddings, got {m}")
    if method == "pca":
        coords = pca_2d(emb.vectors)
    elif method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (m - 1) / 3))
        coords = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(
            np.asarray(emb.vectors, dtype=np.float64))
    else:
        raise ValidationError(f"unknown projection method {method!r}")
    return EmbeddingSet(emb.vectors, emb.labels, np.asarray(coords, dtype=np.float64), method)


def render_plot(emb: EmbeddingSet, path: str | Path, title: str | None = None) -> Path:
    """Scatter the 2D coordinates coloured by class; format follows the suffix (png/svg)."""
    require(emb.coords2d is not None, "project the embeddings before plotting")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for c, name in enumerate(SEQUENCE_LABELS):
        sel = emb.labels == c
        if np.any(sel):
            ax.scatter(emb.coords2d[sel, 0], emb.coords2d[sel, 1], s=6, color=PALETTE[c], label=name, alpha=0.7)
    ax.set_xlabel(f"{emb.method} 1")
    ax.set_ylabel(f"{emb.method} 2")
    if title:
        ax.set_title(title)
    ax.legend(markerscale=2, fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def silhouette_by_label(emb: EmbeddingSet, metric: str = "cosine") -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(emb.vectors, emb.labels, metric=metric))
