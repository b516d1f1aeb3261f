"""Split evaluation, report documents, and figure rendering.

Figures are rendered to PNG with matplotlib; every plotted number is also
emitted as CSV so the figures can be reproduced without the plotting layer.
"""

import csv
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import DatasetManifest, PreprocessSpec, load_split_arrays
from .errors import IoError, SplitError
from .metrics import EvalReport, compute_accuracy, compute_confusion_matrix, one_vs_rest_auc
from .model import NetworkState, forward


def evaluate(
    state: NetworkState,
    manifest: DatasetManifest,
    split: str,
    preprocess: PreprocessSpec,
    batch_size: int = 64,
    workers: int = 1,
) -> EvalReport:
    """Deterministic inference over one split, in manifest order."""
    x, y, samples = load_split_arrays(manifest, split, preprocess, workers)
    if len(samples) == 0:
        raise SplitError(f"split {split!r} is empty")
    probs = np.concatenate(
        [forward(state, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    )
    preds = probs.argmax(axis=1)
    names = manifest.taxonomy.class_names
    confusion = compute_confusion_matrix(preds, y, manifest.taxonomy.class_count, names)
    aucs, macro, curves = one_vs_rest_auc(probs, y, names)
    return EvalReport(
        split=split,
        accuracy=compute_accuracy(preds, y),
        confusion=confusion,
        per_class_auc=aucs,
        macro_auc=macro,
        sample_count=len(samples),
        model_checksum=state.weights_checksum(),
        roc_curves=curves,
    )


def report_document(report: EvalReport, config_checksum: str = "", timestamp: str | None = None) -> dict:
    """Report as a plain dict; the checksum field covers everything but the timestamp."""
    doc = {
        "split": report.split,
        "n": report.sample_count,
        "accuracy": report.accuracy,
        "macro_auc": report.macro_auc,
        "per_class_auc": dict(report.per_class_auc),
        "confusion": report.confusion.counts.tolist(),
        "class_names": list(report.confusion.class_names),
        "model_checksum": report.model_checksum,
        "config_checksum": config_checksum,
    }
    doc["report_checksum"] = hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]
    doc["timestamp"] = timestamp or datetime.now(timezone.utc).isoformat()
    return doc


def save_report(report: EvalReport, path, config_checksum: str = "") -> dict:
    doc = report_document(report, config_checksum)
    try:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"failed writing report {path}: {exc}") from exc
    return doc


def render_figures(report: EvalReport, output_directory) -> list:
    """Emit the ROC overlay plot and confusion heatmap plus their CSV sources.

    Returns the list of written file paths.
    """
    out = Path(output_directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    written = []

    # ROC curves, one per class, chance diagonal, AUC in the legend.
    fig, ax = plt.subplots(figsize=(6, 5))
    for name, curve in report.roc_curves.items():
        ax.plot(curve.fpr, curve.tpr, label=f"{name} (AUC = {curve.auc:.3f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1, label="chance")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"One-vs-rest ROC ({report.split} split, n={report.sample_count})")
    ax.legend(loc="lower right", fontsize=8)
    roc_png = out / "roc_curves.png"
    fig.savefig(roc_png, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(roc_png)

    roc_csv = out / "roc_points.csv"
    with roc_csv.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "threshold", "fpr", "tpr"])
        for name, curve in report.roc_curves.items():
            # Leading (0,0) point has no threshold of its own.
            thresholds = ["inf"] + [f"{t:.12g}" for t in curve.thresholds]
            for t, f, tp in zip(thresholds, curve.fpr, curve.tpr):
                writer.writerow([name, t, f"{f:.12g}", f"{tp:.12g}"])
    written.append(roc_csv)

    # Confusion heatmap with integer annotations.
    counts = report.confusion.counts
    names = report.confusion.class_names
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted class")
    ax.set_ylabel("True class")
    ax.set_title(f"Confusion matrix (accuracy = {report.accuracy:.3f})")
    threshold = counts.max() / 2 if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(
                j, i, str(int(counts[i, j])),
                ha="center", va="center",
                color="white" if counts[i, j] > threshold else "black",
            )
    fig.colorbar(im, ax=ax, shrink=0.8)
    conf_png = out / "confusion_matrix.png"
    fig.savefig(conf_png, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(conf_png)

    conf_csv = out / "confusion.csv"
    with conf_csv.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true", "pred", "count"])
        for i, true_name in enumerate(names):
            for j, pred_name in enumerate(names):
                writer.writerow([true_name, pred_name, int(counts[i, j])])
    written.append(conf_csv)

    return [str(p) for p in written]
