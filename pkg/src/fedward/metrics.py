"""Detection, attack, and bias metrics computed from models and round records."""

from __future__ import annotations

import warnings

import numpy as np

from .data import LabeledImageSet
from .models import Classifier
from .records import RoundRecord
from .triggers import TriggerSpec, apply_trigger


def evaluate_accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    preds = model.predict(images)
    return float(np.mean(preds == labels)) if len(labels) else 0.0


def compute_ba(model: Classifier, test_set: LabeledImageSet) -> float:
    """Clean test accuracy of the (global) model."""
    return evaluate_accuracy(model, test_set.images, test_set.labels)


def compute_asr(
    model: Classifier, test_set: LabeledImageSet, trigger: TriggerSpec, target: int
) -> float:
    """Fraction of triggered non-target-class test samples classified as the target."""
    keep = test_set.labels != target
    images = test_set.images[keep]
    if len(images) == 0:
        return 0.0
    preds = model.predict(apply_trigger(images, trigger))
    return float(np.mean(preds == target))


def ood_bias(prediction_class_distribution) -> float:
    """Population standard deviation of the class-share vector; 0 means the
    predictions spread uniformly, larger values mean collapse onto few classes."""
    dist = np.asarray(prediction_class_distribution, dtype=np.float64)
    total = dist.sum()
    if not np.isclose(total, 1.0, atol=1e-6):
        warnings.warn(f"distribution sums to {total:.6f}; normalizing", stacklevel=2)
        if total <= 0:
            raise ValueError("distribution must have positive mass")
        dist = dist / total
    return float(np.std(dist))


def _window_events(records: list[RoundRecord], window: tuple[int, int]):
    lo, hi = window
    for rec in records:
        if lo <= rec.round_index < hi:
            for c in rec.clients:
                yield rec.round_index, c


def compute_detection_metrics(
    records: list[RoundRecord], window: tuple[int, int]
) -> tuple[float | None, float | None]:
    """(TPR, FPR) counted per (round, sampled client) event inside the window.

    TPR is None when no malicious client was sampled in the window; likewise
    FPR when no benign client was.
    """
    if window[1] <= window[0]:
        raise ValueError("window is empty")
    mal = mal_excluded = ben = ben_excluded = 0
    for _, c in _window_events(records, window):
        if c.malicious:
            mal += 1
            mal_excluded += int(not c.kept)
        else:
            ben += 1
            ben_excluded += int(not c.kept)
    tpr = (mal_excluded / mal) if mal else None
    fpr = (ben_excluded / ben) if ben else None
    return tpr, fpr


def compute_detection_metrics_per_client(
    records: list[RoundRecord], window: tuple[int, int]
) -> tuple[float | None, float | None]:
    """Per-unique-client variant: a client counts as excluded if it was
    excluded in any window round it participated in."""
    part: dict[int, bool] = {}
    excl: dict[int, bool] = {}
    for _, c in _window_events(records, window):
        part[c.client_id] = c.malicious
        excl[c.client_id] = excl.get(c.client_id, False) or (not c.kept)
    mal = [k for k, m in part.items() if m]
    ben = [k for k, m in part.items() if not m]
    tpr = (sum(excl[k] for k in mal) / len(mal)) if mal else None
    fpr = (sum(excl[k] for k in ben) / len(ben)) if ben else None
    return tpr, fpr


def gradient_norm_stats(records: list[RoundRecord]) -> list[tuple[int, float, float]]:
    """Per-client (id, mean, std) of uploaded delta norms, sorted by mean."""
    norms: dict[int, list[float]] = {}
    for rec in records:
        for c in rec.clients:
            norms.setdefault(c.client_id, []).append(c.delta_norm)
    rows = [(k, float(np.mean(v)), float(np.std(v))) for k, v in norms.items()]
    rows.sort(key=lambda r: r[1])
    return rows


def pca_projection(records: list[RoundRecord]) -> list[dict]:
    """Top-2 PCA coordinates of recorded final-layer weight vectors.

    Requires runs recorded with head weights enabled; the projection is fit on
    every recorded vector (clients and global) jointly.
    """
    vecs = []
    meta = []
    for rec in records:
        hw = rec.head_weights
        if not hw:
            continue
        if hw.get("global") is not None:
            vecs.append(np.asarray(hw["global"], dtype=np.float64))
            meta.append({"round": rec.round_index, "client": "global"})
        for cid, v in sorted(hw.get("clients", {}).items(), key=lambda kv: int(kv[0])):
            vecs.append(np.asarray(v, dtype=np.float64))
            meta.append({"round": rec.round_index, "client": int(cid)})
    if len(vecs) < 3:
        raise ValueError("PCA needs at least 3 recorded weight vectors")
    mat = np.stack(vecs)
    centered = mat - mat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    out = []
    for m, (x, y) in zip(meta, coords):
        out.append({**m, "x": float(x), "y": float(y)})
    return out


def median_ood_bias(records: list[RoundRecord], benign_only: bool = False) -> float | None:
    """Median bias over every recorded (client, round) prediction distribution."""
    values = []
    for rec in records:
        for c in rec.clients:
            if c.ood_pred_dist is None:
                continue
            if benign_only and c.malicious:
                continue
            values.append(ood_bias(c.ood_pred_dist))
    return float(np.median(values)) if values else None


def summarize_records(
    records: list[RoundRecord], window: tuple[int, int] | None, n_classes: int
) -> dict:
    """Run-level summary: detection rates over the window, final BA/ASR, and
    watermark/bias aggregates when the defense recorded them."""
    summary: dict = {"type": "summary", "rounds": len(records)}
    finals = [r for r in records if r.ba is not None]
    summary["final_ba"] = finals[-1].ba if finals else None
    finals_asr = [r for r in records if r.asr is not None]
    summary["final_asr"] = finals_asr[-1].asr if finals_asr else None
    summary["chance_asr"] = 1.0 / n_classes

    if window and window[1] > window[0]:
        tpr, fpr = compute_detection_metrics(records, window)
        tpr_c, fpr_c = compute_detection_metrics_per_client(records, window)
        summary.update(
            {"tpr": tpr, "fpr": fpr, "tpr_per_client": tpr_c, "fpr_per_client": fpr_c}
        )
        local_asrs = [
            c.local_asr
            for _, c in _window_events(records, window)
            if c.local_asr is not None
        ]
        summary["mean_local_asr"] = float(np.mean(local_asrs)) if local_asrs else None
    else:
        summary.update(
            {"tpr": None, "fpr": None, "tpr_per_client": None, "fpr_per_client": None,
             "mean_local_asr": None}
        )
    summary["median_ood_bias"] = median_ood_bias(records)
    summary["median_ood_bias_benign"] = median_ood_bias(records, benign_only=True)
    return summary
