"""Figure emission from result streams; every figure writes its numbers as CSV."""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import ConfigurationError
from .metrics import gradient_norm_stats, ood_bias, pca_projection
from .records import RoundRecord

PLOT_KINDS = ("wm_retention", "bias", "norms", "pca", "collision")


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _write_csv(path: str, rows: list[dict], fieldnames: list[str], config_hash: str | None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _csv_path(image_path: str) -> str:
    root, _ = os.path.splitext(image_path)
    return root + ".csv"


def plot_wm_retention(records: list[RoundRecord], out_path: str, config_hash: str | None = None):
    """Per-client watermark accuracy across rounds; attacker drawn in red."""
    plt = _matplotlib()
    series: dict[int, list[tuple[int, float]]] = {}
    malicious: set[int] = set()
    rows = []
    for rec in records:
        for c in rec.clients:
            if c.wm_acc is None:
                continue
            series.setdefault(c.client_id, []).append((rec.round_index, c.wm_acc))
            if c.malicious:
                malicious.add(c.client_id)
            rows.append({"round": rec.round_index, "client": c.client_id,
                         "malicious": int(c.malicious), "wm_acc": c.wm_acc})
    if not series:
        raise ConfigurationError("no watermark accuracies recorded in this stream")
    fig, ax = plt.subplots(figsize=(7, 4))
    for cid, pts in sorted(series.items()):
        xs, ys = zip(*pts)
        if cid in malicious:
            ax.plot(xs, ys, color="red", lw=2, label=f"client {cid} (malicious)")
        else:
            ax.plot(xs, ys, color="tab:blue", alpha=0.4, lw=1)
    ax.set_xlabel("round")
    ax.set_ylabel("watermark accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    _write_csv(_csv_path(out_path), rows, ["round", "client", "malicious", "wm_acc"], config_hash)


def plot_bias(records: list[RoundRecord], out_path: str, config_hash: str | None = None):
    """Sorted distribution of per-(client, round) OOD prediction bias."""
    plt = _matplotlib()
    rows = []
    for rec in records:
        for c in rec.clients:
            if c.ood_pred_dist is None:
                continue
            rows.append({"round": rec.round_index, "client": c.client_id,
                         "malicious": int(c.malicious), "bias": ood_bias(c.ood_pred_dist)})
    if not rows:
        raise ConfigurationError("no OOD prediction distributions recorded in this stream")
    values = sorted(r["bias"] for r in rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, np.linspace(0, 1, len(values)))
    ax.set_xlabel("OOD prediction bias (std of class shares)")
    ax.set_ylabel("cumulative fraction")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    _write_csv(_csv_path(out_path), rows, ["round", "client", "malicious", "bias"], config_hash)


def plot_norms(records: list[RoundRecord], out_path: str, config_hash: str | None = None):
    """Per-client mean and std of uploaded delta norms, sorted by mean."""
    plt = _matplotlib()
    stats = gradient_norm_stats(records)
    mal_ids = {c.client_id for rec in records for c in rec.clients if c.malicious}
    rows = [{"client": cid, "mean": m, "std": s, "malicious": int(cid in mal_ids)}
            for cid, m, s in stats]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(stats))
    means = [m for _, m, _ in stats]
    stds = [s for _, _, s in stats]
    colors = ["red" if cid in mal_ids else "tab:blue" for cid, _, _ in stats]
    ax.bar(xs, means, yerr=stds, color=colors)
    ax.set_xlabel("clients (sorted by mean delta norm)")
    ax.set_ylabel("delta norm")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    _write_csv(_csv_path(out_path), rows, ["client", "mean", "std", "malicious"], config_hash)


def plot_pca(records: list[RoundRecord], out_path: str, config_hash: str | None = None):
    """Top-2 PCA scatter of recorded final-layer weights."""
    plt = _matplotlib()
    coords = pca_projection(records)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for kind, color in (("global", "black"), ("client", "tab:blue")):
        if kind == "global":
            pts = [(c["x"], c["y"]) for c in coords if c["client"] == "global"]
        else:
            pts = [(c["x"], c["y"]) for c in coords if c["client"] != "global"]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=12, c=color, label=kind, alpha=0.7)
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    rows = [{"round": c["round"], "client": c["client"], "x": c["x"], "y": c["y"]} for c in coords]
    _write_csv(_csv_path(out_path), rows, ["round", "client", "x", "y"], config_hash)


def plot_collision(points: list[dict], out_path: str, config_hash: str | None = None):
    """First-backdoor ASR under second-backdoor injection vs clean fine-tuning."""
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    for arm, color in (("backdoor", "tab:red"), ("clean", "tab:green")):
        pts = [(p["step"], p["asr_first"]) for p in points if p["arm"] == arm]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", color=color, label=f"{arm} continuation")
    ax.set_xlabel("continuation step")
    ax.set_ylabel("first-backdoor ASR")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    rows = [{"arm": p["arm"], "step": p["step"], "asr_first": p["asr_first"], "ba": p.get("ba")}
            for p in points]
    _write_csv(_csv_path(out_path), rows, ["arm", "step", "asr_first", "ba"], config_hash)
