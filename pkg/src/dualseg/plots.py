"""Static figures from training logs and metric reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_log(log_path: str | Path) -> list[dict]:
    records = []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def plot_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    records = _read_log(log_path)
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    its = [r["iteration"] for r in records]
    for key, label in (("L_L", "large-branch loss"), ("L_S", "small-branch loss"), ("total", "total")):
        ys = [(r["iteration"], r[key]) for r in records if r.get(key) is not None]
        if ys:
            ax.plot([p[0] for p in ys], [p[1] for p in ys], label=label, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_xlim(left=min(its) if its else 0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_alpha_schedule(log_path: str | Path, out_path: str | Path) -> Path:
    records = _read_log(log_path)
    out_path = Path(out_path)
    pts = [(r["iteration"], r["alpha"]) for r in records if r.get("alpha") is not None]
    fig, ax = plt.subplots(figsize=(7, 3))
    if pts:
        ax.plot([p[0] for p in pts], [p[1] for p in pts], linewidth=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("modulation weight")
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_pr_curve(report_path: str | Path, out_path: str | Path) -> Path:
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    curve = report["pr_curve"]
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(curve["recall"], curve["precision"], linewidth=1.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"AUPR = {report['AUPR']:.4f}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
