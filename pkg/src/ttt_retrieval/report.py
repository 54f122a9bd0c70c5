"""Figure rendering for run outputs.

Every report-writing command drops a PNG next to its CSV/JSON so a run
directory is browsable at a glance. Figures are presentation only; nothing
downstream reads them back.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .optimizer import LossTrace
from .retrieval import MetricsReport

VARIANT_LABELS = {
    "baseline": "baseline",
    "ttt_rotnet": "rotation",
    "ttt_jigsaw": "jigsaw",
    "ttt_barlow": "decorrelation",
}


def render_loss_curve(trace: LossTrace, path, title: str = "adaptation loss"
                      ) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    batches = [r.batch for r in trace.records]
    ax.plot(batches, trace.losses(), marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ap_histogram(report: MetricsReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    aps = [q.ap for q in report.per_query]
    ax.hist(aps, bins=20, range=(0.0, 1.0), color="#4878a8", edgecolor="white")
    ax.axvline(report.map_at_k, color="#c44e52", linewidth=1.5,
               label=f"mAP@{report.k} = {report.map_at_k:.4f}")
    ax.set_xlabel(f"per-query AP@{report.k}")
    ax.set_ylabel("queries")
    ax.set_title(f"{report.protocol} protocol")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_compare_chart(compare: dict, path) -> None:
    """Grouped bars, baseline vs each adaptation variant."""
    keys = [k for k in VARIANT_LABELS if k in compare]
    labels = [VARIANT_LABELS[k] for k in keys]
    maps = [compare[k]["map_at_k"] for k in keys]
    precs = [compare[k]["prec_at_k"] for k in keys]

    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(keys))
    width = 0.38
    ax.bar([i - width / 2 for i in x], maps, width, label=f"mAP@{compare['k']}",
           color="#4878a8")
    ax.bar([i + width / 2 for i in x], precs, width,
           label=f"Prec@{compare['k']}", color="#6aa56a")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylabel("score")
    ax.set_title(f"{compare['protocol']} protocol")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
