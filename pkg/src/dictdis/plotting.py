"""
Figures for the ``stats``, ``evaluate`` and ``train`` report paths.

Every function writes one PNG next to the delimited (TSV) table of the same
numbers.  PNG metadata is stripped so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def new_figure(width: float = 5.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def write_tsv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def polysemy_histogram(histogram: Mapping[int, float], out_dir, stem: str = "polysemy") -> Dict[str, Path]:
    """Bar chart of % of dictionary entries per candidate count."""
    out_dir = Path(out_dir)
    degrees = sorted(int(k) for k in histogram)
    values = [histogram[d] if d in histogram else histogram[str(d)] for d in degrees]
    tsv = write_tsv(out_dir / f"{stem}.tsv", ["degree", "percent_of_entries"],
                    [(d, f"{v:.4f}") for d, v in zip(degrees, values)])
    fig, ax = new_figure()
    ax.bar([str(d) for d in degrees], values, color="0.35")
    ax.set_xlabel("candidates per source phrase")
    ax.set_ylabel("% of entries")
    return {"tsv": tsv, "png": save(fig, out_dir / f"{stem}.png")}


def csr_by_degree(reports: Mapping[str, Mapping[int, float]], out_dir,
                  stem: str = "csr_by_degree") -> Dict[str, Path]:
    """Grouped bars of CSR per polysemy degree, one group member per system."""
    out_dir = Path(out_dir)
    degrees = sorted({int(d) for rep in reports.values() for d in rep})
    systems = list(reports)
    rows = []
    for d in degrees:
        rows.append([d] + [("%.4f" % reports[s][d]) if d in reports[s] else "" for s in systems])
    tsv = write_tsv(out_dir / f"{stem}.tsv", ["degree"] + systems, rows)
    fig, ax = new_figure()
    width = 0.8 / max(len(systems), 1)
    for k, s in enumerate(systems):
        xs = [i + k * width for i, d in enumerate(degrees) if d in reports[s]]
        ys = [reports[s][d] for d in degrees if d in reports[s]]
        ax.bar(xs, ys, width=width, label=s)
    ax.set_xticks([i + width * (len(systems) - 1) / 2 for i in range(len(degrees))])
    ax.set_xticklabels([str(d) for d in degrees])
    ax.set_ylim(0, 100)
    ax.set_xlabel("polysemy degree")
    ax.set_ylabel("CSR (%)")
    if len(systems) > 1:
        ax.legend(frameon=False)
    return {"tsv": tsv, "png": save(fig, out_dir / f"{stem}.png")}


def loss_curve(log_path, out_dir, stem: str = "loss") -> Dict[str, Path]:
    """Per-update and smoothed training loss from a ``train_log.jsonl``."""
    out_dir = Path(out_dir)
    recs = [json.loads(line) for line in Path(log_path).read_text(encoding="utf-8").splitlines() if line]
    tsv = write_tsv(out_dir / f"{stem}.tsv", ["step", "lr", "loss", "smoothed_loss"],
                    [(r["step"], r["lr"], r["loss"], r["smoothed_loss"]) for r in recs])
    fig, ax = new_figure()
    steps = [r["step"] for r in recs]
    ax.plot(steps, [r["loss"] for r in recs], color="0.75", lw=0.8, label="loss")
    ax.plot(steps, [r["smoothed_loss"] for r in recs], color="k", lw=1.2, label="smoothed")
    ax.set_xlabel("update")
    ax.set_ylabel("label-smoothed NLL")
    ax.legend(frameon=False)
    return {"tsv": tsv, "png": save(fig, out_dir / f"{stem}.png")}


def alpha_tradeoff(rows: Sequence[Mapping[str, float]], out_dir, stem: str = "alpha") -> Dict[str, Path]:
    """CSR and BLEU against the boost coefficient; ``rows`` hold alpha/csr/bleu."""
    out_dir = Path(out_dir)
    tsv = write_tsv(out_dir / f"{stem}.tsv", ["alpha", "csr", "bleu"],
                    [(r["alpha"], "%.4f" % r["csr"], "%.4f" % r["bleu"]) for r in rows])
    fig, ax = new_figure()
    alphas = [r["alpha"] for r in rows]
    ax.plot(alphas, [r["csr"] for r in rows], "o-", color="k", label="CSR")
    ax.plot(alphas, [r["bleu"] for r in rows], "s--", color="0.5", label="BLEU")
    ax.set_xlabel("alpha")
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    return {"tsv": tsv, "png": save(fig, out_dir / f"{stem}.png")}
