"""Delimited outputs and the figures rendered alongside them.

CSV files are the machine-readable interface: floats are written with
``repr`` so identical runs produce byte-identical files. Each CSV has a
companion PNG rendered from the same rows (training curves, the
accuracy/latency trade-off of a sweep, or the per-token latency histogram
of an evaluation). Matplotlib is imported lazily and only here.

Schemas:
  trainlog.csv  phase,epoch,loss,train_accuracy,train_coverage,
                dev_token_error_rate,dev_delta_corpus,records_updated
  results.csv   split,utterances,aligned_tokens,token_error_rate,delta_corpus
  sweep.csv     axis,value,mode,dev_token_error_rate,dev_delta_corpus,
                pre_token_error_rate,pre_delta_corpus,seed,error
"""

from __future__ import annotations

import csv
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

from .harness import EpochLog, EvalResult, SweepRow

TRAINLOG_FIELDS = [
    "phase", "epoch", "loss", "train_accuracy", "train_coverage",
    "dev_token_error_rate", "dev_delta_corpus", "records_updated",
]
RESULTS_FIELDS = [
    "split", "utterances", "aligned_tokens", "token_error_rate", "delta_corpus",
]
SWEEP_FIELDS = [
    "axis", "value", "mode", "dev_token_error_rate", "dev_delta_corpus",
    "pre_token_error_rate", "pre_delta_corpus", "seed", "error",
]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


def write_trainlog_csv(path, log: Sequence[EpochLog]) -> None:
    _write_csv(path, TRAINLOG_FIELDS, (asdict(e) for e in log))


def read_trainlog_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fp:
        return list(csv.DictReader(fp))


def write_results_csv(path, split: str, result: EvalResult) -> None:
    _write_csv(path, RESULTS_FIELDS, [{
        "split": split,
        "utterances": result.utterances,
        "aligned_tokens": result.aligned_tokens,
        "token_error_rate": result.token_error_rate,
        "delta_corpus": result.delta_corpus,
    }])


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    _write_csv(path, SWEEP_FIELDS, (asdict(r) for r in rows))


# ---------------------------------------------------------------------------
# Figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def render_training_figure(log: Sequence[EpochLog], out_path) -> Path:
    """Loss / error-rate / latency / coverage curves over epochs."""
    plt = _pyplot()
    xs = range(1, len(log) + 1)
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    panels = [
        ("loss", [e.loss for e in log], "training loss"),
        ("dev token error rate", [e.dev_token_error_rate for e in log], None),
        ("dev latency (frames)", [e.dev_delta_corpus for e in log], None),
        ("train coverage", [e.train_coverage for e in log], None),
    ]
    boundary = next((i for i, e in enumerate(log) if e.phase == "finetune"), None)
    for ax, (label, ys, _) in zip(axes.ravel(), panels):
        ax.plot(list(xs), ys, marker="o", markersize=3)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        if boundary is not None:
            ax.axvline(boundary + 0.5, color="grey", linestyle="--", linewidth=1)
    for ax in axes[-1]:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_sweep_figure(rows: Sequence[SweepRow], out_path) -> Path:
    """Latency and error rate against the swept value, one line per mode."""
    plt = _pyplot()
    modes = sorted({r.mode for r in rows})
    fig, (ax_lat, ax_err) = plt.subplots(1, 2, figsize=(10, 4))
    for mode in modes:
        sub = [r for r in rows if r.mode == mode and not r.error]
        values = [r.value for r in sub]
        ax_lat.plot(values, [r.dev_delta_corpus for r in sub], marker="o", label=mode)
        ax_err.plot(values, [r.dev_token_error_rate for r in sub], marker="o", label=mode)
    if rows:
        ax_lat.axhline(rows[0].pre_delta_corpus, color="grey", linestyle="--",
                       linewidth=1, label="pretrained")
        ax_err.axhline(rows[0].pre_token_error_rate, color="grey", linestyle="--",
                       linewidth=1, label="pretrained")
    ax_lat.set_xlabel(rows[0].axis if rows else "value")
    ax_err.set_xlabel(rows[0].axis if rows else "value")
    ax_lat.set_ylabel("dev latency (frames)")
    ax_err.set_ylabel("dev token error rate")
    for ax in (ax_lat, ax_err):
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_latency_figure(result: EvalResult, out_path) -> Path:
    """Histogram of signed per-token trigger offsets."""
    plt = _pyplot()
    offsets = [o for per_utt in result.per_token_offsets for o in per_utt]
    fig, ax = plt.subplots(figsize=(6, 4))
    if offsets:
        ax.hist(offsets, bins=min(40, max(5, len(set(offsets)))), color="#4477aa")
        ax.axvline(result.delta_corpus, color="crimson", linestyle="--",
                   label=f"mean = {result.delta_corpus:.2f}")
        ax.legend(fontsize=8)
    ax.set_xlabel("trigger - boundary (original frames)")
    ax.set_ylabel("tokens")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
