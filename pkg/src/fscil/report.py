"""Report serialization and rendering.

Training and session runs emit line-oriented key=value records.  The
render step turns a run directory into an aligned text table, a CSV for
external tooling, and PNG figures (accuracy curve, loss curves, and the
virtual-assignment heatmap when present).
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ParseError
from .protocol import SessionMetrics
from .trainer import TrainReport

RUN_REPORT = "run_report.txt"
TRAIN_REPORT = "train_report.txt"
ASSIGNMENT_CSV = "assignment_matrix.csv"


def write_train_report(path, report: TrainReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in report.epochs:
            fh.write(
                f"epoch={e.epoch} lr={e.lr:.6f} l1={e.l1:.6f} l2={e.l2:.6f} "
                f"l3={e.l3:.6f} l4={e.l4:.6f} total={e.total:.6f} "
                f"train_acc={e.train_acc:.4f}\n")
        fh.write(f"final_train_acc={report.final_train_acc:.4f}\n")


def write_run_report(path, metrics: SessionMetrics) -> None:
    """One key=value record group per session, accuracies in percent."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in range(len(metrics.acc)):
            fh.write(
                f"session={b} acc={100 * metrics.acc[b]:.4f} "
                f"base_acc={100 * metrics.base_acc[b]:.4f} "
                f"new_acc={100 * metrics.new_acc[b]:.4f} "
                f"hmean={100 * metrics.hmean[b]:.4f}\n")
        fh.write(f"pd={100 * metrics.pd:.4f}\n")


def write_assignment_csv(path, matrix: np.ndarray, class_labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = ",".join(f"v{v}" for v in range(matrix.shape[1]))
        fh.write(f"class,{header}\n")
        for label, row in zip(class_labels, matrix):
            fh.write(f"{label}," + ",".join(str(int(c)) for c in row) + "\n")


def _parse_kv(line: str, line_no: int) -> dict[str, str]:
    out = {}
    for token in line.split():
        if "=" not in token:
            raise ParseError(f"expected key=value tokens, got {token!r}", line=line_no)
        key, value = token.split("=", 1)
        out[key] = value
    return out


def read_run_report(path) -> dict:
    """Parse a run report into {'session', 'acc', 'base_acc', 'new_acc', 'hmean', 'pd'}."""
    data = {"session": [], "acc": [], "base_acc": [], "new_acc": [], "hmean": [],
            "pd": None}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            kv = _parse_kv(line, line_no)
            if "pd" in kv:
                data["pd"] = float(kv["pd"])
            elif "session" in kv:
                data["session"].append(int(kv["session"]))
                for key in ("acc", "base_acc", "new_acc", "hmean"):
                    data[key].append(float(kv[key]))
            else:
                raise ParseError("record is neither a session row nor a pd row",
                                 line=line_no)
    if not data["session"]:
        raise ParseError(f"{path} holds no session records")
    return data


def read_train_report(path) -> dict:
    data = {"epoch": [], "lr": [], "l1": [], "l2": [], "l3": [], "l4": [],
            "total": [], "train_acc": []}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            kv = _parse_kv(line, line_no)
            if "final_train_acc" in kv:
                continue
            data["epoch"].append(int(kv["epoch"]))
            for key in ("lr", "l1", "l2", "l3", "l4", "total", "train_acc"):
                data[key].append(float(kv[key]))
    return data


def read_assignment_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    labels = []
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        labels.append(cells[0])
        rows.append([int(c) for c in cells[1:]])
    return labels, np.array(rows, dtype=np.int64)


def format_table(data: dict) -> str:
    """Aligned text table of per-session metrics with a drop summary."""
    header = ["session", "acc%", "base%", "new%", "hmean%"]
    rows = [[str(s), f"{a:.2f}", f"{b:.2f}", f"{n:.2f}", f"{h:.2f}"]
            for s, a, b, n, h in zip(data["session"], data["acc"], data["base_acc"],
                                     data["new_acc"], data["hmean"])]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    lines.append(f"pd = {data['pd']:.2f}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("session,acc,base_acc,new_acc,hmean\n")
        for s, a, b, n, h in zip(data["session"], data["acc"], data["base_acc"],
                                 data["new_acc"], data["hmean"]):
            fh.write(f"{s},{a:.4f},{b:.4f},{n:.4f},{h:.4f}\n")


def render_report(run_dir, out_dir=None) -> list[str]:
    """Render a run directory: table + CSV + PNG figures.

    Returns the paths written.  Requires ``run_report.txt`` in ``run_dir``;
    loss curves and the assignment heatmap render only when their source
    files exist.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = run_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    run_path = os.path.join(run_dir, RUN_REPORT)
    data = read_run_report(run_path)
    written = []

    table_path = os.path.join(out_dir, "report_table.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_table(data))
    written.append(table_path)

    csv_path = os.path.join(out_dir, "report.csv")
    write_metrics_csv(csv_path, data)
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(data["session"], data["acc"], marker="o", label="cumulative")
    ax.plot(data["session"], data["base_acc"], marker="s", label="base classes")
    if any(v > 0 for v in data["new_acc"]):
        ax.plot(data["session"], data["new_acc"], marker="^", label="new classes")
    ax.set_xlabel("session")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title(f"accuracy per session (drop {data['pd']:.2f})")
    fig.tight_layout()
    acc_path = os.path.join(out_dir, "accuracy_curve.png")
    fig.savefig(acc_path, dpi=120)
    plt.close(fig)
    written.append(acc_path)

    train_path = os.path.join(run_dir, TRAIN_REPORT)
    if os.path.exists(train_path):
        tdata = read_train_report(train_path)
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        for key in ("l1", "l2", "l3", "l4", "total"):
            ax1.plot(tdata["epoch"], tdata[key], label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(fontsize=8)
        ax2.plot(tdata["epoch"], tdata["train_acc"], color="tab:green")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("train accuracy")
        ax2.set_ylim(0, 1.0)
        fig.tight_layout()
        loss_path = os.path.join(out_dir, "loss_curves.png")
        fig.savefig(loss_path, dpi=120)
        plt.close(fig)
        written.append(loss_path)

    assign_path = os.path.join(run_dir, ASSIGNMENT_CSV)
    if os.path.exists(assign_path):
        labels, matrix = read_assignment_csv(assign_path)
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        im = ax.imshow(matrix, aspect="auto", cmap="viridis")
        ax.set_xlabel("virtual prototype")
        ax.set_ylabel("base class")
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xticks(range(matrix.shape[1]))
        fig.colorbar(im, ax=ax, label="picks")
        fig.tight_layout()
        heat_path = os.path.join(out_dir, "assignment_matrix.png")
        fig.savefig(heat_path, dpi=120)
        plt.close(fig)
        written.append(heat_path)

    return written
