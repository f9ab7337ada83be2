"""Benchmark report output: CSV, a JSON mirror, and rendered figures.

The CSV is the canonical table, one row per measured point with the
header ``phase,context_len,wall_time_s,peak_entries,peak_bytes``,
followed by a summary block of ``# key = value`` comment lines holding
the fitted exponents. The JSON file mirrors the same fields. Figures
are rendered with the Agg backend so no display is needed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

CSV_HEADER = ("phase", "context_len", "wall_time_s", "peak_entries", "peak_bytes")


def _rows(records):
    for rec in records:
        yield (
            rec.phase,
            rec.context_len,
            repr(float(rec.wall_time)),
            rec.peak_entries,
            rec.peak_bytes,
        )


def write_csv(records, summary: dict, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in _rows(records):
            writer.writerow(row)
        fh.write("# summary\n")
        for key, value in summary.items():
            fh.write(f"# {key} = {value}\n")


def write_json(records, summary: dict, path) -> None:
    payload = {
        "records": [
            {
                "phase": rec.phase,
                "context_len": rec.context_len,
                "wall_time_s": float(rec.wall_time),
                "peak_entries": rec.peak_entries,
                "peak_bytes": rec.peak_bytes,
            }
            for rec in records
        ],
        "summary": {k: v for k, v in summary.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _by_phase(records, suffix: str) -> dict:
    groups = {}
    for rec in records:
        if rec.phase.endswith(suffix):
            groups.setdefault(rec.phase, []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: r.context_len)
    return groups


def _line_plot(groups: dict, ylabel: str, title: str, path: Path, value, log_y: bool):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for phase in sorted(groups):
        recs = groups[phase]
        ax.plot(
            [r.context_len for r in recs],
            [value(r) for r in recs],
            marker="o",
            label=phase,
        )
    ax.set_xscale("log", base=2)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_figures(records, out_dir) -> list:
    """Write scaling, per-step latency, and cache-size plots; return paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    prefill = _by_phase(records, "prefill")
    if prefill:
        path = out_dir / "prefill_scaling.png"
        _line_plot(
            prefill, "wall time (s)", "Prefill wall time vs context", path,
            value=lambda r: r.wall_time, log_y=True,
        )
        written.append(path)

    decode = _by_phase(records, "decode")
    if decode:
        path = out_dir / "decode_per_step.png"
        _line_plot(
            decode, "seconds per step", "Decode per-step latency", path,
            value=lambda r: r.wall_time, log_y=False,
        )
        written.append(path)

        path = out_dir / "cache_entries.png"
        _line_plot(
            decode, "peak stored entries", "Decode cache footprint", path,
            value=lambda r: r.peak_entries, log_y=False,
        )
        written.append(path)
    return written


def write_all(records, summary: dict, csv_path) -> dict:
    """CSV at the given path, JSON next to it, figures in the same folder."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(records, summary, csv_path)
    json_path = csv_path.with_suffix(".json")
    write_json(records, summary, json_path)
    figures = render_figures(records, csv_path.parent)
    return {"csv": csv_path, "json": json_path, "figures": figures}
