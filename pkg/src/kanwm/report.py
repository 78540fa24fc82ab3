"""CSV/JSONL summaries and SVG learning curves for finished runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CSV_COLUMNS = ("run_id", "group", "backbone", "final_return", "fps_policy", "fps_train", "params")
SMOOTHING = 0.8


def smooth(values, factor: float = SMOOTHING) -> np.ndarray:
    """Exponential smoothing ``y_t = factor * y_{t-1} + (1 - factor) * x_t`` seeded with ``x_0``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return x
    y = np.empty_like(x)
    y[0] = x[0]
    for t in range(1, len(x)):
        y[t] = factor * y[t - 1] + (1.0 - factor) * x[t]
    return y


def _load_run(run_dir: Path) -> tuple[dict, list[dict]]:
    summary = json.loads((run_dir / "summary.json").read_text())
    records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines() if line]
    return summary, records


def _return_series(records: list[dict], x_key: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(r[x_key], r["eval_return"] if r.get("eval_return") is not None else r.get("episode_return"))
           for r in records]
    pts = [(x, y) for x, y in pts if y is not None]
    if not pts:
        return np.zeros(0), np.zeros(0)
    xs, ys = zip(*pts)
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def _plot(runs, x_key: str, xlabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (summary, records) in enumerate(runs):
        xs, ys = _return_series(records, x_key)
        if xs.size == 0:
            continue
        c = colors[i % len(colors)]
        ax.plot(xs, ys, color=c, alpha=0.25, linewidth=0.8)
        ax.plot(xs, smooth(ys), color=c, linewidth=1.6, label=summary["run_id"])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("episode return")
    ax.grid(alpha=0.3)
    if runs:
        ax.legend(fontsize="small", frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(run_dirs, out_dir) -> dict[str, Path]:
    """Write ``summary.csv``, ``metrics.jsonl`` and two SVG curves into ``out_dir``."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("emit_report needs at least one completed run")
    runs = [_load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "summary.csv",
        "jsonl": out / "metrics.jsonl",
        "steps_svg": out / "return_vs_steps.svg",
        "wall_svg": out / "return_vs_wallclock.svg",
    }
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for summary, _ in runs:
            w.writerow([summary.get(c) for c in CSV_COLUMNS])
    with paths["jsonl"].open("w") as fh:
        for summary, records in runs:
            for r in records:
                fh.write(json.dumps({"run_id": summary["run_id"], **r}) + "\n")
    _plot(runs, "env_step", "environment steps", paths["steps_svg"])
    _plot(runs, "wall_seconds", "wall-clock seconds", paths["wall_svg"])
    return paths
