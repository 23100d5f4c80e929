"""CSV tables and optional matplotlib figures for sweep / evaluation outputs."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

log = logging.getLogger(__name__)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_table(path, rows: list[dict], columns=None) -> list:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return columns


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def emit_plot(rows: list[dict], csv_path, png_path=None, x: str = "level", y: str = "ms",
              label: str = "method", columns=None, title: str | None = None):
    """Write ``rows`` to CSV and, when possible, a line plot with one curve per label.

    Returns the PNG path, or None when no figure was produced. Plotting
    errors are logged, never raised.
    """
    write_table(csv_path, rows, columns)
    if not rows or png_path is None:
        return None
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        groups: dict = {}
        for r in rows:
            groups.setdefault(r.get(label, ""), []).append((r[x], r[y]))
        for name, pts in groups.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=str(name))
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        if len(groups) > 1 or next(iter(groups)) != "":
            ax.legend()
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
        return Path(png_path)
    except Exception as exc:  # figure output is best-effort
        log.warning("plot %s not written: %s", png_path, exc)
        return None
