"""Figure rendering for bench comparison matrices."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import MatrixRow  # noqa: E402


def render_matrix_figure(rows: list[MatrixRow], path: str, title: str = "Replica sweep"):
    """Mean requests/second vs replica count, one line per service, with
    sample-stddev error bars. Writes a PNG next to the CSV output."""
    ok_rows = [r for r in rows if r.error is None]
    services = sorted({r.service for r in ok_rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for service in services:
        points = sorted((r for r in ok_rows if r.service == service), key=lambda r: r.replicas)
        ax.errorbar(
            [p.replicas for p in points],
            [p.mean_rps for p in points],
            yerr=[p.stddev_rps for p in points],
            marker="o",
            capsize=4,
            label=service,
        )
    ax.set_xlabel("replicas")
    ax.set_ylabel("requests/second")
    ax.set_title(title)
    if services:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
