# core/plots.py
from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_loss_curves(curves: Dict[str, Tuple[np.ndarray, np.ndarray]], path: str | Path,
                       title: str = "") -> Path:
    """Log-scale loss-vs-step curves written as SVG."""
    p = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (steps, loss) in curves.items():
        loss = np.asarray(loss, dtype=float)
        # zero losses cannot be drawn on a log axis
        ax.plot(steps, np.where(loss > 0, loss, np.nan), label=label)
    ax.set_yscale("log")
    ax.set_xlabel("GD step")
    ax.set_ylabel("empirical risk")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(p, format="svg")
    plt.close(fig)
    return p
