"""Deterministic log-log SVG plots."""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "tdmix"
matplotlib.rcParams["svg.fonttype"] = "none"


def loglog_plot(
    path: Union[str, Path],
    ts: Sequence[float],
    series: Dict[str, Sequence[float]],
    envelope: Optional[Sequence[float]] = None,
    reference_slopes: Sequence[float] = (),
    title: str = "",
    ylabel: str = "",
) -> Path:
    """Data series on log-log axes with an optional envelope and reference slopes t^-s."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts = np.asarray(ts, dtype=float)
    keep = ts > 0

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in series.items():
        values = np.asarray(values, dtype=float)
        mask = keep & (values > 0)
        ax.plot(ts[mask], values[mask], marker=".", linewidth=1, label=label)
    if envelope is not None:
        envelope = np.asarray(envelope, dtype=float)
        mask = keep & (envelope > 0)
        ax.plot(ts[mask], envelope[mask], linestyle="--", color="black", label="envelope")

    anchor_values = [np.asarray(v, dtype=float)[keep] for v in series.values()]
    anchor = next((v[v > 0][0] for v in anchor_values if np.any(v > 0)), 1.0)
    t0 = ts[keep][0] if np.any(keep) else 1.0
    for slope in reference_slopes:
        ax.plot(
            ts[keep],
            anchor * (ts[keep] / t0) ** (-slope),
            linestyle=":",
            color="grey",
            label=f"t^-{slope:g}",
        )

    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug(f"Wrote plot {path}")
    return path
