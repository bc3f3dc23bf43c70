"""Static figures for finished runs."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .errors import ArtifactError
from .runs import RunDirectory

logger = logging.getLogger(__name__)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_gamma_trajectory(run_dir: Path, out: Path | None = None) -> Path:
    """Line plot of each domain's gamma against the refresh step.

    Raises:
        ArtifactError: the run has no gamma log
    """
    run = RunDirectory(run_dir)
    frame = run.read_gamma()
    series = [c for c in frame.columns if c.startswith("gamma_")]
    if frame.empty or not series:
        raise ArtifactError(f"{run.root}: gamma log is empty")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4), constrained_layout=True)
    for col in series:
        ax.plot(frame["step"], frame[col], label=col.removeprefix("gamma_"))
    ax.axhline(1.0 / len(series), color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("gamma refresh")
    ax.set_ylabel("domain weight")
    ax.set_title(run.root.name)
    ax.legend()
    path = Path(out) if out else run.root / "gamma.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("wrote plot", extra={"path": str(path), "series": len(series)})
    return path


def plot_metric_bars(run_dirs: Sequence[Path], out: Path, metric: str = "ndcg@5") -> Path:
    """Grouped bars: one group per domain, one bar per run.

    Raises:
        ArtifactError: no runs given or a run lacks an evaluation summary
    """
    if not run_dirs:
        raise ArtifactError("no run directories to plot")
    reports = {Path(d).name: RunDirectory(d).read_eval() for d in run_dirs}
    domains = sorted({dom for r in reports.values() for dom in r.metrics})
    width = 0.8 / len(reports)
    x = np.arange(len(domains))

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(domains)), 4), constrained_layout=True)
    for i, (name, report) in enumerate(reports.items()):
        values = [report.metrics.get(dom, {}).get(metric, 0.0) for dom in domains]
        ax.bar(x + i * width - 0.4 + width / 2, values, width, label=name)
    ax.set_xticks(x, domains)
    ax.set_ylabel(metric)
    ax.legend()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    logger.info("wrote plot", extra={"path": str(out), "runs": len(reports)})
    return out
