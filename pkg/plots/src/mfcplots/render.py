"""Render experiment CSVs into publication-style figures.

Five plot kinds, all reading the runner's documented CSV schemas only:

- loss_compare: training-loss curves from several train logs, one labeled
  curve each, moving-average smoothing for display (raw data untouched).
- control_slice: learned action vs state per requested time, with the
  explicit solution overlaid dashed when the CSV carries it.
- dist_snapshot: particle scatter at one time with marginal histograms and
  mean cross-hairs.
- crowd_snapshots: positions at several times, side by side, with the target
  cross-hair.
- ablation: loss_compare with labels taken from a swept parameter.

Rendering is pure: identical inputs and options produce identical bytes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("loss_compare", "control_slice", "dist_snapshot", "crowd_snapshots",
         "ablation")

_SCHEMAS = {
    "loss_compare": ["iter", "train_cost", "val_cost", "grad_norm", "wall_ms"],
    "ablation": ["iter", "train_cost", "val_cost", "grad_norm", "wall_ms"],
    "control_slice": ["time", "x1"],   # prefix; action/analytic columns vary
    "dist_snapshot": ["step", "time", "particle", "x1", "x2"],
    "crowd_snapshots": ["step", "time", "particle", "x1", "x2"],
}


class SchemaError(Exception):
    """Input CSV does not match the expected schema; carries the column diff."""

    def __init__(self, path, expected, found):
        missing = [c for c in expected if c not in found]
        extra = [c for c in found if c not in expected]
        super().__init__(
            f"{path}: expected columns {expected}, found {found} "
            f"(missing: {missing or 'none'}, unexpected: {extra or 'none'})")
        self.missing = missing
        self.extra = extra


@dataclass(frozen=True)
class PlotJob:
    kind: str
    inputs: tuple[str, ...]
    output: str
    labels: tuple[str, ...] = ()
    smooth_window: int = 50
    log_scale: bool = True
    times: tuple[float, ...] = (0.0, 0.5, 1.0)
    target: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(self.kind, list(KINDS), ["<unknown kind>"])
        if not self.inputs:
            raise ValueError("no input CSVs")


def read_csv(path, expected_prefix, exact=False):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(path, expected_prefix, [])
        if exact:
            ok = header == expected_prefix
        else:
            ok = header[:len(expected_prefix)] == expected_prefix
        if not ok:
            raise SchemaError(path, expected_prefix, header)
        rows = list(reader)
    cols = {name: [] for name in header}
    for row in rows:
        for name, cell in zip(header, row):
            cols[name].append(cell)
    return header, cols


def _floats(cells, allow_blank=False):
    out = []
    for c in cells:
        if c == "" and allow_blank:
            out.append(math.nan)
        else:
            out.append(float(c))
    return np.asarray(out)


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Display smoothing; output aligned to the right edge of the window."""
    if window <= 1 or values.size <= 1:
        return values
    window = min(window, values.size)
    kernel = np.ones(window) / window
    smoothed = np.convolve(values, kernel, mode="valid")
    # pad the warm-up with progressively shorter averages
    head = np.array([values[:i + 1].mean() for i in range(window - 1)])
    return np.concatenate([head, smoothed])


def _new_figure(width=6.4, height=4.2, panels=1):
    fig, axes = plt.subplots(1, panels, figsize=(width * panels ** 0.8, height))
    return fig, (axes if panels > 1 else [axes])


def _save(fig, output):
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=150, metadata={"Software": "mfcplots"})
    plt.close(fig)


def render(job: PlotJob) -> str:
    {"loss_compare": _render_losses,
     "ablation": _render_losses,
     "control_slice": _render_control_slice,
     "dist_snapshot": _render_dist_snapshot,
     "crowd_snapshots": _render_crowd_snapshots}[job.kind](job)
    return job.output


def _labels(job: PlotJob):
    if job.labels:
        if len(job.labels) != len(job.inputs):
            raise ValueError(f"{len(job.inputs)} inputs but {len(job.labels)} labels")
        return job.labels
    return tuple(Path(p).parent.name or Path(p).stem for p in job.inputs)


def _render_losses(job: PlotJob) -> None:
    fig, (ax,) = _new_figure()
    for path, label in zip(job.inputs, _labels(job)):
        _, cols = read_csv(path, _SCHEMAS["loss_compare"], exact=True)
        iters = _floats(cols["iter"])
        loss = moving_average(_floats(cols["train_cost"]), job.smooth_window)
        ax.plot(iters, loss, label=label, linewidth=1.2)
    if job.log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"loss (window {job.smooth_window})")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, job.output)


def _render_control_slice(job: PlotJob) -> None:
    if len(job.inputs) != 1:
        raise ValueError("control_slice renders one CSV")
    header, cols = read_csv(job.inputs[0], _SCHEMAS["control_slice"])
    action_cols = [c for c in header if c.startswith("action")]
    analytic_cols = [c for c in header if c.startswith("analytic")]
    if not action_cols:
        raise SchemaError(job.inputs[0], _SCHEMAS["control_slice"] + ["action1"],
                          header)
    times = sorted(set(_floats(cols["time"])))
    fig, axes = _new_figure(panels=len(times))
    tvals = _floats(cols["time"])
    x1 = _floats(cols["x1"])
    for ax, t in zip(axes, times):
        mask = tvals == t
        order = np.argsort(x1[mask])
        for ac in action_cols:
            ax.plot(x1[mask][order], _floats(cols[ac])[mask][order],
                    label=f"learned {ac[-1]}", linewidth=1.3)
        for an in analytic_cols:
            ax.plot(x1[mask][order], _floats(cols[an])[mask][order], "k--",
                    label="explicit", linewidth=1.1)
        ax.set_title(f"t = {t:g}", fontsize=9)
        ax.set_xlabel("state")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("action")
    axes[-1].legend(fontsize=8)
    _save(fig, job.output)


def _snapshot_at(cols, t):
    times = _floats(cols["time"])
    present = np.unique(times)
    nearest = present[np.argmin(np.abs(present - t))]
    mask = times == nearest
    return nearest, _floats(cols["x1"])[mask], _floats(cols["x2"])[mask]


def _render_dist_snapshot(job: PlotJob) -> None:
    if len(job.inputs) != 1:
        raise ValueError("dist_snapshot renders one CSV")
    _, cols = read_csv(job.inputs[0], _SCHEMAS["dist_snapshot"])
    t, x1, x2 = _snapshot_at(cols, job.times[0])
    fig = plt.figure(figsize=(5.4, 5.4))
    grid = fig.add_gridspec(2, 2, width_ratios=(4, 1), height_ratios=(1, 4),
                            hspace=0.05, wspace=0.05)
    ax = fig.add_subplot(grid[1, 0])
    ax_top = fig.add_subplot(grid[0, 0], sharex=ax)
    ax_right = fig.add_subplot(grid[1, 1], sharey=ax)
    ax.scatter(x1, x2, s=8, alpha=0.6)
    ax.axvline(x1.mean(), color="green", linewidth=1.0)
    ax.axhline(x2.mean(), color="green", linewidth=1.0)
    ax_top.hist(x1, bins=16, color="tab:blue", alpha=0.7)
    ax_right.hist(x2, bins=16, orientation="horizontal", color="tab:blue",
                  alpha=0.7)
    ax_top.tick_params(labelbottom=False)
    ax_right.tick_params(labelleft=False)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax_top.set_title(f"positions at t = {t:g}", fontsize=9)
    _save(fig, job.output)


def _render_crowd_snapshots(job: PlotJob) -> None:
    if len(job.inputs) != 1:
        raise ValueError("crowd_snapshots renders one CSV")
    _, cols = read_csv(job.inputs[0], _SCHEMAS["crowd_snapshots"])
    fig, axes = _new_figure(width=3.6, height=3.6, panels=len(job.times))
    for ax, t_req in zip(axes, job.times):
        t, x1, x2 = _snapshot_at(cols, t_req)
        ax.scatter(x1, x2, s=8, alpha=0.6)
        if job.target is not None:
            ax.axvline(job.target[0], color="orange", linestyle="--", linewidth=1.0)
            ax.axhline(job.target[1], color="orange", linestyle="--", linewidth=1.0)
        ax.set_title(f"t = {t:g}", fontsize=9)
        ax.set_xlabel("$x_1$")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("$x_2$")
    _save(fig, job.output)
