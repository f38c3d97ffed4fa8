import logging

import matplotlib as mpl
mpl.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .utilities import smooth

pd.set_option("display.precision", 3)

"""
Debug figures: sketch grids, the gamma sweep of a stroke's distance field, training curves and denoising trajectories.
Every function returns the matplotlib Figure; figures are saved by the caller.
"""

logger = logging.getLogger(__name__)


def _background(fig, axes, black_background):
    face = "black" if black_background else "white"
    fig.patch.set_facecolor(face)
    for ax in np.ravel(axes):
        ax.set_facecolor(face)
        ax.set_xticks([])
        ax.set_yticks([])
        for spine in ax.spines.values():
            spine.set_visible(False)
    return "white" if black_background else "black"


def _draw_sketch(ax, strokes, color, line_width):
    for stroke in strokes:
        stroke = np.asarray(stroke, dtype = np.float64).reshape(-1, 2)
        if len(stroke) == 1:
            ax.plot(stroke[:, 0], stroke[:, 1], "o", color = color, markersize = line_width)
        else:
            ax.plot(stroke[:, 0], stroke[:, 1], color = color, linewidth = line_width, solid_capstyle = "round")
    ax.set_xlim(-1.05, 1.05)
    # y grows downward
    ax.set_ylim(1.05, -1.05)
    ax.set_aspect("equal")


def plot_sketches(sketches, titles = None, ncols = 4, fig_size = 3, black_background = False, line_width = 1.5):
    """
    It draws sketches in [-1, 1] space on a grid.

    Parameters
    ----------
    sketches: list
        Sketch, GeneratedSketch or lists of strokes
    titles: list of string
        optional per-panel titles
    ncols: int
        panels per row
    fig_size: float
        size of one panel in inches
    black_background: boolean
        black or white background
    line_width: float
        stroke width

    Returns
    -------
    fig: matplotlib.figure.Figure
    """
    n = max(len(sketches), 1)
    ncols = min(ncols, n)
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize = (fig_size * ncols, fig_size * nrows), squeeze = False)
    color = _background(fig, axes, black_background)
    for index, ax in enumerate(axes.ravel()):
        if index >= len(sketches):
            ax.axis("off")
            continue
        sketch = sketches[index]
        _draw_sketch(ax, sketch.strokes if hasattr(sketch, "strokes") else sketch, color, line_width)
        if titles is not None:
            ax.set_title(str(titles[index]), color = color, fontsize = 9)
    return fig


def plot_udf_sweep(fields, fig_size = 3, cmap = "gray"):
    """
    One panel per field, titled with its gamma.

    Parameters
    ----------
    fields: list of UdfField
        e.g. the same stroke rendered at several gamma values
    """
    fig, axes = plt.subplots(1, len(fields), figsize = (fig_size * len(fields), fig_size), squeeze = False)
    _background(fig, axes, False)
    for ax, field in zip(axes.ravel(), fields):
        ax.imshow(field.values, cmap = cmap, vmin = 0.0, vmax = 1.0, origin = "upper")
        ax.set_title("gamma = {:g}".format(field.gamma), fontsize = 9)
    return fig


def plot_loss(loss_log, columns = None, window = 50, fig_size = (6, 4)):
    """
    Training curves from a loss log (one column per component), smoothed with a trailing moving average.

    Parameters
    ----------
    loss_log: pandas DataFrame
        with a "step" column
    columns: list of string
        components to draw; all but "step" when None
    window: int
        smoothing window
    """
    columns = columns or [c for c in loss_log.columns if c != "step"]
    fig, ax = plt.subplots(figsize = fig_size)
    for column in columns:
        values = smooth(loss_log[column].values, window)
        ax.plot(loss_log["step"].values[len(loss_log) - len(values):], values, label = column)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(frameon = False)
    return fig


def plot_trajectory(sketches, fig_size = 2.5, black_background = False):
    """
    A strip of intermediate sketches from a denoising trajectory, titled by timestep.
    """
    titles = ["t = {}".format(s.provenance.get("t", "?")) for s in sketches]
    return plot_sketches(sketches, titles = titles, ncols = len(sketches), fig_size = fig_size,
                         black_background = black_background)
