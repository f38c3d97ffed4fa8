"""Smoke tests of the debug figures."""

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

import sketchDiffusion as sd


def test_plot_sketches(toy_sketches, tmp_path):
    fig = sd.plot_sketches(toy_sketches[:5], titles = [s.label for s in toy_sketches[:5]], ncols = 3)
    assert len(fig.axes) == 6
    assert fig.axes[0].get_title() == toy_sketches[0].label
    fig.savefig(str(tmp_path / "grid.png"))
    plt.close(fig)
    empty = sd.plot_sketches([[np.array([[0.0, 0.0]])]], black_background = True)
    assert len(empty.axes) == 1
    plt.close(empty)


def test_plot_udf_sweep():
    stroke = np.array([[0.1, 0.5], [0.9, 0.5]])
    fig = sd.plot_udf_sweep([sd.render_udf(stroke, gamma, 32) for gamma in (10.0, 50.0, 200.0)])
    assert [ax.get_title() for ax in fig.axes] == ["gamma = 10", "gamma = 50", "gamma = 200"]
    plt.close(fig)


def test_plot_loss():
    steps = np.arange(1, 101)
    log = pd.DataFrame({"step": steps, "total": 1.0 / steps, "vec": 0.5 / steps})
    fig = sd.plot_loss(log, window = 10)
    lines = fig.axes[0].get_lines()
    assert [line.get_label() for line in lines] == ["total", "vec"]
    assert len(lines[0].get_xdata()) == 91
    plt.close(fig)


def test_plot_trajectory():
    sketches = [sd.GeneratedSketch([np.array([[-0.5, 0.0], [0.5, 0.0]])], {"t": t}) for t in (20, 10, 1)]
    fig = sd.plot_trajectory(sketches)
    assert [ax.get_title() for ax in fig.axes] == ["t = 20", "t = 10", "t = 1"]
    plt.close(fig)
