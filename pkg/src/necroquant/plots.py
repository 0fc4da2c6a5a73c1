"""SVG figures: ratio scatter and Kaplan-Meier step plots.

matplotlib is imported lazily so plain pipeline commands stay fast; SVG
output is made reproducible (fixed hash salt, no embedded date).
"""

from pathlib import Path

GRADE_COLORS = {"IV": "red", "III": "green", "II": "orange", "I": "blue"}


def _fig():
    import matplotlib
    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "necroquant"
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})


def scatter_svg(path, scatter):
    """Reported vs model ratio, colored by reported grade."""
    plt = _fig()
    fig, ax = plt.subplots(figsize=(5, 5))
    for grade, color in GRADE_COLORS.items():
        pts = [(r_pr, r_dl) for r_pr, r_dl, g in scatter if g == grade]
        if pts:
            ax.scatter([p[0] for p in pts], [p[1] for p in pts],
                       s=18, c=color, label=f"Grade {grade}")
    ax.plot([0, 1], [0, 1], lw=0.5, c="gray")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("reported necrosis ratio")
    ax.set_ylabel("model necrosis ratio")
    ax.legend(loc="upper left", fontsize=8)
    _save(fig, path)
    plt.close(fig)


def km_svg(path, curves: dict, title=""):
    """Step plot per arm with censoring tick marks."""
    plt = _fig()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    colors = {"responder": "tab:blue", "nonresponder": "tab:red"}
    for name, curve in curves.items():
        color = colors.get(name, "black")
        xs, ys = [0.0], [1.0]
        for t, s in zip(curve.times, curve.survival):
            xs += [t, t]
            ys += [ys[-1], s]
        horizon = max([*curve.times, *curve.censor_times], default=1.0)
        xs.append(horizon)
        ys.append(ys[-1])
        ax.plot(xs, ys, drawstyle="default", color=color, label=name)
        if curve.censor_times:
            ax.plot(curve.censor_times, [curve.at(t) for t in curve.censor_times],
                    linestyle="none", marker="|", color=color, markersize=8)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("months")
    ax.set_ylabel("survival probability")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    _save(fig, path)
    plt.close(fig)
