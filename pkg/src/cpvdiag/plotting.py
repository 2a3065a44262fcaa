"""SVG charts for the command-line outputs.

matplotlib renders to an in-memory SVG string.  A fixed hash salt and an
empty date stamp make the output byte-identical between runs.
"""
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"svg.hashsalt": "cpvdiag", "svg.fonttype": "none", "font.size": 9}


def _render(fig):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def line_chart(series, xlabel, ylabel, title="", xlim=None, ylim=None):
    """``series`` is a sequence of ``(label, x, y)``; returns SVG text."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, x, y in series:
            ax.plot(x, y, label=label, lw=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if xlim is not None:
            ax.set_xlim(*xlim)
        if ylim is not None:
            ax.set_ylim(*ylim)
        ax.grid(alpha=0.3)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _render(fig)


def histogram_chart(bins, xlabel, title=""):
    """``bins`` rows are ``(low, high, count)``."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        lows = [b[0] for b in bins]
        widths = [b[1] - b[0] for b in bins]
        ax.bar(lows, [b[2] for b in bins], width=widths, align="edge",
               edgecolor="black", lw=0.5)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _render(fig)


def bar_chart(categories, groups, ylabel, title=""):
    """Grouped bars: ``groups`` maps a legend label to one value per category."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        n = max(len(groups), 1)
        width = 0.8 / n
        for k, (label, values) in enumerate(groups.items()):
            xs = [j + (k - (n - 1) / 2) * width for j in range(len(categories))]
            ax.bar(xs, [0.0 if v is None else v for v in values], width=width, label=label)
        ax.set_xticks(range(len(categories)))
        ax.set_xticklabels(categories)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _render(fig)
