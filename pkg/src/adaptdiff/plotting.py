"""Report figures.  Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "svg.hashsalt": "adaptdiff",
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(curves, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for c in curves:
            ax.plot(np.arange(1, len(c.losses) + 1), c.losses, label=c.name, lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss")
        ax.set_yscale("log")
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def dice_bars(targets, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        names = [t.name for t in targets]
        x = np.arange(len(names))
        for k, (label, attr) in enumerate((("baseline", "baseline"), ("adapted", "adapted"), ("oracle", "oracle"))):
            vals = [getattr(t, attr) for t in targets]
            ax.bar(x + (k - 1) * 0.27, [v.mean() for v in vals], 0.25,
                   yerr=[v.std() for v in vals], label=label, capsize=2)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1)
        ax.set_ylabel("Dice on held-out target")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def montage(rows: list[list[np.ndarray]], path: Path, titles: list[str] | None = None) -> Path:
    with plt.rc_context(STYLE):
        nr, nc = len(rows), max(len(r) for r in rows)
        fig, axes = plt.subplots(nr, nc, figsize=(1.2 * nc, 1.2 * nr), squeeze=False)
        for i, row in enumerate(rows):
            for j in range(nc):
                ax = axes[i, j]
                ax.axis("off")
                if j < len(row):
                    ax.imshow(row[j], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            if titles:
                axes[i, 0].set_title(titles[i], loc="left")
        return _save(fig, path)


def robustness_heatmap(result, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        im = ax.imshow(result.mean_dice, cmap="RdYlGn", vmin=0, vmax=1, origin="upper")
        ax.set_xticks(range(len(result.fn_rates)), [f"{r:g}" for r in result.fn_rates])
        ax.set_yticks(range(len(result.fp_rates)), [f"{r:g}" for r in result.fp_rates])
        ax.set_xlabel("false-negative rate")
        ax.set_ylabel("false-positive rate")
        for i in range(len(result.fp_rates)):
            for j in range(len(result.fn_rates)):
                v = result.mean_dice[i, j]
                ax.text(j, i, "n/a" if np.isnan(v) else f"{v:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046, label="re-segmentation Dice")
        return _save(fig, path)


def render_run(report, run_dir: Path, syn_preview=None) -> list[Path]:
    from .gridio import Manifest

    fig_dir = Path(run_dir) / "figures"
    paths = [loss_curves(report.curves, fig_dir / "loss_curves.png")]
    if report.targets:
        paths.append(dice_bars(report.targets, fig_dir / "dice.png"))
    for name, d in (syn_preview or {}).items():
        man = Manifest.load(d)
        k = min(6, len(man))
        if k:
            paths.append(montage([list(man.masks()[:k]), list(man.images()[:k])],
                                 fig_dir / f"synthetic_{name}.png", ["mask", "sample"]))
    return paths
