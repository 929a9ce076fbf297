"""Contact sheets, loss curves and the matched-fraction summary table."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image

from .gmi import GmiReport
from .pngio import to_uint8
from .training import read_metrics

PAD = 2


def contact_sheet(rows: Sequence[Sequence[np.ndarray]], path, scale: int = 2) -> Path:
    """Tile images (each in [-1, 1]) into a grid, one list per row."""
    rows = [list(r) for r in rows if len(r)]
    h, w = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    sheet = np.full((len(rows) * (h + PAD) + PAD, ncols * (w + PAD) + PAD), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            top, left = PAD + i * (h + PAD), PAD + j * (w + PAD)
            sheet[top:top + h, left:left + w] = to_uint8(img)
    im = Image.fromarray(sheet, mode="L")
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path, optimize=False)
    return Path(path)


LOSS_GROUPS = {
    "adversarial": ("adv_A", "adv_B"),
    "identical": ("id_A", "id_B"),
    "pair_matched": ("pm_A", "pm_B"),
}


def plot_losses(metrics_csv, out_dir) -> List[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics(metrics_csv)
    out = []
    for name, keys in LOSS_GROUPS.items():
        series = {k: [(r["step"], r[k]) for r in rows if r[k] is not None] for k in keys}
        if not any(series.values()):
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k, pts in series.items():
            if pts:
                steps, vals = zip(*pts)
                ax.plot(steps, vals, label=k, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(name.replace("_", " ") + " loss")
        ax.legend()
        fig.tight_layout()
        path = Path(out_dir) / f"loss_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        out.append(path)
    return out


def summarize(groups: Dict[str, Sequence[GmiReport]]):
    """Mean and population std of matched fractions per model and threshold."""
    table = {}
    for label, reports in groups.items():
        thresholds = reports[0].thresholds
        stats = {}
        for t in thresholds:
            vals = np.array([r.matched_fraction[t] for r in reports])
            stats[t] = (float(vals.mean()), float(vals.std()))
        table[label] = stats
    return table


def format_table(table) -> str:
    thresholds = sorted({t for stats in table.values() for t in stats})
    head = ["TS"] + [f"{t:g}" for t in thresholds]
    lines = [head]
    for label, stats in table.items():
        cells = [label]
        for t in thresholds:
            if t in stats:
                mean, std = stats[t]
                cells.append(f"{100 * mean:.2f} (± {100 * std:.2f})")
            else:
                cells.append("-")
        lines.append(cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines) + "\n"
