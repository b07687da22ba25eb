"""Result tabulation and qualitative keypoint overlays.

Renders suite-result CSVs as plain-text and markdown tables with the best
value per metric column highlighted within each (preset, split) group, and
draws per-sample overlay images showing ground-truth keypoints, predicted
keypoints, and the error segment connecting each pair.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from . import metrics as met

# metric columns as they appear in suite CSVs; pck is the only higher-is-better one
METRIC_COLUMNS = ("kerror_px", "pck_pct", "range_error_frac",
                  "attitude_error_deg", "esa_score")
HIGHER_IS_BETTER = frozenset({"pck_pct"})


class ReportFormatError(ValueError):
    """A suite CSV is missing required columns or has malformed values."""


def read_suite_csv(text: str):
    """Parse suite CSV text into a list of row dicts with float metrics."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"algorithm", "training_set", *METRIC_COLUMNS}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        missing = sorted(required - set(reader.fieldnames or ()))
        raise ReportFormatError(f"suite CSV missing columns: {missing}")
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        row = {"algorithm": raw["algorithm"], "training_set": raw["training_set"]}
        for col in METRIC_COLUMNS:
            try:
                row[col] = float(raw[col])
            except ValueError:
                raise ReportFormatError(
                    f"suite CSV line {lineno}: column {col!r} is not a number: "
                    f"{raw[col]!r}") from None
        rows.append(row)
    if not rows:
        raise ReportFormatError("suite CSV has no data rows")
    return rows


def group_rows(rows):
    """Group rows by training_set (preset + split size), preserving order."""
    groups = {}
    for row in rows:
        groups.setdefault(row["training_set"], []).append(row)
    return groups


def best_mask(group):
    """Per column, which rows hold the best value (ties: all of them).

    Returns {column: set of row indices}. Lower is better for every metric
    except PCK.
    """
    mask = {}
    for col in METRIC_COLUMNS:
        vals = [row[col] for row in group]
        best = max(vals) if col in HIGHER_IS_BETTER else min(vals)
        mask[col] = {i for i, v in enumerate(vals) if v == best}
    return mask


_HEADERS = ("algorithm", "training_set", "KError [px]", "PCK [%]",
            "Range err", "Attitude [deg]", "ESA score")


def _format_cells(group, bold):
    """Rows of formatted strings, best cells wrapped with the bold marker."""
    mask = best_mask(group)
    out = []
    for i, row in enumerate(group):
        cells = [row["algorithm"], row["training_set"]]
        for col in METRIC_COLUMNS:
            text = f"{row[col]:.2f}"
            if i in mask[col]:
                text = bold(text)
            cells.append(text)
        out.append(cells)
    return out


def render_table(rows, fmt: str = "text") -> str:
    """Render suite rows grouped by training set.

    ``fmt`` is "text" (best values marked with asterisks) or "markdown"
    (best values in **bold**).
    """
    if fmt not in ("text", "markdown"):
        raise ValueError(f"unknown table format {fmt!r}")
    bold = (lambda s: f"**{s}**") if fmt == "markdown" else (lambda s: f"*{s}*")
    body = []
    for _, group in sorted(group_rows(rows).items()):
        body.extend(_format_cells(group, bold))
        body.append(None)  # group separator
    while body and body[-1] is None:
        body.pop()

    widths = [len(h) for h in _HEADERS]
    for cells in body:
        if cells:
            widths = [max(w, len(c)) for w, c in zip(widths, cells)]

    if fmt == "markdown":
        lines = ["| " + " | ".join(h.ljust(w) for h, w in zip(_HEADERS, widths)) + " |",
                 "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        for cells in body:
            if cells is None:
                continue  # markdown tables have no separator rows
            lines.append("| " + " | ".join(c.ljust(w)
                                           for c, w in zip(cells, widths)) + " |")
    else:
        rule = "  ".join("-" * w for w in widths)
        lines = ["  ".join(h.ljust(w) for h, w in zip(_HEADERS, widths)), rule]
        for cells in body:
            lines.append(rule if cells is None else
                         "  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


# -- qualitative overlays ----------------------------------------------------------


def select_plot_samples(testset, n_images: int, seed: int):
    """Deterministic choice of n_images distinct samples from the test set."""
    if n_images < 1 or n_images > len(testset):
        raise ValueError(
            f"n_images must be in [1, {len(testset)}], got {n_images}")
    idx = np.sort(np.random.default_rng(seed).choice(
        len(testset), size=n_images, replace=False))
    return [testset[i] for i in idx]


def overlay_figure(sample, pred_crop, title: str = ""):
    """Matplotlib figure: crop image, GT keypoints (green), predictions
    (red), and a yellow segment connecting each prediction to its GT."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    gt = np.array([[p.u, p.v] for p in sample.keypoints2d])
    pred = np.asarray(pred_crop, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != GT shape {gt.shape}")
    fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
    ax.imshow(sample.image, cmap="gray", vmin=0.0, vmax=1.0)
    for g, p in zip(gt, pred):
        ax.plot([g[0], p[0]], [g[1], p[1]], color="yellow", linewidth=1.0,
                zorder=1)
    ax.scatter(gt[:, 0], gt[:, 1], s=24, color="lime", marker="o",
               label="ground truth", zorder=2)
    ax.scatter(pred[:, 0], pred[:, 1], s=24, color="red", marker="x",
               label="predicted", zorder=3)
    ax.legend(loc="upper right", fontsize=7)
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    fig.tight_layout()
    return fig


def plot_predictions(bundle, testset, out_dir, n_images: int, seed: int = 0,
                     keypoint_override=None, beta: float = 100.0):
    """One overlay PNG per selected sample; returns the written paths."""
    import os

    paths = []
    for sample in select_plot_samples(testset, n_images, seed):
        if keypoint_override is not None:
            pred_full = np.asarray(keypoint_override(sample), dtype=np.float64)
        else:
            pred_full = met.predict_keypoints_full(bundle, sample, beta=beta)
        pred_crop = sample.crop_transform.to_crop(pred_full)
        fig = overlay_figure(sample, pred_crop, title=f"sample {sample.index}")
        path = os.path.join(out_dir, f"overlay_{sample.index:05d}.png")
        fig.savefig(path)
        import matplotlib.pyplot as plt
        plt.close(fig)
        paths.append(path)
    return paths
