"""Static SVG rendering of decoder prediction heatmaps."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DomainError

HEATMAP_HEADER = ["true_gx", "true_gy", "pred_gx", "pred_gy", "proportion"]
CELL = 14
GAP = 10


def read_heatmap_csv(path) -> np.ndarray:
    """Parse a heatmap CSV into an array indexed [true_x, true_y, pred_x, pred_y]."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DomainError(f"{path}: empty heatmap file")
        if [h.strip() for h in header] != HEATMAP_HEADER:
            raise DomainError(f"{path}:1: expected header {','.join(HEATMAP_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 5:
                raise DomainError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                idx = [int(v) for v in row[:4]]
                p = float(row[4])
            except ValueError as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
            if min(idx) < 0 or not 0.0 <= p <= 1.0:
                raise DomainError(f"{path}:{lineno}: value out of range")
            rows.append((idx, p))
    if not rows:
        raise DomainError(f"{path}: no heatmap rows")
    idx = np.array([r[0] for r in rows])
    w = int(max(idx[:, 0].max(), idx[:, 2].max())) + 1
    h = int(max(idx[:, 1].max(), idx[:, 3].max())) + 1
    out = np.zeros((w, h, w, h))
    for (tx, ty, px, py), p in rows:
        out[tx, ty, px, py] = p
    return out


def heatmaps_svg(heatmaps: np.ndarray) -> str:
    """One sub-heatmap per true goal, laid out like the grid (y grows upward).

    Within a sub-heatmap the gray level is the proportion divided by that
    heatmap's maximum, so the most frequent prediction is white. The true goal
    cell carries a red outline.
    """
    w, h = heatmaps.shape[:2]
    panel = CELL * w
    panel_h = CELL * h
    width = GAP + w * (panel + GAP)
    height = GAP + h * (panel_h + GAP)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="rgb(128,128,128)"/>']
    for tx in range(w):
        for ty in range(h):
            ox = GAP + tx * (panel + GAP)
            oy = GAP + (h - 1 - ty) * (panel_h + GAP)
            sub = heatmaps[tx, ty]
            peak = sub.max()
            parts.append(f'<g class="heatmap" data-goal="{tx},{ty}">')
            for px in range(w):
                for py in range(h):
                    level = int(round(255 * sub[px, py] / peak)) if peak > 0 else 0
                    x, y = ox + px * CELL, oy + (h - 1 - py) * CELL
                    parts.append(f'<rect class="cell" data-cell="{px},{py}" x="{x}" y="{y}" '
                                 f'width="{CELL}" height="{CELL}" '
                                 f'fill="rgb({level},{level},{level})"/>')
            x, y = ox + tx * CELL, oy + (h - 1 - ty) * CELL
            parts.append(f'<rect class="goal" x="{x + 1}" y="{y + 1}" width="{CELL - 2}" '
                         f'height="{CELL - 2}" fill="none" stroke="red" stroke-width="2"/>')
            parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_heatmaps(csv_path, out_path) -> Path:
    """Read a heatmap CSV and write the SVG; nothing is written if parsing fails."""
    svg = heatmaps_svg(read_heatmap_csv(csv_path))
    out = Path(out_path)
    out.write_text(svg)
    return out
