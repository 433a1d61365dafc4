"""Static SVG figures: prompt-count bars per epoch, accuracy curves, cls->prompt heatmaps.

Only a handful of primitives are needed (rect, line, polyline, text), so the
writer is a small string builder rather than a plotting dependency.
"""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class Svg:
    def __init__(self, width: float, height: float):
        self.width, self.height = width, height
        self.items: list[str] = []

    def rect(self, x, y, w, h, fill="#888", stroke="none"):
        self.items.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(w, 0):.2f}" height="{max(h, 0):.2f}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0):
        self.items.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{stroke}" stroke-width="{width}"/>')

    def polyline(self, xs, ys, stroke="#000", width=1.5):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x, y, s, size=10, anchor="middle"):
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
                          f'text-anchor="{anchor}">{escape(str(s))}</text>')

    def to_string(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width:.0f}" height="{self.height:.0f}" '
                f'viewBox="0 0 {self.width:.0f} {self.height:.0f}">')
        return "\n".join([head, f'<rect width="100%" height="100%" fill="white"/>', *self.items, "</svg>"]) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_string())


def _axes(svg: Svg, x0, y0, w, h):
    svg.line(x0, y0 + h, x0 + w, y0 + h)
    svg.line(x0, y0, x0, y0 + h)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def counts_over_epochs(history: Sequence[dict], num_blocks: int) -> np.ndarray:
    """(epochs, L) prompt counts per block from distribution-history records."""
    rows = []
    for rec in history:
        a = np.asarray(rec["assignments"], dtype=np.int64)
        rows.append(np.bincount(a, minlength=num_blocks + 1)[1:num_blocks + 1])
    return np.array(rows, dtype=np.int64).reshape(len(rows), num_blocks)


def distribution_bars(history: Sequence[dict], num_blocks: int, max_frames: int = 12,
                      title: str = "prompts per block") -> Svg:
    """Small multiples: one bar chart of prompt counts per block for each shown epoch."""
    counts = counts_over_epochs(history, num_blocks)
    E = counts.shape[0]
    if E == 0:
        raise ValueError("empty distribution history")
    frames = np.unique(np.linspace(0, E - 1, min(max_frames, E)).round().astype(int))
    cols = min(4, frames.size)
    rows = -(-frames.size // cols)
    fw, fh = 180, 130
    svg = Svg(cols * fw + 20, rows * fh + 40)
    svg.text(svg.width / 2, 20, title, size=13)
    top = max(1, int(counts.max()))
    for i, e in enumerate(frames):
        x0 = 10 + (i % cols) * fw + 25
        y0 = 35 + (i // cols) * fh
        w, h = fw - 40, fh - 45
        _axes(svg, x0, y0, w, h)
        bw = w / num_blocks
        for j, c in enumerate(counts[e]):
            bh = h * c / top
            svg.rect(x0 + j * bw + 2, y0 + h - bh, bw - 4, bh, fill=PALETTE[0])
            svg.text(x0 + (j + 0.5) * bw, y0 + h + 11, j + 1, size=8)
        svg.text(x0 - 4, y0 + 6, top, size=8, anchor="end")
        svg.text(x0 + w / 2, y0 + h + 24, f"epoch {history[e]['epoch']}", size=9)
    return svg


def accuracy_curves(curves: dict, title: str = "accuracy") -> Svg:
    """Overlay of accuracy-vs-epoch curves; ``curves`` maps a label to (epochs, accuracies)."""
    if not curves:
        raise ValueError("no curves to plot")
    W, H, x0, y0, w, h = 520, 320, 50, 35, 340, 240
    svg = Svg(W, H)
    svg.text(W / 2, 20, title, size=13)
    _axes(svg, x0, y0, w, h)
    emax = max(max(e) for e, _ in curves.values())
    emin = min(min(e) for e, _ in curves.values())
    lo = min(min(a) for _, a in curves.values())
    hi = max(max(a) for _, a in curves.values())
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    span = max(emax - emin, 1)
    for t in np.linspace(lo, hi, 5):
        yy = y0 + h - h * (t - lo) / (hi - lo)
        svg.line(x0 - 3, yy, x0, yy)
        svg.text(x0 - 5, yy + 3, f"{t:.2f}", size=8, anchor="end")
    svg.text(x0 + w / 2, y0 + h + 28, "epoch", size=10)
    for i, (name, (ep, acc)) in enumerate(curves.items()):
        col = PALETTE[i % len(PALETTE)]
        xs = [x0 + w * (e - emin) / span for e in ep]
        ys = [y0 + h - h * (a - lo) / (hi - lo) for a in acc]
        svg.polyline(xs, ys, stroke=col)
        ly = y0 + 12 + 16 * i
        svg.line(x0 + w + 15, ly - 3, x0 + w + 35, ly - 3, stroke=col, width=2)
        svg.text(x0 + w + 40, ly, name, size=9, anchor="start")
    return svg


def attention_matrix(model, images, prompts, dist) -> np.ndarray:
    """(L, N) mean cls->prompt attention (head averaged); zero where prompt k is not in block i."""
    per_block = model.cls_prompt_attention(images, prompts, dist)
    N = len(dist)
    M = np.zeros((len(per_block), N))
    for i, blk in enumerate(per_block):
        if blk["prompts"]:
            M[i, blk["prompts"]] = blk["weights"].mean(axis=0)
    return M


def attention_heatmap(M: np.ndarray, title: str = "cls -> prompt attention") -> Svg:
    M = np.asarray(M, dtype=np.float64)
    L, N = M.shape
    cell = 22
    x0, y0 = 50, 40
    svg = Svg(x0 + N * cell + 30, y0 + L * cell + 40)
    svg.text(svg.width / 2, 20, title, size=13)
    top = M.max() if M.size and M.max() > 0 else 1.0
    for i in range(L):
        svg.text(x0 - 6, y0 + (i + 0.65) * cell, f"b{i + 1}", size=9, anchor="end")
        for k in range(N):
            v = M[i, k] / top
            shade = int(round(255 * (1 - v)))
            svg.rect(x0 + k * cell, y0 + i * cell, cell - 1, cell - 1, fill=f"rgb({shade},{shade},255)")
    for k in range(N):
        svg.text(x0 + (k + 0.5) * cell, y0 + L * cell + 12, k, size=8)
    return svg
