"""Render a logged episode as a standalone SVG (top-down, metres up)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import TrajectoryLog
from .scene import Arena

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
SCALE = 40.0  # pixels per metre


def render_svg(log: TrajectoryLog, arena: Arena | None = None, success_distance: float = 1.0) -> str:
    poses = [s["poses"] for s in log.steps]
    xs = [p[0] for step in poses for p in step]
    ys = [p[1] for step in poses for p in step]
    if arena is not None:
        w, h = arena.width, arena.height
    else:
        w = max(xs + [1.0]) + 1.0
        h = max(ys + [1.0]) + 1.0

    def px(x, y):
        return f"{x * SCALE:.1f},{(h - y) * SCALE:.1f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * SCALE:.0f}" height="{h * SCALE:.0f}" '
           f'viewBox="0 0 {w * SCALE:.0f} {h * SCALE:.0f}">',
           '<rect width="100%" height="100%" fill="white"/>']
    if arena is not None:
        cs = arena.cell_size * SCALE
        rows, cols = arena.shape
        for r in range(rows):
            for c in range(cols):
                if arena.occupancy[r, c]:
                    out.append(f'<rect x="{c * cs:.1f}" y="{(rows - 1 - r) * cs:.1f}" width="{cs:.1f}" '
                               f'height="{cs:.1f}" fill="#555"/>')
    for i, g in enumerate(log.episode.get("goals", [])):
        color = COLORS[i % len(COLORS)]
        gx, gy = px(*g).split(",")
        out.append(f'<circle cx="{gx}" cy="{gy}" r="{success_distance * SCALE:.1f}" fill="{color}" '
                   f'fill-opacity="0.12" stroke="{color}" stroke-dasharray="4 3"/>')
    starts = log.episode.get("starts", [])
    for i, st in enumerate(starts):
        sx, sy = px(*st).split(",")
        out.append(f'<rect x="{float(sx) - 5:.1f}" y="{float(sy) - 5:.1f}" width="10" height="10" '
                   f'fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="2"/>')
    n = len(poses[0]) if poses else 0
    for i in range(n):
        color = COLORS[i % len(COLORS)]
        path = ([starts[i]] if i < len(starts) else []) + [step[i][:2] for step in poses]
        pts = " ".join(px(p[0], p[1]) for p in path)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for t, step in enumerate(log.steps):
            if step["collided"][i]:
                cx, cy = px(*step["poses"][i][:2]).split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="black"/>')
        ex, ey = px(*poses[-1][i][:2]).split(",")
        out.append(f'<circle cx="{ex}" cy="{ey}" r="{0.2 * SCALE:.1f}" fill="{color}"/>')
    title = escape(f"{log.episode.get('arena_id', '?')} {log.difficulty} "
                   f"success={[a.succeeded for a in log.agents]}")
    out.append(f'<text x="6" y="16" font-family="monospace" font-size="12">{title}</text>')
    out.append("</svg>")
    return "\n".join(out)


def write_svg(log: TrajectoryLog, path, arena: Arena | None = None) -> Path:
    path = Path(path)
    path.write_text(render_svg(log, arena))
    return path
