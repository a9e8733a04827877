"""Static SVG figures written as plain text.

Tube outlines and target rectangles are drawn with ``<polyline>`` and
``<polygon>`` elements; each closed-loop trajectory is exactly one
``<path class="episode">`` so figures can be checked structurally.
"""
from xml.sax.saxutils import escape

import numpy as np

from .dynamics import POS

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#17becf"]


def tube_boundary(env, offset):
    """Polyline at signed normal `offset` from the centerline, mitred at joints."""
    pts = [env.starts[0] + offset * env.normals[0]]
    for i in range(1, env.n_segments):
        t0, t1 = env.tangents[i - 1], env.tangents[i]
        p0 = env.starts[i] + offset * env.normals[i - 1]
        p1 = env.starts[i] + offset * env.normals[i]
        M = np.column_stack([t0, -t1])
        if abs(np.linalg.det(M)) < 1e-12:
            pts.append(p1)
            continue
        a, _b = np.linalg.solve(M, p1 - p0)
        pts.append(p0 + a * t0)
    pts.append(env.starts[-1] + offset * env.normals[-1])
    return np.array(pts)


def rect_polygon(env, rect, n=8):
    """Cartesian outline of a Frenet rectangle ``[[s_lo, h_lo], [s_hi, h_hi]]``."""
    (s0, h0), (s1, h1) = rect
    s0 = max(s0, 0.0)
    s1 = min(s1, env.total_length)
    ss = np.linspace(s0, s1, n)
    lower = [env.frenet_to_cartesian(s, h0) for s in ss]
    upper = [env.frenet_to_cartesian(s, h1) for s in ss[::-1]]
    return np.array(lower + upper)


class _Canvas:
    def __init__(self, points, width, height, pad=20):
        P = np.vstack(points)
        self.lo = P.min(axis=0)
        span = np.maximum(P.max(axis=0) - self.lo, 1e-9)
        self.scale = min((width - 2 * pad) / span[0], (height - 2 * pad) / span[1])
        self.pad = pad
        self.height = height

    def xy(self, P):
        P = np.atleast_2d(P)
        x = self.pad + (P[:, 0] - self.lo[0]) * self.scale
        y = self.height - self.pad - (P[:, 1] - self.lo[1]) * self.scale
        return np.column_stack([x, y])

    def points_attr(self, P):
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in self.xy(P))

    def path_d(self, P):
        q = self.xy(P)
        head = f"M{q[0, 0]:.2f},{q[0, 1]:.2f}"
        return head + "".join(f" L{x:.2f},{y:.2f}" for x, y in q[1:])


def trajectory_svg(env, executions, labels=None, targets=None, width=900, height=600,
                   title=None):
    """Tube outline, one path per execution and optional target rectangles.

    `targets` is a list of Frenet rectangles ``[[s_lo, h_lo], [s_hi, h_hi]]``.
    """
    labels = labels or [f"episode {i}" for i in range(len(executions))]
    half = 0.5 * env.width
    left, right = tube_boundary(env, half), tube_boundary(env, -half)
    cv = _Canvas([left, right] + [ex.states[:, POS] for ex in executions], width, height)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="10" y="16" font-size="13">{escape(title)}</text>')
    for b in (left, right):
        out.append(f'<polyline class="tube" points="{cv.points_attr(b)}" fill="none" '
                   f'stroke="#4a90c2" stroke-width="1.5"/>')
    out.append(f'<polyline class="centerline" points="{cv.points_attr(env.starts)}" '
               f'fill="none" stroke="#4a90c2" stroke-dasharray="6,4"/>')
    for rect in targets or []:
        if rect is None:
            continue
        out.append(f'<polygon class="target" points="{cv.points_attr(rect_polygon(env, rect))}" '
                   f'fill="#f5a623" fill-opacity="0.35" stroke="#c77c00" stroke-width="0.8"/>')
    for i, (ex, lab) in enumerate(zip(executions, labels)):
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<path class="episode" d="{cv.path_d(ex.states[:, POS])}" fill="none" '
                   f'stroke="{color}" stroke-width="1.6"><title>{escape(str(lab))}</title></path>')
    for i, lab in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        y = height - 10 - 14 * (len(labels) - 1 - i)
        out.append(f'<text x="{width - 160}" y="{y}" font-size="11" fill="{color}">'
                   f'{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def duration_bar_svg(names, series, dt=0.01, width=900, height=360, title=None):
    """Grouped bars of episode durations in seconds.

    `series` maps a legend label (e.g. controller name) to one duration in
    steps per entry of `names`.
    """
    labels = list(series)
    n = len(names)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="10" y="16" font-size="13">{escape(title)}</text>')
    vals = [np.asarray(series[k], dtype=float) * dt for k in labels]
    top = max([float(v.max()) for v in vals if v.size] + [1e-9])
    left, bottom, plot_h = 50, height - 40, height - 80
    group_w = (width - left - 20) / max(n, 1)
    bar_w = group_w * 0.8 / max(len(labels), 1)
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{width - 20}" y2="{bottom}" stroke="black"/>')
    for j, (lab, v) in enumerate(zip(labels, vals)):
        color = PALETTE[j % len(PALETTE)]
        for i in range(n):
            h = plot_h * v[i] / top
            x = left + i * group_w + 0.1 * group_w + j * bar_w
            out.append(f'<rect class="bar" x="{x:.2f}" y="{bottom - h:.2f}" width="{bar_w:.2f}" '
                       f'height="{h:.2f}" fill="{color}"><title>{escape(str(names[i]))} '
                       f'{escape(str(lab))}: {v[i]:.2f} s</title></rect>')
        out.append(f'<text x="{left + 10 + 150 * j}" y="{height - 10}" font-size="11" '
                   f'fill="{color}">{escape(str(lab))} (mean {v.mean() if v.size else 0:.2f} s)'
                   f'</text>')
    out.append(f'<text x="5" y="{bottom - plot_h}" font-size="10">{top:.1f} s</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
