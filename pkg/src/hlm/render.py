"""Stick-figure SVG rendering: overlaid side-view skeletons, one per
sampled frame, earlier frames drawn lighter."""

import math

import numpy as np

from .motion import FOOT_H, L_TORSO

_SCALE = 100.0          # meters to SVG user units
_BONES = (
    ("pelvis", "torso"), ("torso", "head"),
    ("torso", "hand_l"), ("torso", "hand_r"),
    ("pelvis", "knee_l"), ("knee_l", "foot_l"),
    ("pelvis", "knee_r"), ("knee_r", "foot_r"),
)


def _skeleton_points(frames, t):
    """Side-view 2-D joint map (forward progress, height) for frame t."""
    f = frames.astype(np.float64)
    # arc length walked so far anchors the figure horizontally
    steps = np.linalg.norm(np.diff(f[: t + 1, 0:2], axis=0), axis=1) if t > 0 else []
    arc = float(np.sum(steps))
    dx_torso, z_torso = f[t, 2], f[t, 3]
    lean = math.asin(max(-1.0, min(1.0, dx_torso / L_TORSO)))
    pelvis_z = z_torso - L_TORSO * math.cos(lean)
    pts = {"pelvis": (arc, pelvis_z)}
    for name, col in (("torso", 2), ("head", 4), ("hand_l", 6), ("hand_r", 8),
                      ("knee_l", 10), ("foot_l", 12), ("knee_r", 14), ("foot_r", 16)):
        pts[name] = (arc + f[t, col], f[t, col + 1])
    return pts


def _lightness(i, count):
    frac = i / max(1, count - 1)
    return 88.0 - 63.0 * frac    # early frames light, late frames dark


def render_svg(motion, stride=4):
    """Overlay every stride-th frame of the motion as a stick figure.

    Returns an SVG document string; the viewBox bounds every joint drawn.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames = motion.frames
    if frames.shape[0] == 0:
        raise ValueError("cannot render an empty motion")
    picks = list(range(0, frames.shape[0], stride))
    skeletons = [_skeleton_points(frames, t) for t in picks]

    xs, ys = [], []
    for pts in skeletons:
        for x, z in pts.values():
            xs.append(x * _SCALE)
            ys.append(-z * _SCALE)
    pad = 10.0
    min_x, max_x = min(xs) - pad, max(xs) + pad
    min_y, max_y = min(ys) - pad, max(ys) + pad
    ground = -FOOT_H * _SCALE + 4.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{min_x:.1f} {min_y:.1f} {max_x - min_x:.1f} {max_y - min_y:.1f}">',
        f'<line x1="{min_x:.1f}" y1="{ground:.1f}" x2="{max_x:.1f}" y2="{ground:.1f}" '
        f'stroke="#999" stroke-width="0.8"/>',
    ]
    for i, pts in enumerate(skeletons):
        light = _lightness(i, len(skeletons))
        color = f"hsl(215, 70%, {light:.0f}%)"
        parts.append(f'<g class="skel" stroke="{color}" stroke-width="2.2" '
                     f'stroke-linecap="round" fill="none">')
        for a, b in _BONES:
            x1, z1 = pts[a]
            x2, z2 = pts[b]
            parts.append(
                f'<line x1="{x1 * _SCALE:.2f}" y1="{-z1 * _SCALE:.2f}" '
                f'x2="{x2 * _SCALE:.2f}" y2="{-z2 * _SCALE:.2f}"/>')
        hx, hz = pts["head"]
        parts.append(f'<circle cx="{hx * _SCALE:.2f}" cy="{-hz * _SCALE:.2f}" r="4.5" '
                     f'fill="hsl(215, 70%, {light:.0f}%)" stroke="none"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts)
