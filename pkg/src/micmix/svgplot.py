"""Tiny deterministic SVG writers for batch artifacts (no plotting stack)."""

from __future__ import annotations

_W, _H, _PAD = 640, 360, 45


def _header():
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n<rect width="{_W}" height="{_H}" fill="white"/>\n'
    )


def histogram_svg(labels, counts, path, title="") -> None:
    """Bar chart of counts per dilution cell."""
    counts = [float(c) for c in counts]
    top = max(max(counts), 1.0)
    inner_w = _W - 2 * _PAD
    inner_h = _H - 2 * _PAD
    bar_w = inner_w / max(len(counts), 1)
    parts = [_header()]
    if title:
        parts.append(f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>\n')
    for i, c in enumerate(counts):
        h = inner_h * c / top
        x = _PAD + i * bar_w
        y = _H - _PAD - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.9:.1f}" height="{h:.1f}" '
            'fill="#4878a8"/>\n'
        )
        parts.append(
            f'<text x="{x + bar_w * 0.45:.1f}" y="{_H - _PAD + 14}" text-anchor="middle" '
            f'font-size="9">{labels[i]}</text>\n'
        )
    parts.append(f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>\n')
    parts.append("</svg>\n")
    with open(path, "w") as fh:
        fh.write("".join(parts))


def manhattan_svg(positions, scores, threshold_line, path, title="") -> None:
    """Scatter of per-variant scores by genomic position with the
    significance line."""
    positions = [float(p) for p in positions]
    scores = [float(s) for s in scores]
    lo, hi = min(positions), max(positions)
    span = (hi - lo) or 1.0
    top = max(max(scores), threshold_line, 1.0) * 1.05
    inner_w = _W - 2 * _PAD
    inner_h = _H - 2 * _PAD
    parts = [_header()]
    if title:
        parts.append(f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>\n')
    y_thr = _H - _PAD - inner_h * threshold_line / top
    parts.append(
        f'<line x1="{_PAD}" y1="{y_thr:.1f}" x2="{_W - _PAD}" y2="{y_thr:.1f}" '
        'stroke="red" stroke-dasharray="5,3"/>\n'
    )
    for pos, s in zip(positions, scores):
        x = _PAD + inner_w * (pos - lo) / span
        y = _H - _PAD - inner_h * s / top
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.2" fill="#333355"/>\n')
    parts.append(f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>\n')
    parts.append("</svg>\n")
    with open(path, "w") as fh:
        fh.write("".join(parts))
