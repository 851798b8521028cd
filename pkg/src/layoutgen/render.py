"""SVG rendering of layouts: one colored rectangle per element plus a
category legend.  Colors are a stable hash of the category id so the same
category always renders the same across runs and files."""

from __future__ import annotations

import hashlib
from xml.sax.saxutils import escape

from .core import Layout, canonical_order

_LEGEND_ROW = 22
_LEGEND_PAD = 8


def category_color(category: int) -> str:
    digest = hashlib.md5(str(int(category)).encode()).digest()
    hue = int.from_bytes(digest[:4], "little") % 360
    return f"hsl({hue}, 65%, 55%)"


def layout_to_svg(layout: Layout, category_names=None) -> str:
    w_px, h_px = layout.canvas
    lay = canonical_order(layout)
    cats = sorted({e.category for e in lay.elements})
    legend_h = _LEGEND_PAD + _LEGEND_ROW * len(cats) if cats else 0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" '
        f'height="{h_px + legend_h}" viewBox="0 0 {w_px} {h_px + legend_h}">',
        f'<rect x="0" y="0" width="{w_px}" height="{h_px}" fill="white" '
        f'stroke="#333" stroke-width="2"/>',
    ]
    for e in lay.elements:
        cx, cy, w, h = e.bbox
        parts.append(
            f'<rect x="{(cx - w / 2) * w_px:.2f}" y="{(cy - h / 2) * h_px:.2f}" '
            f'width="{w * w_px:.2f}" height="{h * h_px:.2f}" '
            f'fill="{category_color(e.category)}" fill-opacity="0.55" '
            f'stroke="{category_color(e.category)}" stroke-width="2"/>')
    for row, cat in enumerate(cats):
        y = h_px + _LEGEND_PAD + row * _LEGEND_ROW
        name = category_names[cat - 1] if category_names and cat <= len(category_names) \
            else f"category {cat}"
        parts.append(f'<rect x="6" y="{y}" width="14" height="14" '
                     f'fill="{category_color(cat)}"/>')
        parts.append(f'<text x="26" y="{y + 12}" font-family="sans-serif" '
                     f'font-size="13">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
