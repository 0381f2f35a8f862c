"""Self-contained SVG line plots (ROC curves and score densities).

Coordinates are written with fixed precision so identical inputs give identical bytes.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

W, H = 360, 300
PAD_L, PAD_R, PAD_T, PAD_B = 48, 16, 32, 40


def _xy(x, y, y_max):
    px = PAD_L + x * (W - PAD_L - PAD_R)
    py = H - PAD_B - (y / y_max) * (H - PAD_T - PAD_B)
    return f"{px:.2f},{py:.2f}"


def _polyline(xs, ys, y_max, color, dash=None):
    pts = " ".join(_xy(x, y, y_max) for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{pts}"/>'


def _frame(title, x_label, y_label, y_max):
    x0, x1 = PAD_L, W - PAD_R
    y0, y1 = H - PAD_B, PAD_T
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13" font-family="sans-serif">'
        f"{escape(title)}</text>",
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for k in range(6):
        t = k / 5
        px = PAD_L + t * (x1 - x0)
        py = y0 - t * (y0 - y1)
        parts.append(f'<text x="{px:.1f}" y="{y0 + 14}" text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{t:.1f}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{py + 3:.1f}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{t * y_max:.1f}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{H - 8}" text-anchor="middle" font-size="11" '
                 f'font-family="sans-serif">{escape(x_label)}</text>')
    parts.append(f'<text x="12" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="11" '
                 f'font-family="sans-serif" transform="rotate(-90 12 {(y0 + y1) / 2:.1f})">'
                 f"{escape(y_label)}</text>")
    return parts


def _legend(entries):
    out = []
    for k, (label, color) in enumerate(entries):
        y = PAD_T + 12 + 14 * k
        out.append(f'<line x1="{W - 150}" y1="{y}" x2="{W - 132}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - 126}" y="{y + 4}" font-size="10" font-family="sans-serif">'
                   f"{escape(label)}</text>")
    return out


def roc_svg(fpr, tpr, title, auc_value):
    parts = _frame(title, "false positive rate", "true positive rate", 1.0)
    parts.append(_polyline([0, 1], [0, 1], 1.0, "#999999", dash="4,3"))
    parts.append(_polyline(fpr, tpr, 1.0, "#1f5fa8"))
    parts += _legend([(f"AUC = {auc_value:.3f}", "#1f5fa8")])
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def density_svg(grid, dens_pos, dens_neg, title, brier_value):
    y_max = max(1.0, float(max(max(dens_pos), max(dens_neg))) * 1.05)
    parts = _frame(title, "predicted score", "density", y_max)
    parts.append(_polyline(grid, dens_neg, y_max, "#2c8c3c"))
    parts.append(_polyline(grid, dens_pos, y_max, "#c0392b"))
    parts += _legend([("GON+", "#c0392b"), ("GON-", "#2c8c3c"), (f"Brier = {brier_value:.3f}", "white")])
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
