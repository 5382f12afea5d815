"""
Density images
Renders a Density as a heatmap (d >= 2) or a profile curve (d = 1) with numbered markers
at the largest values, plus the marker legend as structured data.
"""

import io
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from measure_core import Density

MARKER_COLORS = ['#DC2626', '#F59E0B', '#2563EB', '#10B981', '#7C3AED']

# 5-stop ramp, dark to bright
RAMP = np.array([
    [13, 8, 135],
    [126, 3, 168],
    [204, 71, 120],
    [248, 149, 64],
    [240, 249, 33],
], dtype=float)

FONT_PATHS = ('DejaVuSans-Bold.ttf', '/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf')


def _font(size: int):
    for path in FONT_PATHS:
        try:
            return ImageFont.truetype(path, size)
        except OSError:
            continue
    return ImageFont.load_default()


def _colorize(unit: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through RAMP"""
    pos = np.clip(unit, 0.0, 1.0) * (len(RAMP) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(RAMP) - 1)
    frac = (pos - lo)[..., None]
    return (RAMP[lo] * (1 - frac) + RAMP[hi] * frac).astype(np.uint8)


def _plane(density: Density) -> np.ndarray:
    values = density.values
    if density.grid.dim == 3:
        values = values[:, :, density.grid.counts[2] // 2]
    return values


def peak_nodes(density: Density, count: int = 3) -> List[Tuple[int, ...]]:
    """Grid indices of the largest values, highest first (ties broken by index)"""
    plane = _plane(density)
    order = np.argsort(-plane.ravel(), kind='stable')[:count]
    return [tuple(int(i) for i in np.unravel_index(j, plane.shape)) for j in order]


def render_density(density: Density, size: Tuple[int, int] = (640, 480), markers: int = 3,
                   title: Optional[str] = None) -> Tuple[Image.Image, List[Dict]]:
    """
    Draw the density and mark its largest values

    Args:
        density: density to draw (d = 3 shows the middle slice of the last axis)
        size: image size in pixels
        markers: number of numbered peak markers
        title: optional caption drawn in the top-left corner

    Returns:
        Tuple of (image, legend) where legend holds number, position and value per marker
    """
    width, height = size
    grid = density.grid
    axes = grid.axes()
    plane = _plane(density)
    if grid.dim == 1:
        image = Image.new('RGB', size, '#FFFFFF')
        draw = ImageDraw.Draw(image)
        peak = float(density.values.max()) or 1.0
        xs = np.linspace(30, width - 30, grid.counts[0])
        ys = height - 30 - (height - 80) * density.values / peak
        draw.line(list(zip(xs.tolist(), ys.tolist())), fill='#2563EB', width=3)
        draw.line([(30, height - 30), (width - 30, height - 30)], fill='#6B7280', width=1)
        to_pixel = lambda idx: (float(xs[idx[0]]), float(ys[idx[0]]))
    else:
        peak = float(plane.max()) or 1.0
        # image rows run top to bottom, the second axis bottom to top
        rgb = _colorize(plane.T[::-1] / peak)
        image = Image.fromarray(rgb).resize(size, Image.Resampling.NEAREST)
        draw = ImageDraw.Draw(image)
        sx, sy = width / plane.shape[0], height / plane.shape[1]
        to_pixel = lambda idx: ((idx[0] + 0.5) * sx, height - (idx[1] + 0.5) * sy)

    font = _font(max(12, min(width, height) // 30))
    legend = []
    radius = max(8, min(width, height) // 40)
    for number, idx in enumerate(peak_nodes(density, markers), 1):
        x, y = to_pixel(idx)
        color = MARKER_COLORS[(number - 1) % len(MARKER_COLORS)]
        draw.ellipse([x - radius - 2, y - radius - 2, x + radius + 2, y + radius + 2], fill='#FFFFFF')
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=color)
        label = str(number)
        box = draw.textbbox((0, 0), label, font=font)
        draw.text((x - (box[2] - box[0]) / 2, y - (box[3] - box[1]) / 2 - box[1]), label, fill='#FFFFFF', font=font)
        legend.append({
            'number': number,
            'position': [float(axes[a][idx[a]]) for a in range(len(idx))],
            'value': float(plane[idx]),
            'color': color,
        })

    if title:
        box = draw.textbbox((0, 0), title, font=font)
        draw.rectangle([8, 8, 16 + box[2] - box[0], 16 + box[3] - box[1]], fill='#FFFFFF')
        draw.text((12, 12 - box[1]), title, fill='#111827', font=font)
    return image, legend


def create_thumbnail(image: Image.Image, max_size: Tuple[int, int] = (800, 600)) -> Image.Image:
    thumb = image.copy()
    thumb.thumbnail(max_size, Image.Resampling.LANCZOS)
    return thumb


def png_bytes(image: Image.Image) -> io.BytesIO:
    buffer = io.BytesIO()
    image.save(buffer, format='PNG')
    buffer.seek(0)
    return buffer


def legend_rows(legend: Sequence[Dict]) -> List[List[str]]:
    """Legend as table rows for the PDF report"""
    rows = [['#', 'position', 'density']]
    for item in legend:
        position = ', '.join(f"{c:.3g}" for c in item['position'])
        rows.append([str(item['number']), f"({position})", f"{item['value']:.4g}"])
    return rows
