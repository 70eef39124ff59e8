"""Line-chart rasters of a window's observed eGFR trajectory.

Drawing uses Pillow with its bundled default font, so output depends only on the
input window, the style, and the installed Pillow build. The target visit is never
read here.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

from egfrlmm.cohort import PredictionWindow
from egfrlmm.errors import ConfigError, RenderError

Y_LABEL = "eGFR (mL/min/1.73m²)"
X_LABEL = "Date"


@dataclass(frozen=True)
class ChartStyle:
    width: int = 800
    height: int = 500
    margin_left: int = 90
    margin_right: int = 30
    margin_top: int = 40
    margin_bottom: int = 80
    marker_size: int = 5
    line_width: int = 2
    font_size: int = 13
    y_ticks: int = 5
    background: tuple[int, int, int] = (255, 255, 255)
    line_color: tuple[int, int, int] = (31, 119, 180)
    marker_color: tuple[int, int, int] = (214, 39, 40)
    axis_color: tuple[int, int, int] = (0, 0, 0)
    grid_color: tuple[int, int, int] = (225, 225, 225)
    title: str = "eGFR trajectory"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("chart width and height must be positive")
        if self.plot_width <= 0 or self.plot_height <= 0:
            raise ConfigError("chart margins leave no room for the plot area")

    @property
    def plot_width(self) -> int:
        return self.width - self.margin_left - self.margin_right

    @property
    def plot_height(self) -> int:
        return self.height - self.margin_top - self.margin_bottom

    @classmethod
    def from_mapping(cls, data: dict) -> "ChartStyle":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown chart style keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChartImage:
    width: int
    height: int
    pixels: bytes = field(repr=False)  # RGB, row-major
    window_id: str
    # Pixel centres of the plotted markers, in visit order.
    markers: tuple[tuple[int, int], ...] = ()

    @property
    def digest(self) -> str:
        return pixel_digest(self.width, self.height, self.pixels)

    @property
    def segments(self) -> int:
        return max(len(self.markers) - 1, 0)

    def to_pil(self) -> Image.Image:
        return Image.frombytes("RGB", (self.width, self.height), self.pixels)

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.to_pil().save(buf, format="PNG", optimize=False, compress_level=6)
        return buf.getvalue()


def pixel_digest(width: int, height: int, pixels: bytes) -> str:
    h = hashlib.sha256()
    h.update(f"{width}x{height}:".encode())
    h.update(pixels)
    return h.hexdigest()


def _nice_step(span: float, n: int) -> float:
    raw = span / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 2.5, 5, 10):
        if raw <= mult * mag:
            return mult * mag
    return 10 * mag


def y_axis_range(values: list[float], n_ticks: int) -> tuple[float, float, float]:
    lo, hi = min(values), max(values)
    span = hi - lo
    pad = max(span * 0.1, 1.0)
    step = _nice_step(span + 2 * pad, n_ticks)
    y0 = math.floor((lo - pad) / step) * step
    y1 = math.ceil((hi + pad) / step) * step
    return max(y0, 0.0), y1, step


def _font(size: int):
    return ImageFont.load_default(size=size)


def _draw_text_with_superscript(img: Image.Image, xy, text: str, font, small_font, fill):
    """Draw ``text`` treating '²' as a raised small '2' (the default font lacks the glyph)."""
    draw = ImageDraw.Draw(img)
    x, y = xy
    for i, part in enumerate(text.split("²")):
        if i:
            draw.text((x, y - 3), "2", font=small_font, fill=fill)
            x += draw.textlength("2", font=small_font)
        draw.text((x, y), part, font=font, fill=fill)
        x += draw.textlength(part, font=font)
    return x - xy[0]


def _text_width(text: str, font, small_font) -> float:
    probe = ImageDraw.Draw(Image.new("RGB", (1, 1)))
    parts = text.split("²")
    width = sum(probe.textlength(p, font=font) for p in parts)
    return width + (len(parts) - 1) * probe.textlength("2", font=small_font)


def marker_positions(window: PredictionWindow, style: ChartStyle) -> list[tuple[int, int]]:
    visits = window.observed_visits
    y0, y1, _ = y_axis_range([v.egfr for v in visits], style.y_ticks)
    first = visits[0].date.toordinal()
    span_days = visits[-1].date.toordinal() - first
    points = []
    for v in visits:
        fx = (v.date.toordinal() - first) / span_days if span_days else 0.5
        fy = (v.egfr - y0) / (y1 - y0)
        px = style.margin_left + round(fx * style.plot_width)
        py = style.margin_top + round((1 - fy) * style.plot_height)
        points.append((px, py))
    return points


def _date_label_indices(points, label_width: float, n: int) -> list[int]:
    """Visit indices whose date labels fit without overlapping; first and last always kept."""
    keep = [0]
    for i in range(1, n):
        if points[i][0] - points[keep[-1]][0] >= label_width + 6:
            keep.append(i)
    if n > 1 and keep[-1] != n - 1:
        if points[n - 1][0] - points[keep[-1]][0] < label_width + 6 and len(keep) > 1:
            keep.pop()
        keep.append(n - 1)
    return keep


def render_trajectory(window: PredictionWindow, style: ChartStyle | None = None) -> ChartImage:
    """Rasterize the observed visits of ``window`` as a dated line chart."""
    style = style or ChartStyle()
    visits = window.observed_visits
    if len(visits) < 2:
        raise RenderError(f"window {window.window_id} has {len(visits)} point(s); a line chart needs 2")

    font = _font(style.font_size)
    small = _font(max(style.font_size - 4, 6))
    img = Image.new("RGB", (style.width, style.height), style.background)
    draw = ImageDraw.Draw(img)

    left, top = style.margin_left, style.margin_top
    right, bottom = left + style.plot_width, top + style.plot_height

    y0, y1, step = y_axis_range([v.egfr for v in visits], style.y_ticks)
    n_steps = round((y1 - y0) / step)
    for k in range(n_steps + 1):
        value = y0 + k * step
        py = top + round((1 - (value - y0) / (y1 - y0)) * style.plot_height)
        draw.line([(left, py), (right, py)], fill=style.grid_color, width=1)
        draw.line([(left - 5, py), (left, py)], fill=style.axis_color, width=1)
        label = f"{value:g}"
        tw = draw.textlength(label, font=font)
        draw.text((left - 8 - tw, py - style.font_size // 2 - 1), label, font=font, fill=style.axis_color)

    points = marker_positions(window, style)
    label_w = draw.textlength("0000-00-00", font=font)
    for i in _date_label_indices(points, label_w, len(points)):
        px = points[i][0]
        draw.line([(px, bottom), (px, bottom + 5)], fill=style.axis_color, width=1)
        label = visits[i].date.isoformat()
        tw = draw.textlength(label, font=font)
        lx = min(max(px - tw / 2, 0), style.width - tw)
        draw.text((lx, bottom + 8), label, font=font, fill=style.axis_color)

    draw.line([(left, top), (left, bottom), (right, bottom)], fill=style.axis_color, width=1)

    tw = draw.textlength(X_LABEL, font=font)
    draw.text(((left + right - tw) / 2, bottom + 34), X_LABEL, font=font, fill=style.axis_color)
    if style.title:
        tw = draw.textlength(style.title, font=font)
        draw.text(((left + right - tw) / 2, top - 28), style.title, font=font, fill=style.axis_color)

    # Rotated y-axis label, drawn on its own strip.
    lw = int(math.ceil(_text_width(Y_LABEL, font, small))) + 4
    strip = Image.new("RGB", (lw, style.font_size + 8), style.background)
    _draw_text_with_superscript(strip, (2, 4), Y_LABEL, font, small, style.axis_color)
    strip = strip.transpose(Image.Transpose.ROTATE_90)
    img.paste(strip, (8, max((top + bottom - strip.height) // 2, 0)))

    draw.line(points, fill=style.line_color, width=style.line_width)
    r = style.marker_size
    for px, py in points:
        draw.ellipse([px - r, py - r, px + r, py + r], fill=style.marker_color)

    return ChartImage(
        width=style.width,
        height=style.height,
        pixels=img.tobytes(),
        window_id=window.window_id,
        markers=tuple(points),
    )


def chart_filename(window_id: str) -> str:
    patient, m = window_id.rsplit("#", 1)
    return f"{patient}_{m}.png"


def export_chart(image: ChartImage, path: str | Path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"cannot write chart: directory does not exist: {path.parent}")
    try:
        path.write_bytes(image.png_bytes())
    except OSError as exc:
        raise OSError(f"cannot write chart to {path}: {exc}") from exc
    return path


def load_chart(path: str | Path, window_id: str = "") -> ChartImage:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return ChartImage(width=rgb.width, height=rgb.height, pixels=rgb.tobytes(), window_id=window_id)
