"""SVG figures for --plot: line charts and Wigner-field heatmaps."""
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from reportlab.graphics import renderSVG
from reportlab.graphics.charts.legends import Legend
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, Image as DrawingImage, String
from reportlab.lib import colors

logger = logging.getLogger(__name__)

PALETTE = [
    colors.HexColor("#1f77b4"),
    colors.HexColor("#d62728"),
    colors.HexColor("#2ca02c"),
    colors.HexColor("#ff7f0e"),
    colors.HexColor("#9467bd"),
    colors.HexColor("#8c564b"),
    colors.HexColor("#17becf"),
]

CHART_SIZE = (520, 340)
MARGINS = {"left": 70, "bottom": 50, "right": 130, "top": 40}


def _frame(width: float, height: float, title: str, xlabel: str, ylabel: str) -> Drawing:
    drawing = Drawing(width, height)
    drawing.add(String(width / 2, height - 22, title, textAnchor="middle", fontSize=12))
    drawing.add(String(MARGINS["left"] + (width - MARGINS["left"] - MARGINS["right"]) / 2, 12, xlabel, textAnchor="middle", fontSize=9))
    drawing.add(String(8, height / 2, ylabel, fontSize=9))
    return drawing


def line_chart(path, series: dict, title: str, xlabel: str, ylabel: str) -> Path | None:
    """One line per entry of ``series`` (name -> (xs, ys)); non-finite points are dropped."""
    data, names = [], []
    for name, (xs, ys) in series.items():
        points = [(float(x), float(y)) for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)]
        if points:
            data.append(points)
            names.append(name)
    if not data:
        logger.warning("nothing to plot for %s", path)
        return None

    width, height = CHART_SIZE
    drawing = _frame(width, height, title, xlabel, ylabel)
    plot = LinePlot()
    plot.x, plot.y = MARGINS["left"], MARGINS["bottom"]
    plot.width = width - MARGINS["left"] - MARGINS["right"]
    plot.height = height - MARGINS["bottom"] - MARGINS["top"]
    plot.data = data
    for i in range(len(data)):
        plot.lines[i].strokeColor = PALETTE[i % len(PALETTE)]
        plot.lines[i].strokeWidth = 1.2
    plot.xValueAxis.labels.fontSize = 8
    plot.yValueAxis.labels.fontSize = 8
    drawing.add(plot)

    legend = Legend()
    legend.x, legend.y = width - MARGINS["right"] + 12, height - MARGINS["top"]
    legend.fontSize = 8
    legend.colorNamePairs = [(PALETTE[i % len(PALETTE)], name) for i, name in enumerate(names)]
    drawing.add(legend)

    path = Path(path)
    renderSVG.drawToFile(drawing, str(path))
    logger.debug("plot written to %s", path)
    return path


def _diverging(values: np.ndarray) -> np.ndarray:
    """Blue for negative, white at zero, red for positive."""
    scale = float(np.max(np.abs(values))) or 1.0
    t = np.clip(values / scale, -1.0, 1.0)
    red = np.where(t < 0, 1.0 + t, 1.0)
    green = 1.0 - np.abs(t)
    blue = np.where(t > 0, 1.0 - t, 1.0)
    return (np.stack([red, green, blue], axis=-1) * 255).round().astype(np.uint8)


def heatmap(path, values: np.ndarray, x_nm: np.ndarray, k_per_nm: np.ndarray, title: str) -> Path:
    """f(x, k) as a raster, x to the right and k upward, embedded in an SVG."""
    width, height = CHART_SIZE
    drawing = _frame(width, height, title, "x (nm)", "k (1/nm)")
    plot_w = width - MARGINS["left"] - MARGINS["right"]
    plot_h = height - MARGINS["bottom"] - MARGINS["top"]

    raster = Image.fromarray(_diverging(np.asarray(values).T[::-1]))
    raster = raster.resize((int(plot_w), int(plot_h)), Image.Resampling.NEAREST)
    drawing.add(DrawingImage(MARGINS["left"], MARGINS["bottom"], plot_w, plot_h, raster))

    right = MARGINS["left"] + plot_w
    drawing.add(String(MARGINS["left"], MARGINS["bottom"] - 12, f"{x_nm[0]:.1f}", fontSize=8))
    drawing.add(String(right, MARGINS["bottom"] - 12, f"{x_nm[-1]:.1f}", textAnchor="end", fontSize=8))
    drawing.add(String(MARGINS["left"] - 4, MARGINS["bottom"], f"{k_per_nm[0]:.2f}", textAnchor="end", fontSize=8))
    drawing.add(String(MARGINS["left"] - 4, MARGINS["bottom"] + plot_h - 8, f"{k_per_nm[-1]:.2f}", textAnchor="end", fontSize=8))
    drawing.add(String(right + 10, height / 2, f"max |f| = {np.max(np.abs(values)):.3g}", fontSize=8))

    path = Path(path)
    renderSVG.drawToFile(drawing, str(path))
    logger.debug("heatmap written to %s", path)
    return path
