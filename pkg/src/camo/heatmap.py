"""Attention-score heatmaps blended over an image, written as binary PPM."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class HeatmapError(ValueError):
    pass


@dataclass
class HeatmapSpec:
    scores: np.ndarray  # [h, G, G] non-negative attention scores
    image: np.ndarray  # [H, W, 3] uint8 RGB
    blend: float = 0.3
    colormap: str = "jet"


def jet(x: np.ndarray) -> np.ndarray:
    """Standard piecewise-linear jet map on [0, 1] -> RGB floats in [0, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)[..., None]
    centers = np.array([3.0, 2.0, 1.0])  # red, green, blue
    return np.clip(1.5 - np.abs(4.0 * x - centers), 0.0, 1.0)


COLORMAPS = {"jet": jet}


def _axis_weights(n_out: int, n_in: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel-centre alignment and edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    y0, y1, fy = _axis_weights(height, grid.shape[0])
    x0, x1, fx = _axis_weights(width, grid.shape[1])
    rows = grid[y0] * (1 - fy)[:, None] + grid[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def render_attention_map(spec: HeatmapSpec) -> np.ndarray:
    """Mean over heads, max-normalise, upsample, colour-map, blend.

    Output pixel = round(blend * 255 * cmap(v) + (1 - blend) * image).
    """
    scores = np.asarray(spec.scores, dtype=np.float64)
    image = np.asarray(spec.image)
    if scores.ndim != 3 or min(scores.shape) < 1:
        raise HeatmapError(f"scores must be [h, G, G], got {scores.shape}")
    if (scores < 0).any() or not np.isfinite(scores).all():
        raise HeatmapError("scores must be finite and non-negative")
    if image.ndim != 3 or image.shape[2] != 3:
        raise HeatmapError(f"image must be [H, W, 3], got {image.shape}")
    if not 0.0 <= spec.blend <= 1.0:
        raise HeatmapError("blend weight must lie in [0, 1]")
    cmap = COLORMAPS.get(spec.colormap)
    if cmap is None:
        raise HeatmapError(f"unknown colormap {spec.colormap!r}")
    grid = scores.mean(axis=0)
    peak = grid.max()
    if peak <= 0:
        raise HeatmapError("all-zero attention scores cannot be max-normalised")
    grid = grid / peak
    up = bilinear_resize(grid, image.shape[0], image.shape[1])
    heat = 255.0 * cmap(up)
    out = _round_half_up(spec.blend * heat + (1.0 - spec.blend) * image.astype(np.float64))
    return np.clip(out, 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM into ``[H, W, 3]`` uint8."""
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeatmapError("truncated PPM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise HeatmapError("only binary P6 PPM with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    data = buf[pos + 1 : pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise HeatmapError("truncated PPM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def grid_scores(step_attention: np.ndarray) -> np.ndarray:
    """Reshape one decoding step's ``[h, T]`` weights to ``[h, G, G]``."""
    h, t = step_attention.shape
    g = int(round(np.sqrt(t)))
    if g * g != t:
        raise HeatmapError(f"{t} visual positions do not form a square grid")
    return step_attention.reshape(h, g, g)
