"""Image primitives: rotation, border-free crop, resizing, procedural scenes.

All images are 2-D float arrays (H, W) with pixel values in [0, 1].
Positive angles rotate the content counter-clockwise as displayed
(row index growing downwards).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64
SCENE_SIZE = 96


def _center(n: int) -> float:
    return (n - 1) / 2.0


def _rotation_coords(rows: np.ndarray, cols: np.ndarray, angle: float, center: tuple[float, float]):
    """Map output pixel positions back to source positions for a rotation by `angle` degrees."""
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = center
    y = rows - cy
    x = cols - cx
    # inverse of a counter-clockwise display rotation (y axis points down)
    src_x = c * x - s * y
    src_y = s * x + c * y
    return src_y + cy, src_x + cx


def _snap(coords: np.ndarray, upper: float, tol: float = 1e-9) -> np.ndarray:
    out = np.where(np.abs(coords) < tol, 0.0, coords)
    return np.where(np.abs(out - upper) < tol, upper, out)


def rotate_image(image: np.ndarray, angle: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image center with bilinear interpolation; uncovered pixels get `fill`."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = _rotation_coords(rows, cols, angle, (_center(h), _center(w)))
    # trig round-off (sin(2*pi) != 0) must not push edge pixels into the fill region
    sy = _snap(sy, h - 1)
    sx = _snap(sx, w - 1)
    out = ndimage.map_coordinates(image, [sy, sx], order=1, mode="constant", cval=fill)
    return out


def inscribed_half_width(size: int, angle: float) -> float:
    """Half side of the largest axis-aligned square inside a `size` square rotated by `angle`.

    Measured in pixel-center units so that every bilinear sample stays strictly
    inside the source grid.
    """
    theta = np.deg2rad(angle)
    return _center(size) / (abs(np.cos(theta)) + abs(np.sin(theta)))


def rotation_sample_grid(size: int, angle: float, out_size: int = IMAGE_SIZE):
    """Source coordinates sampled by `rotate_augment` (rotate, border-free crop, resize)."""
    half = inscribed_half_width(size, angle)
    # output pixel centers spread evenly over the crop [-half, half]
    offsets = -half + (np.arange(out_size) + 0.5) * (2.0 * half / out_size)
    c = _center(size)
    rows, cols = np.meshgrid(offsets + c, offsets + c, indexing="ij")
    return _rotation_coords(rows, cols, angle, (c, c))


def rotate_augment(image: np.ndarray, angle: float, out_size: int = IMAGE_SIZE) -> tuple[np.ndarray, float]:
    """Rotate a square image, crop the largest fill-free square and resize to `out_size`.

    Rotation, crop and resize are composed into one bilinear resampling, so
    the output never contains border fill. Returns ``(image, angle)``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h != w:
        raise ValueError(f"rotate_augment expects a square image, got {h}x{w}")
    sy, sx = rotation_sample_grid(h, angle, out_size)
    out = ndimage.map_coordinates(image, [sy, sx], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32), float(angle)


def resize(image: np.ndarray, out_size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of a 2-D image to out_size x out_size."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (out_size, out_size):
        return image.astype(np.float32)
    ry = (np.arange(out_size) + 0.5) * h / out_size - 0.5
    rx = (np.arange(out_size) + 0.5) * w / out_size - 0.5
    rows, cols = np.meshgrid(ry, rx, indexing="ij")
    out = ndimage.map_coordinates(image, [rows, cols], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W) or (H, W, 3) raster to float grayscale in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ np.array([0.299, 0.587, 0.114])
    if np.asarray(pixels).dtype == np.uint8:
        arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0)


# -- procedural scenes -------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    field -= field.min()
    return field / max(field.max(), 1e-12)


def _paint_rect(canvas, cy, cx, h, w, angle, value):
    size = canvas.shape[0]
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(angle)
    dy, dx = rows - cy, cols - cx
    u = np.cos(theta) * dx - np.sin(theta) * dy
    v = np.sin(theta) * dx + np.cos(theta) * dy
    mask = (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    canvas[mask] = value
    return mask


def render_scene(rng: np.random.Generator, size: int = SCENE_SIZE, with_object: bool = True,
                 layout: dict | None = None) -> tuple[np.ndarray, dict]:
    """Draw a textured ground with a road, buildings and (optionally) a tracked object.

    `layout` pins the random choices so a scene can be redrawn exactly (with
    or without its object); the layout used is returned alongside the image.
    """
    if layout is None:
        layout = {
            "texture_seed": int(rng.integers(2**31)),
            "road_angle": float(rng.uniform(-20.0, 20.0)),
            "road_offset": float(rng.uniform(-0.15, 0.15) * size),
            "road_width": float(rng.uniform(0.16, 0.26) * size),
            "road_value": float(rng.uniform(0.05, 0.25)),
            "ground_bias": float(rng.uniform(0.45, 0.7)),
            "buildings": [
                (float(rng.uniform(0.1, 0.9) * size), float(rng.uniform(0.1, 0.9) * size),
                 float(rng.uniform(0.08, 0.2) * size), float(rng.uniform(0.08, 0.2) * size),
                 float(rng.uniform(-15, 15)), float(rng.uniform(0.3, 1.0)))
                for _ in range(int(rng.integers(2, 5)))
            ],
            "object": (float(rng.uniform(-0.15, 0.15) * size), float(rng.uniform(0.06, 0.1) * size),
                       float(rng.uniform(0.12, 0.18) * size), float(rng.uniform(0.85, 1.0))),
        }
    trng = np.random.default_rng(layout["texture_seed"])
    canvas = layout["ground_bias"] * 0.7 + 0.3 * _smooth_noise(trng, size, size / 16)
    for cy, cx, h, w, ang, val in layout["buildings"]:
        _paint_rect(canvas, cy, cx, h, w, ang, val)

    c = _center(size)
    theta = np.deg2rad(layout["road_angle"])
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    # signed distance across the road and position along it
    across = -np.sin(theta) * (cols - c) + np.cos(theta) * (rows - c) - layout["road_offset"]
    along = np.cos(theta) * (cols - c) + np.sin(theta) * (rows - c)
    half = layout["road_width"] / 2
    road = np.abs(across) <= half
    canvas[road] = layout["road_value"]
    dashes = (np.abs(across) <= max(1.0, size / 96)) & ((along % (size / 6)) < size / 10)
    canvas[dashes] = 0.95
    edges = road & (np.abs(np.abs(across) - half) < max(1.0, size / 96))
    canvas[edges] = 0.85

    if with_object:
        along_pos, h, w, val = layout["object"]
        oy = c + np.sin(theta) * along_pos + np.cos(theta) * (layout["road_offset"] + half / 2)
        ox = c + np.cos(theta) * along_pos - np.sin(theta) * (layout["road_offset"] + half / 2)
        _paint_rect(canvas, oy, ox, h, w, layout["road_angle"], val)
        _paint_rect(canvas, oy + 0.25 * w * np.sin(theta), ox + 0.25 * w * np.cos(theta), h * 0.7, w * 0.2,
                    layout["road_angle"], 0.1)
    return np.clip(canvas, 0.0, 1.0), layout
