"""Ground-truth density maps from dot annotations.

A density map is a 2-D non-negative float array (persons per pixel) whose
total mass equals the crowd count. Each annotated head contributes one
discretized isotropic 2-D Gaussian of scale ``sigma``, evaluated at pixel
centers relative to the real-valued head position and truncated to a window
of half-width ``ceil(3*sigma)`` around the nearest pixel. With
``renormalize_truncated`` (the default) every kernel's discrete mass is
rescaled to exactly 1 before summation, so border heads still count as one
person each.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, DataError

DMAP_MAGIC = b"DMAP"


@dataclass
class GroundTruthConfig:
    """Gaussian scale and border handling for density-map generation."""

    sigma: float
    renormalize_truncated: bool = True

    def validate(self):
        if not (self.sigma > 0):
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


def _as_points(heads) -> np.ndarray:
    pts = np.asarray(heads, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"head annotations must be an (N, 2) list of (x, y), got shape {pts.shape}")
    return pts


def validate_heads(image_size, heads) -> np.ndarray:
    """Check every (x, y) head lies inside [0, w) x [0, h); returns (N, 2) array."""
    h, w = image_size
    pts = _as_points(heads)
    for x, y in pts:
        if not (0 <= x < w and 0 <= y < h):
            raise InputError(f"head ({x}, {y}) outside image bounds {w}x{h} (w x h)")
    return pts


def generate_density_map(image_size, heads, cfg: GroundTruthConfig) -> np.ndarray:
    """Sum one truncated Gaussian kernel per head into an (h, w) float map.

    Kernel centers use the exact real-valued head position; only the window
    placement is snapped to the nearest pixel.
    """
    cfg.validate()
    h, w = int(image_size[0]), int(image_size[1])
    if h <= 0 or w <= 0:
        raise InputError(f"image size must be positive, got {image_size}")
    pts = validate_heads((h, w), heads)

    grid = np.zeros((h, w), dtype=np.float64)
    sigma = float(cfg.sigma)
    radius = math.ceil(3 * sigma)
    norm = 1.0 / (2.0 * math.pi * sigma * sigma)
    for x, y in pts:
        cx, cy = int(round(x)), int(round(y))
        x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
        y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
        dx = np.arange(x0, x1, dtype=np.float64) - x
        dy = np.arange(y0, y1, dtype=np.float64) - y
        kernel = norm * np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma * sigma))
        if cfg.renormalize_truncated:
            kernel /= kernel.sum()
        grid[y0:y1, x0:x1] += kernel
    return grid


def count_from_density(density: np.ndarray) -> float:
    """Total mass of the map; the crowd count it encodes."""
    return float(np.asarray(density).sum())


def downsample_density(density: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum pooling by ``factor``; total mass is preserved."""
    density = np.asarray(density)
    if factor < 1:
        raise InputError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return density.copy()
    h, w = density.shape
    if h % factor or w % factor:
        raise InputError(f"factor {factor} does not divide map dims {h}x{w}")
    return density.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def write_dmap(path, density: np.ndarray):
    """Write the binary density-map format: b"DMAP", u32le h, u32le w, f32le row-major."""
    density = np.asarray(density)
    if density.ndim != 2:
        raise InputError(f"density map must be 2-D, got shape {density.shape}")
    h, w = density.shape
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(density, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    """Read the binary density-map format written by :func:`write_dmap`."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DMAP_MAGIC:
        raise DataError(f"{path}: bad magic bytes, not a DMAP file")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated DMAP header")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise DataError(f"{path}: truncated DMAP payload ({len(blob)} bytes, expected {expected})")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(h, w).copy()
