"""Static map rendering: 8-bit PGM always, PNG when Pillow is installed."""

from __future__ import annotations

import io as _io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .io import atomic_write_bytes
from .raster import Grid


@dataclass(frozen=True)
class ColorRamp:
    """Piecewise-linear colour ramp over [0, 1]."""

    stops: tuple[tuple[float, tuple[int, int, int]], ...]
    nodata_color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        stops = tuple((float(v), tuple(int(c) for c in rgb)) for v, rgb in self.stops)
        object.__setattr__(self, "stops", stops)
        object.__setattr__(self, "nodata_color", tuple(int(c) for c in self.nodata_color))
        values = [v for v, _ in stops]
        if len(stops) < 2 or values[0] != 0.0 or values[-1] != 1.0:
            raise ConfigError("colour ramp needs at least two stops, starting at 0 and ending at 1")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("colour ramp stop values must be strictly increasing")
        for _, rgb in stops + ((None, self.nodata_color),):
            if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
                raise ConfigError(f"colour {rgb} is not an 8-bit RGB triple")

    @classmethod
    def from_config(cls, raw) -> "ColorRamp":
        try:
            return cls(tuple((s[0], tuple(s[1])) for s in raw["stops"]), tuple(raw.get("nodata", (0, 0, 0))))
        except (KeyError, TypeError, IndexError, ValueError):
            raise ConfigError("ramp must look like {'stops': [[0, [r, g, b]], ..., [1, [r, g, b]]]}") from None

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Map values in [0, 1] to an ``(..., 3)`` uint8 array."""
        xs = np.array([s for s, _ in self.stops])
        cols = np.array([c for _, c in self.stops], dtype=float)
        v = np.clip(v, 0.0, 1.0)
        rgb = np.stack([np.interp(v, xs, cols[:, k]) for k in range(3)], axis=-1)
        return np.floor(rgb + 0.5).astype(np.uint8)


GREEN_TO_RED = ColorRamp(((0.0, (26, 150, 65)), (0.5, (255, 255, 191)), (1.0, (215, 25, 28))), (255, 255, 255))


def quantize(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """North-up 8-bit image ``floor(255 v + 0.5)`` and nodata mask (255 = nodata)."""
    valid = grid.valid[::-1]
    v = np.clip(grid.values[::-1], 0.0, 1.0)
    img = np.where(valid, np.floor(255.0 * v + 0.5), 0).astype(np.uint8)
    mask = np.where(valid, 0, 255).astype(np.uint8)
    return img, mask


def _pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_pgm(path) -> np.ndarray:
    """Read a PGM written by :func:`render_map` (three newline-terminated header lines)."""
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(t) for t in dims.split())
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w)


def mask_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_mask" + path.suffix)


def render_map(grid: Grid, ramp: ColorRamp | None, path) -> list[Path]:
    """Render a [0, 1] grid; returns the written paths.

    ``.pgm`` writes grayscale plus a ``<stem>_mask.pgm`` sidecar marking
    nodata; ``.png`` writes an RGB image through ``ramp`` (Pillow needed).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        img, mask = quantize(grid)
        atomic_write_bytes(path, _pgm_bytes(img))
        atomic_write_bytes(mask_path(path), _pgm_bytes(mask))
        return [path, mask_path(path)]
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise ConfigError("PNG output needs Pillow; install greenprior[png] or use .pgm") from None
        ramp = ramp or GREEN_TO_RED
        valid = grid.valid[::-1]
        rgb = ramp.apply(grid.values[::-1])
        rgb[~valid] = ramp.nodata_color
        buf = _io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
        return [path]
    raise ConfigError(f"unsupported image format {path.suffix!r}; use .pgm or .png")
