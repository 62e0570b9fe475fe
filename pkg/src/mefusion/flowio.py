"""Displacement-field files and colour-wheel rendering.

Raw field file layout (little-endian)::

    uint32 height, uint32 width, uint32 channels
    float32 values[height][width][channels]     # channel 0 = x-shift, 1 = y-shift

Single-channel files hold substitute dynamic features (e.g. a dynamic image).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


class FieldFormatError(ValueError):
    """A field file whose header and size disagree."""


def write_field(path, field: np.ndarray) -> None:
    """Write an (h, w) or (h, w, c) array."""
    field = np.asarray(field, dtype="<f4")
    if field.ndim == 2:
        field = field[..., None]
    h, w, c = field.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(field).tobytes())


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FieldFormatError(f"{path}: truncated field header")
    h, w, c = struct.unpack_from("<III", data, 0)
    expected = 12 + 4 * h * w * c
    if len(data) != expected:
        raise FieldFormatError(f"{path}: expected {expected} bytes for {h}x{w}x{c} field, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, c).astype(np.float32)


def _make_colorwheel() -> np.ndarray:
    # Middlebury optical-flow colour wheel (Baker et al. 2007)
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


COLORWHEEL = _make_colorwheel()


def flow_to_color(field: np.ndarray, max_radius=None) -> np.ndarray:
    """Map an (h, w, 2) field to an (h, w, 3) uint8 image.

    Hue encodes direction, saturation encodes magnitude relative to
    ``max_radius`` (defaults to the field's largest magnitude). Zero motion is
    white.
    """
    u = field[..., 0].astype(np.float64)
    v = field[..., 1].astype(np.float64)
    rad = np.sqrt(u * u + v * v)
    if max_radius is None:
        max_radius = rad.max()
    scale = max(float(max_radius), 1e-12)
    u, v, rad = u / scale, v / scale, rad / scale

    ncols = COLORWHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.empty(u.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        col = (1 - f) * COLORWHEEL[k0, ch] / 255.0 + f * COLORWHEEL[k1, ch] / 255.0
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., ch] = np.floor(255 * col)
    return img


def save_flow_png(path, field: np.ndarray, max_radius=None) -> None:
    Image.fromarray(flow_to_color(field, max_radius)).save(path)
