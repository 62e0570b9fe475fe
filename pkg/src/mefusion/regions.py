"""Facial geometry: landmark files, action-unit boxes, cropping and patch tiling.

Landmark files hold 68 lines of ``x y`` in pixel units (iBUG order). Boxes
are ``(x0, y0, x1, y1)`` in continuous pixel coordinates, where pixel ``j``
covers ``[j - 0.5, j + 0.5)``; a box of the whole ``w``-wide image therefore
spans ``[-0.5, w - 0.5]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import yaml

from .core import Tensor, UsageError
from .core import functional as F

NUM_LANDMARKS = 68

# iBUG-68 horizontal flip correspondence
MIRROR_INDEX = np.array(
    list(range(16, -1, -1))
    + list(range(26, 16, -1))
    + [27, 28, 29, 30, 35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


class ParseError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def mirrored(self, image_width: int) -> "Box":
        """Reflection under ``x -> image_width - 1 - x``."""
        m = image_width - 1
        return Box(m - self.x1, self.y0, m - self.x0, self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class LandmarkSet:
    points: np.ndarray  # (68, 2) as (x, y)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (NUM_LANDMARKS, 2):
            raise ParseError(f"expected {NUM_LANDMARKS} (x, y) landmarks, got shape {self.points.shape}")

    def check_bounds(self, width: int, height: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if x.min() < 0 or y.min() < 0 or x.max() > width - 1 or y.max() > height - 1:
            raise GeometryError(f"landmarks fall outside the {width}x{height} image")

    def mirrored(self, image_width: int) -> "LandmarkSet":
        pts = self.points[MIRROR_INDEX].copy()
        pts[:, 0] = image_width - 1 - pts[:, 0]
        return LandmarkSet(pts)

    def shifted(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]))


def load_landmarks(path, image_size: Tuple[int, int] = None) -> LandmarkSet:
    """Parse a landmark file; ``image_size`` is (width, height) for the bounds check."""
    lines = [ln for ln in Path(path).read_text().splitlines()]
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != NUM_LANDMARKS:
        raise ParseError(f"{path}: expected {NUM_LANDMARKS} landmark lines, found {len(lines)}")
    pts = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        try:
            pts.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    lm = LandmarkSet(np.array(pts))
    if not np.all(np.isfinite(lm.points)):
        raise ParseError(f"{path}: non-finite coordinate")
    if image_size is not None:
        lm.check_bounds(*image_size)
    return lm


def save_landmarks(path, landmarks: LandmarkSet) -> None:
    # repr-precision floats so the file round-trips exactly
    Path(path).write_text("".join(f"{x!r} {y!r}\n" for x, y in landmarks.points.tolist()))


# ------------------------------------------------------------------ geometry
@dataclass
class RegionSpec:
    name: str
    anchors: List[int]


@dataclass
class AuGeometry:
    regions: List[RegionSpec]
    padding: float = 0.15
    square: bool = True
    face_padding: float = 0.15
    mirror_pairs: List[Tuple[str, str]] = None

    @property
    def names(self) -> List[str]:
        return [r.name for r in self.regions]

    @classmethod
    def from_dict(cls, data: dict) -> "AuGeometry":
        try:
            regions = [RegionSpec(str(r["name"]), [int(i) for i in r["anchors"]]) for r in data["regions"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed geometry config: {exc}") from None
        for r in regions:
            bad = [i for i in r.anchors if not 0 <= i < NUM_LANDMARKS]
            if bad or not r.anchors:
                raise ParseError(f"region {r.name}: anchors must be non-empty indices in [0, 67], bad={bad}")
        return cls(
            regions=regions,
            padding=float(data.get("padding", 0.15)),
            square=bool(data.get("square", True)),
            face_padding=float(data.get("full_face", {}).get("padding", 0.15)),
            mirror_pairs=[tuple(p) for p in data.get("mirror_pairs", [])],
        )

    @classmethod
    def load(cls, path) -> "AuGeometry":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def default_geometry() -> AuGeometry:
    text = resources.files("mefusion").joinpath("data/au_geometry.yaml").read_text()
    return AuGeometry.from_dict(yaml.safe_load(text))


@dataclass
class AuRegionSet:
    boxes: List[Box]
    names: List[str]
    full_face: Box
    size: int = 90

    def __len__(self) -> int:
        return len(self.boxes)

    def all_boxes(self) -> List[Box]:
        """The K region boxes followed by the full-face box."""
        return list(self.boxes) + [self.full_face]

    def box(self, name: str) -> Box:
        return self.boxes[self.names.index(name)]


def padded_box(points: np.ndarray, padding: float, square: bool = True) -> Box:
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w * h <= 0:
        raise GeometryError(f"anchor set spans a zero-area box ({w:.3g} x {h:.3g})")
    x0, x1 = x0 - padding * w, x1 + padding * w
    y0, y1 = y0 - padding * h, y1 + padding * h
    if square:
        side = max(x1 - x0, y1 - y0)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x0, x1, y0, y1 = cx - side / 2, cx + side / 2, cy - side / 2, cy + side / 2
    return Box(float(x0), float(y0), float(x1), float(y1))


def compute_au_boxes(landmarks: LandmarkSet, geometry: AuGeometry = None, size: int = 90) -> AuRegionSet:
    geometry = geometry or default_geometry()
    boxes = []
    for region in geometry.regions:
        try:
            boxes.append(padded_box(landmarks.points[region.anchors], geometry.padding, geometry.square))
        except GeometryError as exc:
            raise GeometryError(f"region {region.name}: {exc}") from None
    face = padded_box(landmarks.points, geometry.face_padding, square=True)
    return AuRegionSet(boxes, geometry.names, face, size)


def grid_boxes(landmarks: LandmarkSet, size: int = 90, face_padding: float = 0.15, rows: int = 3,
               cols: int = 3) -> AuRegionSet:
    """Uniform ``rows`` x ``cols`` tiling of the face box, as an alternative to AU boxes."""
    face = padded_box(landmarks.points, face_padding, square=True)
    bw, bh = face.width / cols, face.height / rows
    boxes = [Box(face.x0 + c * bw, face.y0 + r * bh, face.x0 + (c + 1) * bw, face.y0 + (r + 1) * bh)
             for r in range(rows) for c in range(cols)]
    names = [f"grid{r}{c}" for r in range(rows) for c in range(cols)]
    return AuRegionSet(boxes, names, face, size)


# --------------------------------------------------------------- cropping
def crop_grid(box: Box, size: int, image_shape: Tuple[int, int] = None) -> np.ndarray:
    """(size, size, 2) source coordinates sampling ``box`` at ``size`` x ``size``.

    Output pixel ``j`` takes its value from ``x0 + (j + 0.5) * width / size``
    in box coordinates, i.e. pixel centres map to pixel centres.
    """
    if image_shape is not None:
        h, w = image_shape
        if box.x1 <= -0.5 or box.y1 <= -0.5 or box.x0 >= w - 0.5 or box.y0 >= h - 0.5:
            raise GeometryError(f"box {box.as_tuple()} does not intersect the {w}x{h} image")
    if box.width <= 0 or box.height <= 0:
        raise GeometryError(f"box {box.as_tuple()} has no area")
    j = np.arange(size) + 0.5
    sx = box.x0 + j * box.width / size
    sy = box.y0 + j * box.height / size
    gx, gy = np.meshgrid(sx, sy)
    return np.stack([gx, gy], axis=-1)


def displacement_scale(box: Box, size: int) -> np.ndarray:
    """Per-axis factor converting source-pixel shifts to crop-pixel shifts."""
    return np.array([size / box.width, size / box.height])


def crop_resize(stack, box: Box, size: int, displacement_channels: Sequence[int] = ()):
    """Bilinearly crop ``box`` out of an (M, h, w) stack and resize it to (M, size, size).

    ``displacement_channels`` names the (x, y) channel pair holding a pixel
    field; those values are rescaled by the resize ratio so they stay in
    output-pixel units. Accepts an ndarray or a Tensor and returns the same.
    """
    is_tensor = isinstance(stack, Tensor)
    x = stack if is_tensor else Tensor(np.asarray(stack, dtype=np.float64), dtype=np.float64)
    if x.ndim != 3:
        raise UsageError(f"crop_resize expects an (M, h, w) stack, got shape {x.shape}")
    m, h, w = x.shape
    grid = crop_grid(box, size, (h, w)).astype(x.dtype)
    out = F.grid_sample(x.reshape(1, m, h, w), Tensor(grid[None]))[0]
    if len(displacement_channels):
        if len(displacement_channels) != 2:
            raise UsageError("displacement_channels must name the (x, y) pair")
        scale = np.ones((m, 1, 1), dtype=x.dtype)
        scale[list(displacement_channels), 0, 0] = displacement_scale(box, size)
        out = out * Tensor(scale)
    return out if is_tensor else out.data


# ---------------------------------------------------------------- patching
ArrayLike = Union[np.ndarray, Tensor]


def patchify(region: ArrayLike, patch: int = 18) -> ArrayLike:
    """Row-major tiling of (..., M, H, W) into (..., N, M, P, P), N = HW / P^2."""
    *lead, m, h, w = region.shape
    if h % patch or w % patch:
        raise UsageError(f"region {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    k = len(lead)
    x = region.reshape(*lead, m, gh, patch, gw, patch)
    axes = tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4)
    return x.transpose(axes).reshape(*lead, gh * gw, m, patch, patch)


def unpatchify(patches: ArrayLike, height: int, width: int) -> ArrayLike:
    """Inverse of :func:`patchify`."""
    *lead, n, m, p, _ = patches.shape
    gh, gw = height // p, width // p
    if gh * gw != n or gh * p != height or gw * p != width:
        raise UsageError(f"{n} patches of {p}x{p} cannot tile {height}x{width}")
    k = len(lead)
    x = patches.reshape(*lead, gh, gw, m, p, p)
    axes = tuple(range(k)) + (k + 2, k, k + 3, k + 1, k + 4)
    return x.transpose(axes).reshape(*lead, m, height, width)
