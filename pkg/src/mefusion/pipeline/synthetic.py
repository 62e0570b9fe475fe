"""Procedural stand-in for micro-expression databases.

Each subject is a grayscale cartoon face (head ellipse, eyes, brows, nose,
mouth) with its own proportions, tones and skin texture. A sample is a short
sequence in which one class-specific deformation ramps up to an apex and
back:

* ``surprise``: both brows rise,
* ``positive``: the mouth corners lift and widen,
* ``negative``: the brows knit toward the midline and drop.

Frames are produced by backward-warping the onset image with a scaled
ground-truth field, so the emitted flow reconstructs the apex up to noise and
8-bit quantization. Several "domains" with shifted contrast, brightness and
noise can be mixed to mimic a composite-database protocol.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import yaml

from ..core import Tensor, UsageError
from ..dgm import warp
from ..regions import LandmarkSet
from .data import CLASSES, Dataset, Sample


@dataclass
class DomainSpec:
    name: str = "synthetic"
    contrast: float = 1.0
    brightness: float = 0.0
    noise: float = 0.003


@dataclass
class SyntheticSpec:
    subjects: int = 10
    samples_per_class: int = 6
    image_size: int = 128
    frames: int = 9
    magnitude: Tuple[float, float] = (1.5, 3.0)
    classes: Tuple[str, ...] = CLASSES
    domains: List[DomainSpec] = field(default_factory=lambda: [DomainSpec()])

    def __post_init__(self):
        self.magnitude = tuple(self.magnitude)
        self.classes = tuple(self.classes)
        self.domains = [d if isinstance(d, DomainSpec) else DomainSpec(**d) for d in self.domains]
        if self.subjects < 1 or self.samples_per_class < 1 or not self.classes:
            raise UsageError("synthetic spec needs at least one subject, class and sample per class")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise UsageError(f"no synthetic deformation for classes {sorted(unknown)}")
        if self.frames < 3:
            raise UsageError("sequences need at least 3 frames")
        if self.image_size < 64 or self.image_size % 16:
            raise UsageError("image_size must be a multiple of 16 and at least 64")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise UsageError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["magnitude"] = list(self.magnitude)
        d["classes"] = list(self.classes)
        return d


# ------------------------------------------------------------------- texture
def smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise, zero mean and unit variance."""
    x = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    g = np.exp(-2 * (np.pi * sigma) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    y = np.real(np.fft.ifft2(np.fft.fft2(x) * g))
    return (y - y.mean()) / y.std()


def texture(rng: np.random.Generator, size: int, fine: float = 0.3) -> np.ndarray:
    """Two-scale texture in [0, 1]; ``fine`` weights the small-scale component."""
    t = fine * smooth_noise(rng, size, 1.5) + smooth_noise(rng, size, 6.0)
    return (t - t.min()) / (t.max() - t.min())


def make_deformation_pair(rng: np.random.Generator, size: int, shift: Tuple[float, float], kind: str = "rigid"):
    """Textured onset and its warped apex under a known field.

    ``shift`` is the backward field value (x, y) in pixels. ``kind`` is
    ``"rigid"`` (the whole frame moves) or ``"bump"`` (a disc of radius
    ~0.22 * size moves, falling off smoothly to zero). Returns
    ``(onset, apex, field (2, H, W), mask)``; ``mask`` marks the region where
    the field equals ``shift`` and border clamping plays no part.
    """
    tex = texture(rng, size)
    if kind == "rigid":
        weight = np.ones((size, size))
        mask = np.zeros((size, size), bool)
        margin = int(np.ceil(max(abs(shift[0]), abs(shift[1])))) + 2
        mask[margin:-margin, margin:-margin] = True
    elif kind == "bump":
        yy, xx = np.mgrid[0:size, 0:size]
        r = np.hypot(xx - size / 2, yy - size / 2)
        weight = np.clip((0.32 * size - r) / (0.1 * size), 0, 1)
        mask = weight == 1
    else:
        raise UsageError(f"unknown deformation kind {kind!r}")
    d = np.stack([shift[0] * weight, shift[1] * weight])
    apex = warp(Tensor(tex[None, None]), Tensor(d[None])).data[0, 0]
    return tex, apex, d, mask


# -------------------------------------------------------------------- faces
@dataclass
class FaceParams:
    cx: float
    cy: float
    scale: float
    eye_dx: float
    eye_y: float
    brow_gap: float
    brow_arch: float
    mouth_w: float
    mouth_y: float
    skin: float
    background: float
    brow_tone: float
    lip_tone: float


def random_face(rng: np.random.Generator, size: int) -> FaceParams:
    s = size / 128.0
    return FaceParams(
        cx=size / 2 + rng.uniform(-2, 2) * s,
        cy=size / 2 + rng.uniform(0, 3) * s,
        scale=rng.uniform(0.93, 1.05) * s,
        eye_dx=rng.uniform(16, 20),
        eye_y=rng.uniform(-12, -8),
        brow_gap=rng.uniform(7, 10),
        brow_arch=rng.uniform(2, 4),
        mouth_w=rng.uniform(12, 16),
        mouth_y=rng.uniform(24, 28),
        skin=rng.uniform(0.55, 0.75),
        background=rng.uniform(0.12, 0.32),
        brow_tone=rng.uniform(0.08, 0.22),
        lip_tone=rng.uniform(0.3, 0.42),
    )


def _ellipse_points(cx, cy, a, b, angles):
    return np.stack([cx + a * np.cos(angles), cy + b * np.sin(angles)], axis=1)


def face_landmarks(p: FaceParams) -> np.ndarray:
    """The 68 iBUG landmarks implied by ``p``, (68, 2) as (x, y)."""
    k = p.scale

    def at(dx, dy):
        return np.stack([p.cx + k * np.asarray(dx, float), p.cy + k * np.asarray(dy, float)], axis=-1)

    pts = []
    # jaw: lower half of an ellipse from the left temple to the right
    ang = np.linspace(np.pi, 0, 17)
    pts.append(at(40 * np.cos(ang), -6 + 48 * np.sin(ang)))
    # brows, image-left then image-right, each from outer to inner end
    bx = np.linspace(-p.eye_dx - 12, -p.eye_dx + 10, 5)
    arch = -p.brow_arch * (1 - ((bx + p.eye_dx + 1) / 11) ** 2)
    by = p.eye_y - p.brow_gap + arch
    pts.append(at(bx, by))
    pts.append(at(-bx[::-1], by[::-1]))
    # nose bridge 27-30 and base 31-35
    pts.append(at(np.zeros(4), np.linspace(p.eye_y, 12, 4)))
    pts.append(at(np.linspace(-6, 6, 5), 15 - np.array([0, 1, 1.5, 1, 0])))
    # eyes: corner, two upper, corner, two lower
    eye_ang = np.array([np.pi, 4 * np.pi / 3, 5 * np.pi / 3, 0, np.pi / 3, 2 * np.pi / 3])
    left = _ellipse_points(-p.eye_dx, p.eye_y, 7, 3.5, eye_ang)
    right = left[[3, 2, 1, 0, 5, 4]] * np.array([-1.0, 1.0])  # mirror image, inner corner first
    pts.append(at(left[:, 0], left[:, 1]))
    pts.append(at(right[:, 0], right[:, 1]))
    # outer lip 48-59 (clockwise from the left corner), inner lip 60-67
    outer_ang = np.pi + np.arange(12) * np.pi / 6
    outer = _ellipse_points(0, p.mouth_y, p.mouth_w, 5, outer_ang)
    inner_ang = np.pi + np.arange(8) * np.pi / 4
    inner = _ellipse_points(0, p.mouth_y, p.mouth_w * 0.7, 1.5, inner_ang)
    pts.append(at(outer[:, 0], outer[:, 1]))
    pts.append(at(inner[:, 0], inner[:, 1]))
    return np.concatenate(pts, axis=0)


def _segment_distance(xx, yy, pts):
    """Distance from every pixel to the polyline through ``pts``."""
    best = np.full(xx.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / max(dx * dx + dy * dy, 1e-12), 0, 1)
        best = np.minimum(best, np.hypot(xx - x0 - t * dx, yy - y0 - t * dy))
    return best


def _soft(d):
    # coverage of a pixel by a shape at signed distance d (negative = inside)
    return np.clip(0.5 - d, 0.0, 1.0)


def render_face(p: FaceParams, lm: np.ndarray, tex: np.ndarray) -> np.ndarray:
    size = tex.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    k = p.scale
    img = np.full((size, size), p.background) + 0.06 * (tex - 0.5)

    head = np.hypot((xx - p.cx) / (42 * k), (yy - p.cy + 4 * k) / (54 * k))
    skin = p.skin + 0.3 * (tex - 0.5)
    img = img + _soft((head - 1) * 42 * k) * (skin - img)

    for c in (lm[36:42].mean(axis=0), lm[42:48].mean(axis=0)):
        r = np.hypot((xx - c[0]) / (7 * k), (yy - c[1]) / (3.5 * k))
        img = img + _soft((r - 1) * 3.5 * k) * (0.85 - img)
        iris = np.hypot(xx - c[0], yy - c[1])
        img = img + _soft(iris - 2.4 * k) * (0.12 - img)

    for brow in (lm[17:22], lm[22:27]):
        d = _segment_distance(xx, yy, brow)
        img = img + _soft(d - 1.8 * k) * (p.brow_tone - img)

    img = img + _soft(_segment_distance(xx, yy, lm[27:31]) - 0.7 * k) * 0.5 * (p.skin - 0.15 - img)
    img = img + _soft(_segment_distance(xx, yy, lm[31:36]) - 0.9 * k) * (p.skin - 0.22 - img)

    mc = lm[48:60].mean(axis=0)
    half_w = (lm[54, 0] - lm[48, 0]) / 2
    r = np.hypot((xx - mc[0]) / half_w, (yy - mc[1]) / (5 * k))
    img = img + _soft((r - 1) * 5 * k) * (p.lip_tone - img)
    img = img + _soft(_segment_distance(xx, yy, lm[60:65]) - 0.6 * k) * (0.08 - img)
    return np.clip(img, 0.0, 1.0)


def _bump(size, center, vector, sigma):
    yy, xx = np.mgrid[0:size, 0:size]
    w = np.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2 * sigma**2))
    return np.stack([vector[0] * w, vector[1] * w])


def _rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def class_field(label_name: str, lm: np.ndarray, size: int, magnitude: float, scale: float,
                rng: np.random.Generator) -> np.ndarray:
    """Backward field (2, H, W) for one expression.

    Vectors below are apparent motions; the stored field is their negation
    because ``apex(y, x) = onset(y + Dy, x + Dx)``.
    """
    sigma = 8.0 * scale
    jitter = rng.uniform(-0.25, 0.25)
    brow_l, brow_r = lm[17:22].mean(axis=0), lm[22:27].mean(axis=0)
    if label_name == "surprise":
        motions = [(brow_l, (0.0, -1.0)), (brow_r, (0.0, -1.0))]
    elif label_name == "negative":
        motions = [(brow_l, (0.8, 0.5)), (brow_r, (-0.8, 0.5))]
    elif label_name == "positive":
        motions = [(lm[48], (-0.4, -1.0)), (lm[54], (0.4, -1.0))]
    else:
        raise UsageError(f"no synthetic deformation for class {label_name!r}")
    d = np.zeros((2, size, size))
    for i, (center, motion) in enumerate(motions):
        # mirrored jitter keeps the left/right pair symmetric in expectation
        v = _rotate(np.array(motion), jitter if i == 0 else -jitter) * magnitude
        d -= _bump(size, center, v, sigma)
    return d


def intensity_profile(frames: int, apex: int) -> np.ndarray:
    t = np.arange(frames, dtype=np.float64)
    rise = np.sin(0.5 * np.pi * t / apex)
    fall = np.cos(0.5 * np.pi * (t - apex) / (frames - 1 - apex))
    return np.where(t <= apex, rise, fall)


def dynamic_image(frames: np.ndarray) -> np.ndarray:
    """Approximate rank pooling of a (T, H, W) sequence with weights 2t - T - 1."""
    t = np.arange(1, len(frames) + 1)
    alpha = 2 * t - len(frames) - 1
    return np.tensordot(alpha, frames.astype(np.float64) / 255.0, axes=1).astype(np.float32)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec = None, seed: int = 0) -> Dataset:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    size, n_frames = spec.image_size, spec.frames
    samples = []
    for s_idx in range(spec.subjects):
        domain = spec.domains[s_idx % len(spec.domains)]
        subject = f"s{s_idx:02d}" if len(spec.domains) == 1 else f"{domain.name}-s{s_idx:02d}"
        face = random_face(rng, size)
        lm = face_landmarks(face)
        tex = texture(rng, size, fine=1.0)
        base = render_face(face, lm, tex)
        base = np.clip(domain.contrast * (base - 0.5) + 0.5 + domain.brightness, 0, 1)
        onset_t = Tensor(base[None, None], dtype=np.float64)
        for label_name in spec.classes:
            label = CLASSES.index(label_name)
            for k in range(spec.samples_per_class):
                magnitude = rng.uniform(*spec.magnitude)
                gt = class_field(label_name, lm, size, magnitude, face.scale, rng)
                apex = int(rng.integers(n_frames // 2 - 1, n_frames // 2 + 2))
                profile = intensity_profile(n_frames, apex)
                stack = np.stack([gt * a for a in profile])
                clean = warp(Tensor(np.repeat(onset_t.data, n_frames, axis=0)), Tensor(stack)).data[:, 0]
                frames = _quantize(clean + rng.normal(0, domain.noise, clean.shape))
                samples.append(Sample(
                    sample_id=f"{subject}_{label_name}_{k}",
                    subject=subject,
                    label=label,
                    frames=frames,
                    onset=0,
                    apex=apex,
                    landmarks=LandmarkSet(lm.copy()),
                    flow=gt.transpose(1, 2, 0).astype(np.float32),
                    dynamic=dynamic_image(frames),
                    domain=domain.name,
                ))
    meta = {"generator": "synthetic-faces", "seed": int(seed), "spec": spec.to_dict()}
    return Dataset(samples, CLASSES, meta)


# --------------------------------------------------------------- oracles
def oracle_features(sample: Sample) -> np.ndarray:
    """(brow knit, mouth-corner lift, brow raise) read from the ground-truth field."""
    d = sample.flow
    lm = sample.landmarks.points

    def mean_at(center, r=4):
        x, y = int(round(center[0])), int(round(center[1]))
        return d[y - r:y + r + 1, x - r:x + r + 1].reshape(-1, 2).mean(axis=0)

    bl, br = mean_at(lm[17:22].mean(axis=0)), mean_at(lm[22:27].mean(axis=0))
    ml, mr = mean_at(lm[48]), mean_at(lm[54])
    knit = br[0] - bl[0]
    lift = (ml[1] + mr[1]) / 2
    raise_ = (bl[1] + br[1]) / 2 - abs(knit)
    return np.array([knit, lift, raise_])


def oracle_predict(samples: Sequence[Sample]) -> np.ndarray:
    # feature order matches CLASSES (negative, positive, surprise)
    return np.array([int(np.argmax(oracle_features(s))) for s in samples])


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(s.sample_id.encode())
        h.update(s.frames.tobytes())
        h.update(s.landmarks.points.tobytes())
    return h.hexdigest()
