"""Samples, datasets, and the on-disk manifest format.

A dataset directory looks like::

    manifest.yaml
    frames/<sample>/<t>.png       8-bit grayscale frames of one sequence
    landmarks/<sample>.txt        68 "x y" lines for the onset frame
    flow/<sample>.fld             optional onset->apex field (see flowio)
    dynamic/<sample>.fld          optional single-channel dynamic image

``manifest.yaml`` keys: ``version`` (1), ``image_size`` [w, h], ``classes``
(names indexed by label), and ``samples``, each with ``id``, ``subject``,
``label``, ``onset``, ``apex`` (frame indices), ``frames`` (relative paths),
``landmarks`` and optional ``flow``, ``dynamic``, ``domain``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from PIL import Image

from .. import flowio
from ..core import UsageError
from ..dgm import FramePair
from ..regions import LandmarkSet, load_landmarks, save_landmarks

CLASSES = ("negative", "positive", "surprise")
MANIFEST_VERSION = 1


@dataclass
class Sample:
    sample_id: str
    subject: str
    label: int
    frames: np.ndarray  # (T, H, W) uint8
    onset: int
    apex: int
    landmarks: LandmarkSet
    flow: Optional[np.ndarray] = None  # (H, W, 2) float32
    dynamic: Optional[np.ndarray] = None  # (H, W) float32
    domain: str = "synthetic"

    def frame(self, index: int) -> np.ndarray:
        return self.frames[index].astype(np.float64) / 255.0

    def pair(self, apex: Optional[int] = None) -> FramePair:
        a = self.apex if apex is None else apex
        return FramePair(self.frame(self.onset), self.frame(a), self.subject, self.label)


@dataclass
class Dataset:
    samples: List[Sample]
    classes: Sequence[str] = CLASSES
    meta: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def subjects(self) -> List[str]:
        return sorted({s.subject for s in self.samples})

    @property
    def image_shape(self):
        return self.samples[0].frames.shape[1:]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.classes, dict(self.meta))

    def validate(self) -> None:
        if not self.samples:
            raise UsageError("dataset is empty")
        for s in self.samples:
            if not s.subject:
                raise UsageError(f"sample {s.sample_id} has no subject id")
            if not 0 <= s.label < len(self.classes):
                raise UsageError(f"sample {s.sample_id}: label {s.label} outside {len(self.classes)} classes")
            if not (0 <= s.onset < len(s.frames) and 0 <= s.apex < len(s.frames)):
                raise UsageError(f"sample {s.sample_id}: onset/apex index outside its {len(s.frames)} frames")


# ------------------------------------------------------------------ disk IO
def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    entries = []
    for s in dataset.samples:
        frame_dir = out / "frames" / s.sample_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        frames = []
        for t, img in enumerate(s.frames):
            rel = f"frames/{s.sample_id}/{t:03d}.png"
            Image.fromarray(img).save(out / rel)
            frames.append(rel)
        (out / "landmarks").mkdir(exist_ok=True)
        entry = {
            "id": s.sample_id,
            "subject": s.subject,
            "label": int(s.label),
            "onset": int(s.onset),
            "apex": int(s.apex),
            "frames": frames,
            "landmarks": f"landmarks/{s.sample_id}.txt",
            "domain": s.domain,
        }
        save_landmarks(out / entry["landmarks"], s.landmarks)
        if s.flow is not None:
            (out / "flow").mkdir(exist_ok=True)
            entry["flow"] = f"flow/{s.sample_id}.fld"
            flowio.write_field(out / entry["flow"], s.flow)
        if s.dynamic is not None:
            (out / "dynamic").mkdir(exist_ok=True)
            entry["dynamic"] = f"dynamic/{s.sample_id}.fld"
            flowio.write_field(out / entry["dynamic"], s.dynamic)
        entries.append(entry)
    h, w = dataset.image_shape
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": [int(w), int(h)],
        "classes": list(dataset.classes),
        "meta": dataset.meta,
        "samples": entries,
    }
    path = out / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def load_dataset(path) -> Dataset:
    """Load from a manifest file or a directory containing ``manifest.yaml``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.yaml"
    root = path.parent
    manifest = yaml.safe_load(path.read_text())
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise UsageError(f"{path}: unsupported manifest version {manifest.get('version') if isinstance(manifest, dict) else None}")
    w, h = manifest["image_size"]
    samples = []
    for e in manifest["samples"]:
        frames = np.stack([np.asarray(Image.open(root / f).convert("L")) for f in e["frames"]])
        if frames.shape[1:] != (h, w):
            raise UsageError(f"sample {e['id']}: frames are {frames.shape[1:]}, manifest says {(h, w)}")
        flow = flowio.read_field(root / e["flow"]) if e.get("flow") else None
        dynamic = flowio.read_field(root / e["dynamic"])[..., 0] if e.get("dynamic") else None
        samples.append(Sample(
            sample_id=str(e["id"]),
            subject=str(e["subject"]),
            label=int(e["label"]),
            frames=frames,
            onset=int(e["onset"]),
            apex=int(e["apex"]),
            landmarks=load_landmarks(root / e["landmarks"], (w, h)),
            flow=flow,
            dynamic=dynamic,
            domain=str(e.get("domain", "")),
        ))
    ds = Dataset(samples, tuple(manifest.get("classes", CLASSES)), manifest.get("meta") or {})
    ds.validate()
    return ds
