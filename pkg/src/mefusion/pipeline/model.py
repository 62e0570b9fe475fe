"""End-to-end model: displacement generator feeding the transformer fusion classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..core import Module, Tensor, concat, scale_grad
from ..core import functional as F
from ..dgm import DisplacementField, DisplacementGenerator
from ..fusion import TransformerFusion, classify
from ..regions import AuGeometry, compute_au_boxes, crop_grid, default_geometry, displacement_scale, grid_boxes, patchify
from .config import ModelConfig
from .data import Sample


@dataclass
class PreparedBatch:
    """Arrays for one forward pass, already in the model's dtype.

    ``coords`` stacks the K + 1 crop grids vertically, (B, (K+1)*S, S, 2);
    ``crop_scale`` converts source-pixel shifts to crop-pixel shifts,
    (B, 2, (K+1)*S, S). ``image_crops`` holds the onset and apex crops on
    the same grids, (B, 2, (K+1)*S, S); they carry no gradient so they are
    cut once here rather than in every forward pass.
    """

    onset: np.ndarray
    apex: np.ndarray
    coords: np.ndarray
    crop_scale: np.ndarray
    labels: np.ndarray
    image_crops: np.ndarray
    dynamic: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)


class FRLModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.dgm = DisplacementGenerator(config.dgm, rng) if config.dynamic_source == "dgm" else None
        self.fusion = TransformerFusion(config.fusion, rng, regions=9, use_local=config.use_local,
                                        use_global=config.use_global, use_fullface=config.use_fullface)
        self._geometry: Optional[AuGeometry] = None

    @property
    def dtype(self):
        return self.fusion.fc2.weight.dtype

    @property
    def geometry(self) -> AuGeometry:
        if self._geometry is None:
            self._geometry = AuGeometry.load(self.config.geometry) if self.config.geometry else default_geometry()
        return self._geometry

    def dgm_parameters(self) -> list:
        return self.dgm.parameters() if self.dgm is not None else []

    def fusion_parameters(self) -> list:
        return self.fusion.parameters()

    # --------------------------------------------------------------- inputs
    def region_set(self, sample: Sample):
        size = self.config.fusion.region_size
        if self.config.regions == "grid3x3":
            return grid_boxes(sample.landmarks, size, self.geometry.face_padding)
        return compute_au_boxes(sample.landmarks, self.geometry, size)

    def _crop_layout(self, sample: Sample):
        cache = getattr(sample, "_crop_cache", None)
        key = (self.config.regions, self.config.fusion.region_size, self.config.geometry)
        if cache is None or cache[0] != key:
            size = self.config.fusion.region_size
            boxes = self.region_set(sample).all_boxes()
            coords = np.concatenate([crop_grid(b, size) for b in boxes], axis=0)
            scale = np.concatenate(
                [np.broadcast_to(displacement_scale(b, size)[:, None, None], (2, size, size)) for b in boxes], axis=1)
            cache = (key, coords, scale, {})
            sample._crop_cache = cache
        return cache[1], cache[2]

    def _frame_crop(self, sample: Sample, index: int) -> np.ndarray:
        """Frame ``index`` cut on the sample's region grids, (1, (K+1)*S, S), memoised per frame."""
        coords, _ = self._crop_layout(sample)
        crops = sample._crop_cache[3]
        if index not in crops:
            frame = sample.frame(index)[None, None]
            crops[index] = F.grid_sample(Tensor(frame), Tensor(coords[None].astype(np.float64))).data[0]
        return crops[index]

    def prepare(self, samples: Sequence[Sample], apex_indices: Sequence[int] = None) -> PreparedBatch:
        dtype = self.dtype
        if apex_indices is None:
            apex_indices = [s.apex for s in samples]
        onset = np.stack([s.frame(s.onset) for s in samples])[:, None]
        apex = np.stack([s.frame(a) for s, a in zip(samples, apex_indices)])[:, None]
        layouts = [self._crop_layout(s) for s in samples]
        dynamic = None
        source = self.config.dynamic_source
        if source in ("flow", "flow_norm"):
            dynamic = np.stack([_require(s.flow, s, "flow").transpose(2, 0, 1) for s in samples])
            if source == "flow_norm":
                dynamic = _max_normalize(dynamic) * self._pixel_extent(onset.shape[-2:])
        elif source == "dynamic_image":
            dynamic = np.stack([_require(s.dynamic, s, "dynamic image")[None] for s in samples])
            dynamic = _max_normalize(dynamic)
        return PreparedBatch(
            onset=onset.astype(dtype),
            apex=apex.astype(dtype),
            coords=np.stack([c for c, _ in layouts]).astype(dtype),
            crop_scale=np.stack([s for _, s in layouts]).astype(dtype),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            image_crops=np.stack([np.concatenate([self._frame_crop(s, s.onset), self._frame_crop(s, a)])
                                  for s, a in zip(samples, apex_indices)]).astype(dtype),
            dynamic=None if dynamic is None else dynamic.astype(dtype),
        )

    def _pixel_extent(self, hw) -> np.ndarray:
        h, w = hw
        return self.config.dgm.alpha * np.array([w, h], dtype=np.float64).reshape(1, 2, 1, 1)

    # -------------------------------------------------------------- forward
    def displacement(self, batch: PreparedBatch) -> Optional[DisplacementField]:
        if self.dgm is None:
            return None
        return self.dgm(Tensor(batch.onset), Tensor(batch.apex))

    def forward(self, batch: PreparedBatch, field: DisplacementField = None, cls_grad_scale: float = 1.0) -> Tensor:
        """Class logits. ``cls_grad_scale`` multiplies the gradient the classifier sends into the DGM."""
        if self.dgm is not None:
            field = field if field is not None else self.displacement(batch)
            dynamic = scale_grad(field.features, cls_grad_scale)
        else:
            dynamic = Tensor(batch.dynamic)
        return self.fusion(self.region_patches(dynamic, batch))

    def region_patches(self, dynamic: Tensor, batch: PreparedBatch) -> Tensor:
        """Full-frame dynamic channels (B, D, H, W) -> (B, K+1, N, 2+D, P, P) patches."""
        cfg = self.config.fusion
        size = cfg.region_size
        crops = F.grid_sample(dynamic, Tensor(batch.coords))  # (B, D, (K+1)*S, S)
        if self.config.dynamic_source != "dynamic_image":
            # displacement channels: source pixels -> crop pixels -> units of alpha * S
            crops = crops * Tensor(batch.crop_scale / (self.config.dgm.alpha * size))
        stack = concat([Tensor(batch.image_crops), crops], axis=1)
        b, m = stack.shape[:2]
        regions = stack.reshape(b, m, -1, size, size).transpose(0, 2, 1, 3, 4)
        return patchify(regions, cfg.patch_size)

    def predict(self, samples: Sequence[Sample], batch_size: int = 32):
        """Eval-mode classification; never jitters the apex."""
        was_training = self.training
        self.eval()
        logits: List[np.ndarray] = []
        for start in range(0, len(samples), batch_size):
            batch = self.prepare(samples[start:start + batch_size])
            logits.append(self.forward(batch).data)
        self.train(was_training)
        return classify(np.concatenate(logits, axis=0))


def _require(value, sample: Sample, what: str):
    if value is None:
        raise ValueError(f"sample {sample.sample_id} has no {what} file, required by the chosen dynamic source")
    return value


def _max_normalize(x: np.ndarray) -> np.ndarray:
    peak = np.abs(x).reshape(len(x), -1).max(axis=1).reshape(-1, *([1] * (x.ndim - 1)))
    return x / np.maximum(peak, 1e-6)
