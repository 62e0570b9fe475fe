"""Displacement generation: encoder-decoder network, warping, and its loss suite.

Coordinate conventions
----------------------
* Fields are stored channel-first, (B, 2, H, W); channel 0 is the x-shift,
  channel 1 the y-shift, both in pixels.
* Warping is backward: ``warp(onset, D)(y, x) = onset(y + Dy, x + Dx)``. If the
  apex is the onset translated 4 px to the right, the field that reconstructs
  it is Dx = -4.
* The network's tanh output lives in [-1, 1] and is read in normalized image
  units, so ``alpha = 0.2`` allows shifts of up to 20% of the image extent.
  Regularizers (``loss_nm``, ``loss_sm``) are evaluated in those units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import BatchNorm, Conv2d, Module, Tensor, UsageError, concat
from .core import functional as F
from .core.tensor import clip_min, sqrt


class ResolutionError(ValueError):
    """Input frames do not match the resolution the network accepts."""


@dataclass
class FramePair:
    onset: np.ndarray
    apex: np.ndarray
    subject_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        self.onset = np.asarray(self.onset)
        self.apex = np.asarray(self.apex)
        if self.onset.ndim == 2:
            self.onset = self.onset[None]
            self.apex = self.apex[None]
        if self.onset.shape != self.apex.shape:
            raise ValueError(f"onset {self.onset.shape} and apex {self.apex.shape} differ in shape")
        for name, img in (("onset", self.onset), ("apex", self.apex)):
            if img.min() < 0 or img.max() > 1:
                raise ValueError(f"{name} pixels must lie in [0, 1]")

    @property
    def self_supervised(self) -> bool:
        return self.label is None


@dataclass
class DgmLossWeights:
    rec: float = 10.0
    nm: float = 1.0
    sm: float = 0.2

    def __post_init__(self):
        if min(self.rec, self.nm, self.sm) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DisplacementField:
    """Output of the generator.

    ``values`` is the pixel-unit field used for warping and the losses.
    ``features`` is the per-sample magnitude-normalized version (also in
    pixels) handed to the classifier; it equals ``values`` when
    normalization is disabled.
    """

    values: Tensor
    features: Tensor
    alpha: float

    @property
    def unit(self) -> Tensor:
        """``values`` divided by (W, H): the alpha-scaled network output."""
        _, _, h, w = self.values.shape
        return self.values * Tensor(_extent(w, h, self.values.dtype, inverse=True))

    def as_hw2(self, index: int = 0) -> np.ndarray:
        return self.values.data[index].transpose(1, 2, 0)


@dataclass
class DGMConfig:
    image_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    alpha: float = 0.2
    normalize: bool = True
    input_downsample: int = 1
    difference_input: bool = True
    norm_floor: float = 1e-6
    channels: List[int] = field(default_factory=list)

    def encoder_channels(self) -> List[int]:
        return self.channels or [self.base_channels * 2**i for i in range(self.depth)]


def _extent(w: int, h: int, dtype, inverse: bool = False) -> np.ndarray:
    ext = np.array([w, h], dtype=np.float64).reshape(1, 2, 1, 1)
    return (1.0 / ext if inverse else ext).astype(dtype)


class _Block(Module):
    def __init__(self, cin: int, cout: int, rng, stride: int = 1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return self.bn(self.conv(x)).relu()


class DisplacementGenerator(Module):
    """Encoder-decoder from an (onset, apex) pair to a displacement field.

    ``depth`` stride-2 conv blocks go down, ``depth`` nearest-upsample + conv
    blocks come back up with skip connections to the matching encoder level.
    With ``difference_input`` the frame difference ``apex - onset``, scaled to
    unit RMS per sample, is stacked on the two frames, so the first layer sees
    the motion signal at the same scale as the intensities instead of buried
    under them.
    """

    def __init__(self, config: DGMConfig, rng: np.random.Generator):
        self.config = config
        enc = config.encoder_channels()
        cin = (3 if config.difference_input else 2) * config.image_channels
        self.down = []
        prev = cin
        for c in enc:
            self.down.append(_Block(prev, c, rng, stride=2))
            prev = c
        skips = [cin] + enc[:-1]
        dec = list(reversed(enc[:-1])) + [enc[0]]
        self.up = []
        for skip, c in zip(reversed(skips), dec):
            self.up.append(_Block(prev + skip, c, rng))
            prev = c
        self.head = Conv2d(prev, 2, 3, rng, gain=0.1)

    @property
    def granularity(self) -> int:
        return 2 ** self.config.depth * self.config.input_downsample

    def check_resolution(self, height: int, width: int) -> None:
        g = self.granularity
        if height % g or width % g or height < g or width < g:
            raise ResolutionError(
                f"frames of {height}x{width} are not calibrated for this network; "
                f"both sides must be positive multiples of {g}")

    def raw(self, onset: Tensor, apex: Tensor) -> Tensor:
        """Pre-tanh network output at full resolution, (B, 2, H, W)."""
        _, _, h, w = onset.shape
        self.check_resolution(h, w)
        parts = [onset, apex]
        if self.config.difference_input:
            diff = apex - onset
            rms = sqrt((diff * diff).mean(axis=(1, 2, 3), keepdims=True) + self.config.norm_floor)
            parts.append(diff / rms)
        x = concat(parts, axis=1)
        if self.config.input_downsample > 1:
            x = F.avg_pool2d(x, self.config.input_downsample)
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(concat([F.upsample_nearest(x, 2), skips.pop()], axis=1))
        out = self.head(x)
        if self.config.input_downsample > 1:
            out = F.resize_bilinear(out, h, w)
        return out

    def forward(self, onset, apex) -> DisplacementField:
        onset, apex = _as_batch(onset), _as_batch(apex)
        _, _, h, w = onset.shape
        unit = self.raw(onset, apex).tanh()
        ext = Tensor(self.config.alpha * _extent(w, h, unit.dtype))
        values = unit * ext
        if self.config.normalize:
            peak = clip_min(unit.abs().max(axis=(1, 2, 3), keepdims=True), self.config.norm_floor)
            features = unit / peak * ext
        else:
            features = values
        return DisplacementField(values, features, self.config.alpha)


def _as_batch(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = np.asarray(x)
        x = Tensor(x.astype(np.float64) if x.dtype.kind in "iub" else x)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.reshape(1, *x.shape)
    return x


def generate_displacement(pair: FramePair, model: DisplacementGenerator) -> DisplacementField:
    dtype = model.head.weight.dtype
    return model(Tensor(pair.onset[None].astype(dtype)), Tensor(pair.apex[None].astype(dtype)))


# ------------------------------------------------------------------- warping
def warp(onset, displacement) -> Tensor:
    """Backward-warp ``onset`` (B, C, H, W) by a pixel field (B, 2, H, W)."""
    onset = _as_batch(onset)
    disp = displacement.values if isinstance(displacement, DisplacementField) else _as_batch(displacement)
    b, _, h, w = onset.shape
    if disp.shape != (b, 2, h, w):
        raise ValueError(f"displacement {disp.shape} does not match image {onset.shape}")
    base = Tensor(F.identity_grid(h, w, disp.dtype)[None])
    coords = disp.transpose(0, 2, 3, 1) + base
    return F.grid_sample(onset, coords)


# -------------------------------------------------------------------- losses
def loss_rec(apex_hat: Tensor, apex: Tensor) -> Tensor:
    """Mean absolute difference over all pixels and channels."""
    return (apex_hat - apex).abs().mean()


def loss_nm(field: Tensor) -> Tensor:
    """Mean over pixels of |Dx| + |Dy|, averaged over the batch."""
    field = _as_batch(field)
    return field.abs().sum(axis=1).mean()


def loss_sm(field: Tensor) -> Tensor:
    """Mean L1 difference between horizontal neighbours plus between vertical neighbours."""
    field = _as_batch(field)
    _, _, h, w = field.shape
    if h < 2 or w < 2:
        raise UsageError(f"smoothing loss needs a field of at least 2x2, got {h}x{w}")
    horizontal = F.diff(field, axis=3).abs().sum(axis=1).mean()
    vertical = F.diff(field, axis=2).abs().sum(axis=1).mean()
    return horizontal + vertical


def combine_losses(rec, nm, sm, weights: DgmLossWeights):
    return rec * weights.rec + nm * weights.nm + sm * weights.sm


def loss_dgm(onset: Tensor, apex: Tensor, field: DisplacementField, weights: DgmLossWeights = None):
    """Weighted DGM objective; returns ``(total, {"rec", "nm", "sm"})``."""
    weights = weights or DgmLossWeights()
    onset, apex = _as_batch(onset), _as_batch(apex)
    rec = loss_rec(warp(onset, field), apex)
    unit = field.unit
    nm = loss_nm(unit)
    sm = loss_sm(unit)
    parts = {"rec": rec.item(), "nm": nm.item(), "sm": sm.item()}
    return combine_losses(rec, nm, sm, weights), parts


# --------------------------------------------------------- pair sampling
def sample_self_supervised_pairs(sequence: Sequence[np.ndarray], count: int, rng: np.random.Generator,
                                 subject_id: str = "") -> List[FramePair]:
    """Draw ``count`` ordered pairs of distinct frames uniformly from one sequence."""
    n = len(sequence)
    if n < 2:
        raise UsageError(f"self-supervised sampling needs a sequence of at least 2 frames, got {n}")
    pairs = []
    for _ in range(count):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        j += j >= i
        pairs.append(FramePair(sequence[i], sequence[j], subject_id=subject_id, label=None))
    return pairs


def sample_pair_indices(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Index-only variant of :func:`sample_self_supervised_pairs`, (count, 2)."""
    if n < 2:
        raise UsageError(f"self-supervised sampling needs a sequence of at least 2 frames, got {n}")
    i = rng.integers(n, size=count)
    j = rng.integers(n - 1, size=count)
    j += j >= i
    return np.stack([i, j], axis=1)


def fit_self_supervised(model: DisplacementGenerator, onset, apex, steps: int, lr: float = 0.002,
                        weights: DgmLossWeights = None) -> List[float]:
    """Train ``model`` on fixed frame pairs with the DGM objective alone.

    Returns the per-step total loss. The model is left in training mode.
    """
    from .core import Adam

    dtype = model.head.weight.dtype
    onset = Tensor(np.asarray(onset, dtype=dtype))
    apex = Tensor(np.asarray(apex, dtype=dtype))
    opt = Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for _ in range(steps):
        opt.zero_grad()
        total, _ = loss_dgm(onset, apex, model(onset, apex), weights)
        total.backward()
        opt.step()
        history.append(total.item())
    return history
