"""Training steps, the per-fold training loop, and leave-one-subject-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..core import Adam, NumericalError, Tensor, UsageError, cosine_anneal, default_dtype, no_grad
from ..core import functional as F
from ..dgm import loss_dgm, sample_pair_indices
from .config import RunConfig, TrainConfig
from .data import Dataset, Sample
from .metrics import MetricsReport, compute_metrics
from .model import FRLModel, PreparedBatch

log = logging.getLogger(__name__)


def apex_jitter(length: int, apex: int, rng: np.random.Generator) -> int:
    """A uniformly chosen neighbour of ``apex`` (only one exists at a sequence end)."""
    options = [i for i in (apex - 1, apex + 1) if 0 <= i < length]
    if not options:
        raise UsageError("apex jitter needs a sequence of at least 2 frames")
    return options[int(rng.integers(len(options)))]


class Trainer:
    """Holds the two optimizer groups and the step counter for one model."""

    def __init__(self, model: FRLModel, config: TrainConfig, total_steps: int = 0):
        self.model = model
        self.config = config
        self.dgm_opt = Adam(model.dgm_parameters(), lr=config.dgm_lr)
        self.fusion_opt = Adam(model.fusion_parameters(), lr=config.fusion_lr)
        self.total_steps = total_steps
        self.step_count = 0

    @property
    def fusion_lr(self) -> float:
        return cosine_anneal(self.step_count, self.total_steps, self.config.fusion_lr)

    def train_step(self, batch: PreparedBatch) -> Dict[str, float]:
        """L_cls + L_DGM on labelled pairs; the classifier's gradient into the DGM is scaled."""
        if len(batch) == 0:
            raise UsageError("train_step needs a non-empty batch")
        model, cfg = self.model, self.config
        model.train()
        self.dgm_opt.zero_grad()
        self.fusion_opt.zero_grad()
        field = model.displacement(batch)
        logits = model.forward(batch, field, cfg.cls_grad_scale)
        cls = F.cross_entropy(logits, batch.labels)
        total = cls
        parts = {}
        if field is not None:
            dgm_loss, parts = loss_dgm(Tensor(batch.onset), Tensor(batch.apex), field, cfg.loss_weights)
            total = cls + dgm_loss
        _check_finite(total, "training loss")
        total.backward()
        if model.dgm is not None:
            self.dgm_opt.step()
        self.fusion_opt.step(lr=self.fusion_lr)
        self.step_count += 1
        return {"loss": total.item(), "cls": cls.item(), **parts}

    def self_supervised_step(self, onset: np.ndarray, apex: np.ndarray) -> float:
        """One DGM-only update on unlabelled pairs; fusion parameters are not touched."""
        model = self.model
        if model.dgm is None:
            raise UsageError("self-supervised steps need the displacement generator")
        model.train()
        self.dgm_opt.zero_grad()
        dtype = model.dtype
        on, ap = Tensor(onset.astype(dtype)), Tensor(apex.astype(dtype))
        total, _ = loss_dgm(on, ap, model.dgm(on, ap), self.config.loss_weights)
        _check_finite(total, "self-supervised loss")
        total.backward()
        self.dgm_opt.step()
        return total.item()


def _check_finite(loss: Tensor, what: str) -> None:
    if not np.isfinite(loss.item()):
        raise NumericalError(f"{what} is {loss.item()}")


def draw_self_supervised(samples: Sequence[Sample], count: int, rng: np.random.Generator):
    """``count`` unlabelled ordered frame pairs from random training sequences, (count, 1, H, W) each."""
    picks = rng.integers(len(samples), size=count)
    onset, apex = [], []
    for i in picks:
        s = samples[i]
        a, b = sample_pair_indices(len(s.frames), 1, rng)[0]
        onset.append(s.frame(a))
        apex.append(s.frame(b))
    return np.stack(onset)[:, None], np.stack(apex)[:, None]


def fit(model: FRLModel, samples: Sequence[Sample], config: TrainConfig, rng: np.random.Generator,
        callback: Callable[[int, Dict[str, float]], None] = None) -> List[Dict[str, float]]:
    """Train on ``samples``; one self-supervised step follows every supervised step.

    Each epoch is split into ceil(n / batch_size) batches of near-equal size.
    """
    if not samples:
        raise UsageError("cannot train on an empty sample list")
    steps_per_epoch = -(-len(samples) // config.batch_size)
    trainer = Trainer(model, config, total_steps=steps_per_epoch * config.epochs)
    history = []
    for epoch in range(config.epochs):
        # near-equal batches, so no step sees a tiny remainder batch
        for part in np.array_split(rng.permutation(len(samples)), steps_per_epoch):
            chunk = [samples[i] for i in part]
            apexes = [apex_jitter(len(s.frames), s.apex, rng) if config.apex_jitter else s.apex for s in chunk]
            stats = trainer.train_step(model.prepare(chunk, apexes))
            if config.self_supervised and model.dgm is not None:
                stats["ss"] = trainer.self_supervised_step(*draw_self_supervised(samples, config.pairs_per_step, rng))
            history.append(stats)
        if callback is not None:
            callback(epoch, history[-1])
    return history


# ---------------------------------------------------------------------- LOSO
def loso_split(dataset: Dataset):
    """One (subject, train indices, test indices) fold per subject, subjects in sorted order."""
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise UsageError(f"LOSO needs at least 2 subjects, found {len(subjects)}")
    owner = np.array([s.subject for s in dataset.samples])
    return [(subj, np.flatnonzero(owner != subj), np.flatnonzero(owner == subj)) for subj in subjects]


@dataclass
class FoldResult:
    subject: str
    report: MetricsReport
    preds: List[int]
    labels: List[int]


@dataclass
class LosoReport:
    folds: List[FoldResult]
    aggregate: MetricsReport
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "folds": [{"subject": f.subject, **f.report.to_dict(), "preds": f.preds, "labels": f.labels}
                      for f in self.folds],
            "config": self.config,
        }


def aggregate_folds(folds: Sequence[FoldResult], num_classes: int) -> MetricsReport:
    """Pool predictions over folds (order-independent) and score once."""
    preds = np.concatenate([f.preds for f in folds]) if folds else np.zeros(0, int)
    labels = np.concatenate([f.labels for f in folds]) if folds else np.zeros(0, int)
    return compute_metrics(preds, labels, num_classes)


def build_model(config: RunConfig, rng: np.random.Generator) -> FRLModel:
    config.model.fusion.num_classes = 3
    return FRLModel(config.model, rng)


def run_fold(dataset: Dataset, train_idx, test_idx, config: RunConfig, fold_seed) -> FoldResult:
    rng = np.random.default_rng(fold_seed)
    config.model.fusion.num_classes = len(dataset.classes)
    model = FRLModel(config.model, rng)
    train = [dataset.samples[i] for i in train_idx]
    test = [dataset.samples[i] for i in test_idx]
    fit(model, train, config.train, rng)
    with no_grad():
        result = model.predict(test, config.train.batch_size)
    labels = [s.label for s in test]
    return FoldResult(test[0].subject, compute_metrics(result.labels, labels, len(dataset.classes)),
                      result.labels.tolist(), labels)


def run_loso(dataset: Dataset, config: RunConfig, folds: Optional[Sequence[str]] = None,
             progress: Callable[[FoldResult], None] = None) -> LosoReport:
    """Train and test one model per held-out subject.

    ``folds`` restricts evaluation to the named subjects (training still uses
    every other subject). Runs in 64-bit when ``config.train.precision`` is 64.
    """
    dtype = np.float64 if config.train.precision == 64 else np.float32
    # fold seeds follow the subject's position in the full split, so
    # restricting ``folds`` does not change any individual fold's result
    splits = list(enumerate(loso_split(dataset)))
    if folds is not None:
        wanted = set(folds)
        unknown = wanted - {s for _, (s, _, _) in splits}
        if unknown:
            raise UsageError(f"unknown subjects requested: {sorted(unknown)}")
        splits = [(k, s) for k, s in splits if s[0] in wanted]
    results = []
    with default_dtype(dtype):
        for k, (subject, train_idx, test_idx) in splits:
            fold = run_fold(dataset, train_idx, test_idx, config, [config.seed, k])
            log.info("fold %s: UF1 %.3f UAR %.3f", subject, fold.report.uf1, fold.report.uar)
            if progress is not None:
                progress(fold)
            results.append(fold)
    return LosoReport(results, aggregate_folds(results, len(dataset.classes)), config.to_dict())
