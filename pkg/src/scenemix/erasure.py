"""Pseudo-label extraction and confidence-threshold point erasure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ValidationError
from .scene_model import Scene

DEFAULT_TAU_S = 0.9  # confidence threshold; doubles as the pseudo-label mining threshold
PROB_ROW_TOL = 1e-5


@dataclass(frozen=True)
class PointProbs:
    """Per-point class probabilities; each row must be a distribution."""

    probs: np.ndarray  # (m, num_classes) float64

    def __post_init__(self):
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if probs.ndim != 2:
            raise ValidationError(f"probs must be (m, C), got shape {probs.shape}")
        if probs.size:
            if probs.min() < -PROB_ROW_TOL or probs.max() > 1 + PROB_ROW_TOL:
                raise ValidationError("probability entries outside [0, 1]")
            sums = probs.sum(axis=1)
            if np.abs(sums - 1.0).max() > PROB_ROW_TOL:
                worst = int(np.abs(sums - 1.0).argmax())
                raise ValidationError(
                    f"row {worst} sums to {sums[worst]:.8f}, expected 1 within {PROB_ROW_TOL}"
                )
        object.__setattr__(self, "probs", probs)

    @property
    def num_points(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class PseudoLabels:
    """Argmax labels with their winning probabilities."""

    label: np.ndarray  # (m,) int32
    confidence: np.ndarray  # (m,) float64

    @property
    def num_points(self) -> int:
        return self.label.shape[0]


@dataclass(frozen=True)
class ErasureStats:
    total_points: int
    removed_points: int

    @property
    def removed_fraction(self) -> float:
        if self.total_points == 0:
            return 0.0
        return self.removed_points / self.total_points


@dataclass(frozen=True)
class ErasedScene:
    """Survivors of erasure: a fully pseudo-labeled scene plus bookkeeping."""

    scene: Scene
    kept_index_map: np.ndarray  # (m_kept,) int64, strictly increasing original indices
    stats: ErasureStats


def pseudo_label(probs: PointProbs) -> PseudoLabels:
    """Argmax label and max probability per point; ties break to the lowest class id."""
    p = probs.probs
    if p.shape[0] == 0:
        return PseudoLabels(np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.float64))
    label = p.argmax(axis=1).astype(np.int32)  # np.argmax returns the first maximum
    confidence = p.max(axis=1)
    return PseudoLabels(label, confidence)


def erase(
    scene: Scene,
    pseudo: PseudoLabels,
    tau_s: float = DEFAULT_TAU_S,
    ignore_class: Optional[int] = None,
) -> ErasedScene:
    """Keep exactly the points with confidence >= tau_s (inclusive).

    Points whose argmax is the ignore class are erased regardless of
    confidence: they carry no usable supervision.
    """
    m = scene.num_points
    if pseudo.num_points != m:
        raise ConsistencyError(
            f"scene has {m} points but pseudo labels cover {pseudo.num_points}"
        )
    keep = pseudo.confidence >= tau_s
    if ignore_class is not None:
        keep &= pseudo.label != ignore_class
    kept = np.flatnonzero(keep).astype(np.int64)
    out = Scene(
        scene.coords[kept],
        scene.feats[kept],
        pseudo.label[kept],
        scene.scene_id,
    )
    stats = ErasureStats(total_points=m, removed_points=m - kept.size)
    return ErasedScene(scene=out, kept_index_map=kept, stats=stats)


def erased_from_labeled(scene: Scene) -> ErasedScene:
    """Wrap an already-labeled scene as a trivially erased one (nothing removed)."""
    if not scene.has_labels:
        raise ValidationError("scene must carry labels")
    m = scene.num_points
    return ErasedScene(
        scene=scene,
        kept_index_map=np.arange(m, dtype=np.int64),
        stats=ErasureStats(total_points=m, removed_points=0),
    )
