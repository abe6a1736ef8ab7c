"""Point-cloud data model and labeling metrics.

Labels are stored as integer indices into a :class:`LabelSet`; the null
label is always the last index (``M``), so a labeling for one frame is a
plain integer array of length ``n_t``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelSet:
    """Ordered marker names; the null label is implicit and sits at index M."""

    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(set(names)) != len(names):
            raise ValueError("label names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def M(self) -> int:
        return len(self.names)

    @property
    def null(self) -> int:
        return len(self.names)

    def __len__(self):
        # |L| = M + 1
        return len(self.names) + 1

    def index(self, name: Optional[str]) -> int:
        if name is None:
            return self.null
        return self.names.index(name)

    def name(self, idx: int) -> Optional[str]:
        return None if idx == self.null else self.names[idx]

    def encode(self, names: Sequence[Optional[str]]) -> np.ndarray:
        return np.array([self.index(n) for n in names], dtype=np.int64)

    def decode(self, labels: Sequence[int]) -> list:
        return [self.name(int(i)) for i in labels]


@dataclass(frozen=True)
class MarkerLayout:
    label_set: LabelSet
    vertex_ids: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1)
        d = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        if len(v) != self.label_set.M or len(d) != self.label_set.M:
            raise ValueError("layout vectors must have one entry per marker")
        if np.any(d < 0):
            raise ValueError("marker offsets must be non-negative")
        object.__setattr__(self, "vertex_ids", v)
        object.__setattr__(self, "offsets", d)

    @property
    def M(self) -> int:
        return self.label_set.M

    def subset(self, names: Sequence[str]) -> "MarkerLayout":
        idx = [self.label_set.index(n) for n in names]
        return MarkerLayout(LabelSet(tuple(names)), self.vertex_ids[idx], self.offsets[idx])


@dataclass(frozen=True)
class Frame:
    """One time step of unordered 3D points.

    ``labels`` is only present for ground-truth or predicted frames.
    ``occluded`` lists ground-truth marker indices missing from the frame
    (synthetic data only).
    """

    points: np.ndarray
    tracklet_ids: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    occluded: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("frame points must be finite")
        object.__setattr__(self, "points", pts)
        for name in ("tracklet_ids", "labels", "occluded"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.int64).reshape(-1)
                if name != "occluded" and len(val) != len(pts):
                    raise ValueError(f"{name} length must match point count")
                object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return len(self.points)

    def take(self, idx) -> "Frame":
        """Subset/reorder points (and their per-point fields) by index."""
        idx = np.asarray(idx, dtype=np.int64)
        return Frame(
            self.points[idx],
            None if self.tracklet_ids is None else self.tracklet_ids[idx],
            None if self.labels is None else self.labels[idx],
            self.occluded,
        )

    def with_labels(self, labels) -> "Frame":
        return Frame(self.points, self.tracklet_ids, labels, self.occluded)


@dataclass(frozen=True)
class MoCapSequence:
    frames: tuple
    rate_hz: float = 30.0
    label_set: Optional[LabelSet] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


def median_center(frame: Frame) -> tuple[Frame, np.ndarray]:
    """Subtract the coordinate-wise median; the offset adds it back."""
    if frame.n == 0:
        raise ValueError("empty frame")
    offset = np.median(frame.points, axis=0)
    centered = Frame(frame.points - offset, frame.tracklet_ids, frame.labels, frame.occluded)
    return centered, offset


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"labeling length mismatch: {len(pred)} vs {len(gt)}")
    return pred, gt


def accuracy(pred, gt) -> float:
    """Fraction of points whose predicted label equals the ground truth (null included)."""
    pred, gt = _check_pair(pred, gt)
    if len(gt) == 0:
        return 1.0
    return float(np.mean(pred == gt))


def f1_frame(pred, gt, null: int) -> float:
    """Per-frame F1 with non-null labels as the positive class.

    precision = correct non-null predictions / non-null predictions,
    recall = correct non-null predictions / non-null ground-truth labels.
    """
    pred, gt = _check_pair(pred, gt)
    if len(gt) == 0:
        log.debug("f1 of an empty frame taken as 1.0")
        return 1.0
    pred_pos = pred != null
    gt_pos = gt != null
    if not pred_pos.any() and not gt_pos.any():
        # nothing to find and nothing claimed
        return 1.0
    tp = np.sum(pred_pos & (pred == gt))
    precision = tp / pred_pos.sum() if pred_pos.any() else 0.0
    recall = tp / gt_pos.sum() if gt_pos.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def f1_sequence(per_frame: Sequence[float]) -> float:
    if len(per_frame) == 0:
        raise ValueError("no frames to average")
    return float(np.mean(per_frame))
