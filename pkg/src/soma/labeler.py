"""Turning soft assignments into hard labels, per frame and per tracklet."""
from __future__ import annotations

from collections import Counter, defaultdict
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Frame, MoCapSequence

MODES = ("greedy", "argmax", "exact")
_TINY = 1e-300


def decode_frame(A: np.ndarray, mode: str = "greedy") -> np.ndarray:
    """Hard labels from an (n, M+1) assignment; the last column is null.

    ``greedy`` commits the largest remaining entry, retiring its row and (if
    not null) its column. ``exact`` maximises the summed log-probability
    subject to each marker label being used at most once. ``argmax`` is
    unconstrained and may reuse labels.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] == 0:
        raise ValueError("empty assignment matrix")
    n, C = A.shape
    null = C - 1
    if mode == "argmax":
        return np.argmax(A, axis=1)
    if mode == "greedy":
        return _greedy(A, null)
    if mode == "exact":
        return _exact(A, null)
    raise ValueError(f"unknown decode mode {mode!r}; expected one of {MODES}")


def _greedy(A, null):
    n = A.shape[0]
    labels = np.full(n, -1)
    row_free = np.ones(n, dtype=bool)
    col_free = np.ones(A.shape[1], dtype=bool)
    order = np.argsort(-A, axis=None, kind="stable")
    left = n
    for flat in order:
        i, j = divmod(int(flat), A.shape[1])
        if not row_free[i] or not col_free[j]:
            continue
        labels[i] = j
        row_free[i] = False
        if j != null:
            col_free[j] = False
        left -= 1
        if left == 0:
            break
    return labels


def _exact(A, null):
    n = A.shape[0]
    cost_real = -np.log(np.maximum(A[:, :null], _TINY))
    # n interchangeable null slots so null can be taken any number of times
    cost_null = np.repeat(-np.log(np.maximum(A[:, null:], _TINY)), n, axis=1)
    cost = np.hstack([cost_real, cost_null])
    rows, cols = linear_sum_assignment(cost)
    labels = np.empty(n, dtype=np.int64)
    labels[rows] = np.where(cols < null, cols, null)
    return labels


def log_mass(A: np.ndarray, labels: np.ndarray) -> float:
    """Summed log-probability of the chosen entries."""
    return float(np.sum(np.log(np.maximum(A[np.arange(len(labels)), labels], _TINY))))


def violates_uniqueness(labels: np.ndarray, null: int) -> bool:
    real = labels[labels != null]
    return len(np.unique(real)) != len(real)


def label_sequence(params: dict, cfg, seq, mode: str = "greedy", batch_size: int = 256):
    """Per-frame labels and confidences (mean assigned mass) for a sequence.

    Frames are independent; batching does not change the decoded labels.
    """
    from .train import predict_assignments

    frames = list(seq.frames if isinstance(seq, MoCapSequence) else seq)
    labels = [np.zeros(0, dtype=np.int64) for _ in frames]
    conf = [float("nan")] * len(frames)
    live = [i for i, f in enumerate(frames) if f.n > 0]
    if not live:
        return labels, conf
    assignments = predict_assignments(params, cfg, [frames[i] for i in live], batch_size)
    for i, A in zip(live, assignments):
        labels[i] = decode_frame(A, mode)
        conf[i] = float(np.mean(A[np.arange(len(A)), labels[i]]))
    return labels, conf


def tracklet_label(per_frame: Sequence[np.ndarray], tracklets: Sequence[Optional[np.ndarray]],
                   null: int) -> tuple[list, list]:
    """Give every point of a tracklet its tracklet's most frequent label.

    Ties go to the smallest label index (null is the largest index, so it
    loses ties). Returns the relabelled frames and the indices of frames
    where the result reuses a marker label.
    """
    votes = defaultdict(Counter)
    for labels, ids in zip(per_frame, tracklets):
        if ids is None:
            continue
        for lab, tid in zip(labels.tolist(), ids.tolist()):
            votes[tid][lab] += 1
    winner = {}
    for tid, counts in votes.items():
        best = max(counts.values())
        winner[tid] = min(lab for lab, c in counts.items() if c == best)
    out, flagged = [], []
    for t, (labels, ids) in enumerate(zip(per_frame, tracklets)):
        if ids is None:
            out.append(np.asarray(labels).copy())
            continue
        new = np.array([winner[tid] for tid in ids.tolist()], dtype=np.int64)
        if violates_uniqueness(new, null):
            flagged.append(t)
        out.append(new)
    return out, flagged


def relabel(frame: Frame, labels: np.ndarray) -> Frame:
    return frame.with_labels(labels)
