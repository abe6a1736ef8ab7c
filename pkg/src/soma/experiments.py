"""Evaluation reports and the desk-scale experiment grids.

Every grid returns plain rows (lists of dicts) so the CLI can write them as
CSV and render them as a text table.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import body as bodymod
from . import noise as noisemod
from .core import Frame, MoCapSequence, accuracy, f1_frame
from .labeler import decode_frame, label_sequence, tracklet_label
from .net import NetConfig
from .train import TrainConfig, predict_assignments, train

log = logging.getLogger(__name__)

GRID_PRESETS = ("B", "B+C", "B+G", "B+C+G")


# --- metrics reports ------------------------------------------------------------

def frame_scores(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], null: int):
    if len(pred) != len(gt):
        raise ValueError(f"frame count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    acc = np.array([accuracy(p, g) for p, g in zip(pred, gt)])
    f1 = np.array([f1_frame(p, g, null) for p, g in zip(pred, gt)])
    return acc, f1


def eval_report(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], null: int) -> dict:
    """Mean and population std over frames of accuracy and F1, in percent."""
    acc, f1 = frame_scores(pred, gt, null)
    if len(acc) == 0:
        raise ValueError("no frames to evaluate")
    return {
        "frames": int(len(acc)),
        "acc_mean": 100 * float(acc.mean()), "acc_std": 100 * float(acc.std()),
        "f1_mean": 100 * float(f1.mean()), "f1_std": 100 * float(f1.std()),
    }


def cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def render_report(rep: dict) -> str:
    rows = [["Acc.", "F1"], [cell(rep["acc_mean"], rep["acc_std"]), cell(rep["f1_mean"], rep["f1_std"])]]
    return render_table(rows)


def render_table(rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned fixed-width text table; the first row is the header."""
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(rows[0]), sep] + [line(r) for r in rows[1:]])


def evaluate_frames(params, cfg: NetConfig, frames: Sequence[Frame], mode: str = "greedy") -> dict:
    preds = [decode_frame(A, mode) for A in predict_assignments(params, cfg, frames)]
    return eval_report(preds, [f.labels for f in frames], cfg.n_labels)


# --- shared setup -------------------------------------------------------------------

@dataclass
class DeskSetup:
    """Body, layout, network size and training recipe shared by a grid."""

    layout_spec: object = "desk12"  # preset name, marker-name list or layout.json path
    net: dict = field(default_factory=lambda: dict(d_model=32, heads=4, layers=3, feature_width=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 3000
    n_val: int = 300
    n_test: int = 500
    seed: int = 0
    workers: int = 1
    body_path: Optional[str] = None

    def __post_init__(self):
        self.body = bodymod.load_body(self.body_path)
        self.layout = bodymod.load_layout(self.layout_spec, self.body)

    def net_config(self, n_labels: Optional[int] = None) -> NetConfig:
        return NetConfig(n_labels=n_labels or self.layout.M, **self.net)

    def corpus(self, preset, n: int, seed: int, layout=None, **overrides):
        nc = noisemod.noise_config(preset, **overrides)
        return noisemod.generate_training_corpus(self.body, layout or self.layout, nc, n, seed, self.workers)

    def fit(self, preset, layout=None, **overrides):
        """Train on ``preset`` noise; returns (params, cfg, result, seconds)."""
        layout = layout or self.layout
        tr = self.corpus(preset, self.n_train, self.seed * 1000 + 1, layout, **overrides)
        va = self.corpus(preset, self.n_val, self.seed * 1000 + 2, layout, **overrides)
        cfg = self.net_config(layout.M)
        t0 = time.perf_counter()
        res = train(cfg, tr, va, self.train)
        return res.best_params, cfg, res, time.perf_counter() - t0

    def test_frames(self, preset, seed_offset: int = 3, layout=None, **overrides) -> list:
        return [f for f, _ in self.corpus(preset, self.n_test, self.seed * 1000 + seed_offset, layout, **overrides)]


# --- grids -----------------------------------------------------------------------------

def noise_grid(setup: DeskSetup, presets: Sequence[str] = GRID_PRESETS, models: Optional[dict] = None) -> list:
    """Train one model per noise preset and test it on every preset.

    ``models`` may supply already trained (params, cfg) pairs by train preset.
    """
    models = dict(models or {})
    tests = {p: setup.test_frames(p) for p in presets}
    rows = []
    for tr in presets:
        if tr not in models:
            params, cfg, _, _ = setup.fit(tr)
            models[tr] = (params, cfg)
        params, cfg = models[tr]
        for te in presets:
            rep = evaluate_frames(params, cfg, tests[te], setup.train.decode)
            rows.append({"train": tr, "test": te, **rep})
    return rows


def grid_table(rows: Sequence[dict], metric: str = "acc") -> list:
    trains = list(dict.fromkeys(r["train"] for r in rows))
    tests = list(dict.fromkeys(r["test"] for r in rows))
    look = {(r["train"], r["test"]): r for r in rows}
    out = [["train \\ test"] + tests]
    for tr in trains:
        out.append([tr] + [cell(look[tr, te][metric + "_mean"], look[tr, te][metric + "_std"]) for te in tests])
    return out


def occlusion_sweep(setup: DeskSetup, params, cfg: NetConfig, counts: Sequence[int] = range(6),
                    ghost_preset_count: Optional[int] = 5) -> list:
    """Accuracy with exactly ``k`` occlusions per frame, plus ``k`` occlusions with ghosts."""
    rows = []
    conds = [(k, 0) for k in counts]
    if ghost_preset_count is not None:
        conds.append((ghost_preset_count, 3))
    for k, g in conds:
        frames = setup.test_frames("B", 4, exact_occlusions=k, max_ghosts=g)
        rep = evaluate_frames(params, cfg, frames, setup.train.decode)
        rows.append({"occlusions": k, "ghosts": "G" if g else "", **rep})
    return rows


def _sequence_scores(params, cfg, seq: MoCapSequence, mode: str):
    per_frame, _ = label_sequence(params, cfg, seq, mode)
    tracked, flagged = tracklet_label(per_frame, [f.tracklet_ids for f in seq.frames], cfg.n_labels)
    gt = [f.labels for f in seq.frames]
    return per_frame, tracked, gt, flagged


def tracklet_comparison(setup: DeskSetup, params, cfg: NetConfig, n_sequences: int = 5,
                        duration_s: float = 10.0, preset: str = "B+C+G", n_breaks: int = 0,
                        occlusion_hold: int = 30) -> list:
    """Per-frame against tracklet-majority accuracy on synthetic test sequences."""
    nc = noisemod.noise_config(preset, occlusion_hold=occlusion_hold)
    rows = []
    for s in range(n_sequences):
        seq = noisemod.generate_sequence(setup.body, setup.layout, nc, duration_s, 30.0,
                                         seed=setup.seed * 1000 + 100 + s, n_breaks=n_breaks)
        per_frame, tracked, gt, flagged = _sequence_scores(params, cfg, seq, setup.train.decode)
        a = eval_report(per_frame, gt, cfg.n_labels)
        b = eval_report(tracked, gt, cfg.n_labels)
        rows.append({"sequence": s, "frames": len(seq), "min_tracklet": min_tracklet_length(seq),
                     "per_frame_acc": a["acc_mean"], "tracklet_acc": b["acc_mean"],
                     "per_frame_f1": a["f1_mean"], "tracklet_f1": b["f1_mean"], "flagged": len(flagged)})
    return rows


def tracklet_lengths(seq: MoCapSequence, null: Optional[int] = None) -> dict:
    """Frames per tracklet id; ghost points (label ``null``) are skipped when labels exist."""
    counts: dict = {}
    for f in seq.frames:
        if f.tracklet_ids is None:
            continue
        for k, tid in enumerate(f.tracklet_ids.tolist()):
            if tid < 0 or (null is not None and f.labels is not None and f.labels[k] == null):
                continue
            counts[tid] = counts.get(tid, 0) + 1
    return counts


def min_tracklet_length(seq: MoCapSequence) -> int:
    null = seq.label_set.null if seq.label_set is not None else None
    lengths = tracklet_lengths(seq, null)
    return min(lengths.values()) if lengths else 0


def layout_robustness(setup: DeskSetup, superset=bodymod.SUPERSET20, subset=bodymod.DESK12,
                      preset: str = "B") -> list:
    """Train on a marker superset, then label data captured with a subset layout.

    Subset frames carry superset label indices so predictions of markers the
    subset lacks count as errors.
    """
    sup = bodymod.make_layout(setup.body, superset)
    params, cfg, _, _ = setup.fit(preset, layout=sup)
    sub_idx = np.array([sup.label_set.index(n) for n in subset])
    rows = []
    for name, lay, remap in (("superset", sup, None), ("subset", sup.subset(subset), sub_idx)):
        frames = setup.test_frames(preset, 5, layout=lay)
        if remap is not None:
            frames = [f.with_labels(np.where(f.labels == len(subset), sup.M, remap[np.minimum(f.labels, len(subset) - 1)]))
                      for f in frames]
        rep = evaluate_frames(params, cfg, frames, setup.train.decode)
        rows.append({"test_layout": name, "markers": lay.M, **rep})
    return rows


# --- attention span --------------------------------------------------------------------

def canonical_distances(body, layout) -> np.ndarray:
    """Pairwise marker distances (M, M) on the rest pose with mean shape."""
    surf = bodymod.skin(body, bodymod.Pose.identity(body.n_joints))
    pts = bodymod.place_virtual_markers(surf, layout)
    return np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)


def span_from_weights(W: np.ndarray, D: np.ndarray) -> float:
    """Mean over query markers of the attention-weighted distance to key markers.

    Rows of ``W`` are rescaled to sum to one first: a max over heads can hold
    more than unit mass per row, and the span should stay a mean distance.
    """
    W = np.asarray(W, dtype=np.float64)
    mass = W.sum(axis=1, keepdims=True)
    W = np.divide(W, mass, out=np.zeros_like(W), where=mass > 0)
    return float(np.mean(np.sum(W * D, axis=1)))


def attention_span(params, cfg: NetConfig, frames: Sequence[Frame], D: np.ndarray) -> list:
    """Per-layer span in metres.

    For each layer the per-head maximum attention weight is averaged over
    frames in label order (label pairs absent from a frame do not count),
    then weighted by ``D`` as in ``span_from_weights``. Clean frames are the
    intended input.
    """
    from .net import forward

    if not frames:
        raise ValueError("attention span needs at least one frame")
    M = cfg.n_labels
    acc = np.zeros((cfg.layers, M, M))
    cnt = np.zeros((M, M))
    for f in frames:
        if f.labels is None:
            raise ValueError("attention span needs labelled frames")
        if f.n == 0:
            continue
        _, diag = forward(params, cfg, f, keep_attention=True)
        real = np.where(f.labels != M)[0]
        lab = f.labels[real]
        for i, att in enumerate(diag["attention"]):
            w = att.max(axis=0)[np.ix_(real, real)]
            acc[i][np.ix_(lab, lab)] += w
        cnt[np.ix_(lab, lab)] += 1
    mean = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return [span_from_weights(mean[i], D) for i in range(cfg.layers)]
