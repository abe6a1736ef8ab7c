"""Corrupting clean virtual markers into realistic point clouds.

Every stage takes an explicit ``numpy.random.Generator``; corpus builders
derive one child generator per frame from ``(seed, frame_index)`` so the
output does not depend on evaluation order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .body import (MarkerLayout, Pose, SurrogateBody, place_virtual_markers, sample_motion,
                   sample_pose, sample_shape, skin)
from .core import Frame, MoCapSequence


@dataclass(frozen=True)
class NoiseConfig:
    max_occlusions: int = 0
    max_ghosts: int = 0
    jitter: bool = True
    noise_sigma: Union[float, dict] = 0.005  # metres; scalar or {label: sigma}
    rotation_augment: bool = True
    permute: bool = True
    shape_sigma: float = 1.0
    pose_amplitude: float = 1.0
    ghost_mode: str = "gaussian"  # or "extreme"
    exact_occlusions: Optional[int] = None
    occlusion_hold: int = 10  # frames an occlusion set persists inside sequences
    seed: int = 0

    def __post_init__(self):
        if self.max_occlusions < 0 or self.max_ghosts < 0:
            raise ValueError("noise maxima must be non-negative")
        sig = self.noise_sigma.values() if isinstance(self.noise_sigma, dict) else [self.noise_sigma]
        if any(s < 0 for s in sig):
            raise ValueError("noise scales must be non-negative")
        if self.ghost_mode not in ("gaussian", "extreme"):
            raise ValueError(f"unknown ghost mode {self.ghost_mode!r}")

    def sigma_table(self, layout: MarkerLayout) -> np.ndarray:
        if isinstance(self.noise_sigma, dict):
            return np.array([self.noise_sigma[n] for n in layout.label_set.names], dtype=np.float64)
        return np.full(layout.M, float(self.noise_sigma))

    def to_json(self) -> dict:
        return asdict(self)


PRESETS = {
    "off": dict(jitter=False, noise_sigma=0.0, rotation_augment=False, shape_sigma=0.0),
    "B": dict(),
    "B+C": dict(max_occlusions=5),
    "B+G": dict(max_ghosts=3),
    "B+C+G": dict(max_occlusions=5, max_ghosts=3),
    "extreme": dict(max_occlusions=5, max_ghosts=60, ghost_mode="extreme"),
}


def noise_config(spec: Union[str, dict, NoiseConfig, None] = None, **overrides) -> NoiseConfig:
    """Build a config from a preset name, a dict (optionally with ``preset``), or a path."""
    if isinstance(spec, NoiseConfig):
        return replace(spec, **overrides)
    if spec is None:
        spec = {}
    if isinstance(spec, str):
        if spec in PRESETS:
            spec = {"preset": spec}
        else:
            spec = json.loads(Path(spec).read_text())
    spec = dict(spec)
    base = dict(PRESETS[spec.pop("preset", "B")])
    base.update(spec)
    base.update(overrides)
    return NoiseConfig(**base)


# --- individual stages -----------------------------------------------------

def jitter_layout(layout: MarkerLayout, one_ring: list, rng: np.random.Generator) -> MarkerLayout:
    """Move each anchor to a uniform pick from itself plus its 1-ring."""
    new = layout.vertex_ids.copy()
    for m, v in enumerate(layout.vertex_ids):
        ring = one_ring[v]
        k = rng.integers(len(ring) + 1)
        if k < len(ring):
            new[m] = ring[k]
    return MarkerLayout(layout.label_set, new, layout.offsets)


def rotate_globally(pose: Pose, rng: Optional[np.random.Generator] = None,
                    angle: Optional[float] = None) -> Pose:
    """Compose a yaw about the vertical axis onto the root orientation."""
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    root = Rotation.from_euler("z", angle) * Rotation.from_rotvec(pose.theta[0])
    theta = pose.theta.copy()
    theta[0] = root.as_rotvec()
    return Pose(theta, pose.gamma, pose.beta)


def positional_noise(markers: np.ndarray, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (len(markers),))
    return markers + rng.standard_normal(markers.shape) * scale[:, None]


def _fresh_ids(frame: Frame, count: int) -> Optional[np.ndarray]:
    if frame.tracklet_ids is None:
        return None
    start = frame.tracklet_ids.max() + 1 if frame.n else 0
    return np.arange(start, start + count)


def ghost_samples(points: np.ndarray, count: int, rng: np.random.Generator,
                  mode: str = "gaussian") -> np.ndarray:
    center = np.median(points, axis=0)
    std = float(np.sqrt(np.mean(np.var(points, axis=0))))
    if mode == "gaussian":
        return center + std * rng.standard_normal((count, 3))
    # extreme: per ghost, one of marker-fitted Gaussian, uniform [-2, 2] m cube,
    # or an anisotropic Gaussian with a random centre in the cube
    kind = rng.integers(3, size=count)
    out = np.empty((count, 3))
    for i, k in enumerate(kind):
        if k == 0:
            out[i] = center + std * rng.standard_normal(3)
        elif k == 1:
            out[i] = center + rng.uniform(-2.0, 2.0, size=3)
        else:
            mean = center + rng.uniform(-2.0, 2.0, size=3)
            a = rng.normal(0.0, 0.3, size=(3, 3))
            out[i] = mean + a @ rng.standard_normal(3)
    return out


def add_ghost_points(frame: Frame, count: int, rng: np.random.Generator, null: int,
                     mode: str = "gaussian") -> Frame:
    """Append ``count`` ghost points labelled null."""
    if frame.n == 0:
        raise ValueError("empty frame")
    if count == 0:
        return frame
    ghosts = ghost_samples(frame.points, count, rng, mode)
    labels = None if frame.labels is None else np.concatenate([frame.labels, np.full(count, null)])
    ids = _fresh_ids(frame, count)
    tracks = None if ids is None else np.concatenate([frame.tracklet_ids, ids])
    return Frame(np.vstack([frame.points, ghosts]), tracks, labels, frame.occluded)


def occlude_markers(frame: Frame, count: int, rng: np.random.Generator,
                    which: Optional[np.ndarray] = None) -> Frame:
    """Drop ``count`` distinct points; their labels are recorded in ``occluded``."""
    if count > frame.n:
        raise ValueError(f"cannot occlude {count} of {frame.n} points")
    if count == 0 and which is None:
        return frame
    drop = rng.choice(frame.n, size=count, replace=False) if which is None else np.asarray(which)
    keep = np.setdiff1d(np.arange(frame.n), drop)
    occl = frame.occluded if frame.occluded is not None else np.zeros(0, dtype=np.int64)
    if frame.labels is not None:
        occl = np.concatenate([occl, np.sort(frame.labels[drop])])
    out = frame.take(keep)
    return Frame(out.points, out.tracklet_ids, out.labels, occl)


def permute_points(frame: Frame, rng: np.random.Generator) -> tuple[Frame, np.ndarray]:
    """Shuffle points; ``frame.take(np.argsort(perm))`` undoes it."""
    perm = rng.permutation(frame.n)
    return frame.take(perm), perm


def break_tracklets(seq: MoCapSequence, n_breaks: int, rng: np.random.Generator) -> MoCapSequence:
    """Split tracklets at random (tracklet, frame) occurrences.

    Points of the chosen tracklet at and after the chosen frame move to a
    fresh id. Positions are never touched.
    """
    if n_breaks == 0:
        return seq
    if any(f.tracklet_ids is None for f in seq.frames):
        raise ValueError("sequence carries no tracklet ids")
    ids = [f.tracklet_ids.copy() for f in seq.frames]
    next_id = max((int(i.max()) for i in ids if len(i)), default=-1) + 1
    for _ in range(n_breaks):
        occurrences = [(t, int(k)) for t, frame_ids in enumerate(ids) for k in frame_ids]
        if not occurrences:
            break
        t0, track = occurrences[rng.integers(len(occurrences))]
        for t in range(t0, len(ids)):
            ids[t][ids[t] == track] = next_id
        next_id += 1
    frames = [Frame(f.points, i, f.labels, f.occluded) for f, i in zip(seq.frames, ids)]
    return replace(seq, frames=tuple(frames))


# --- full pipelines ----------------------------------------------------------

def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def synth_frame(body: SurrogateBody, layout: MarkerLayout, noise: NoiseConfig,
                rng: np.random.Generator) -> Frame:
    """One independent training frame: shape, pose, jitter, skin, markers,
    rotation, positional noise, occlusion, ghosts, permutation."""
    beta = sample_shape(rng, noise.shape_sigma)
    pose = sample_pose(body, rng, noise.pose_amplitude, beta)
    lay = jitter_layout(layout, body.one_ring(), rng) if noise.jitter else layout
    if noise.rotation_augment:
        pose = rotate_globally(pose, rng)
    markers = place_virtual_markers(skin(body, pose), lay)
    markers = positional_noise(markers, noise.sigma_table(layout), rng)
    frame = Frame(markers, labels=np.arange(layout.M), occluded=np.zeros(0, dtype=np.int64))
    return _corrupt(frame, layout, noise, rng)


def _corrupt(frame: Frame, layout: MarkerLayout, noise: NoiseConfig, rng: np.random.Generator,
             occlude: Optional[np.ndarray] = None) -> Frame:
    if occlude is None:
        n_occ = noise.exact_occlusions if noise.exact_occlusions is not None \
            else rng.integers(noise.max_occlusions + 1)
        frame = occlude_markers(frame, min(int(n_occ), frame.n), rng)
    else:
        frame = occlude_markers(frame, len(occlude), rng, which=occlude)
    n_ghost = rng.integers(noise.max_ghosts + 1)
    if n_ghost and frame.n:
        # ghost statistics come from the visible markers; none visible, no ghosts
        frame = add_ghost_points(frame, int(n_ghost), rng, layout.M, noise.ghost_mode)
    if noise.permute:
        frame, _ = permute_points(frame, rng)
    return frame


def generate_training_corpus(body: SurrogateBody, layout: MarkerLayout, noise: NoiseConfig,
                             n_frames: int, seed: Optional[int] = None, workers: int = 1) -> list:
    """Independent noisy frames paired with their ground-truth augmented assignment."""
    from .train import build_gt_assignment

    seed = noise.seed if seed is None else seed

    def one(i):
        frame = synth_frame(body, layout, noise, frame_rng(seed, i))
        return frame, build_gt_assignment(frame.labels, frame.occluded, layout.M)

    return parallel_map(one, range(n_frames), workers)


def generate_sequence(body: SurrogateBody, layout: MarkerLayout, noise: NoiseConfig,
                      duration_s: float, rate_hz: float = 30.0, seed: int = 0,
                      n_breaks: int = 0) -> MoCapSequence:
    """A labelled test sequence with tracklet ids.

    One subject shape, marker placement and heading per sequence. Occlusion
    sets persist for ``noise.occlusion_hold`` frames; a marker that comes
    back after an occlusion gets a new tracklet id, as in passive systems.
    Ghosts are fresh one-frame tracklets.
    """
    rng = np.random.default_rng([int(seed), 0x5EC])
    beta = sample_shape(rng, noise.shape_sigma)
    poses = sample_motion(body, duration_s, rate_hz, rng_seed=rng.integers(2**32),
                          amplitude=noise.pose_amplitude, beta=beta)
    lay = jitter_layout(layout, body.one_ring(), rng) if noise.jitter else layout
    yaw = rng.uniform(0.0, 2 * np.pi) if noise.rotation_augment else 0.0
    sigma = noise.sigma_table(layout)

    track_of = np.arange(layout.M)
    next_id = layout.M
    occluded_prev = np.zeros(0, dtype=np.int64)
    occl = np.zeros(0, dtype=np.int64)
    frames = []
    for t, pose in enumerate(poses):
        if t % max(1, noise.occlusion_hold) == 0:
            n_occ = noise.exact_occlusions if noise.exact_occlusions is not None \
                else rng.integers(noise.max_occlusions + 1)
            occl = np.sort(rng.choice(layout.M, size=min(int(n_occ), layout.M), replace=False))
        returning = np.setdiff1d(occluded_prev, occl)
        for m in returning:
            track_of[m] = next_id
            next_id += 1
        occluded_prev = occl

        markers = place_virtual_markers(skin(body, rotate_globally(pose, angle=yaw)), lay)
        markers = positional_noise(markers, sigma, rng)
        frame = Frame(markers, track_of.copy(), np.arange(layout.M), np.zeros(0, dtype=np.int64))
        frame = _corrupt(frame, layout, noise, rng, occlude=occl)
        ghost = frame.labels == layout.M
        if ghost.any():
            ids = frame.tracklet_ids.copy()
            ids[ghost] = np.arange(next_id, next_id + ghost.sum())
            next_id += int(ghost.sum())
            frame = Frame(frame.points, ids, frame.labels, frame.occluded)
        frames.append(frame)

    seq = MoCapSequence(tuple(frames), rate_hz, layout.label_set)
    return break_tracklets(seq, n_breaks, rng)


def parallel_map(fn, items, workers: int = 1) -> list:
    """Order-preserving map; results are identical for any worker count."""
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
