"""Reading and writing point-cloud files, CSV sidecars and manifests.

Point clouds use JSON Lines. Line 0 is a header::

    {"format": "mpc-jsonl/1", "rate_hz": 30, "label_set": ["C7", ...], "config_hash": "..."}

and every further line is one frame::

    {"t": 0, "points": [[x, y, z], ...], "tracklets": [3, null, ...], "labels": ["C7", null, ...]}

``labels`` is optional; ``null`` marks a ghost (or an unknown tracklet).

Ground-truth sidecars (``*.gt.jsonl``) store each frame's augmented
assignment as sparse ``[row, col, 1]`` triplets: row ``n_t`` is the unmatched
row, column ``M`` the null column.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Frame, LabelSet, MoCapSequence

MPC_FORMAT = "mpc-jsonl/1"
GT_FORMAT = "mpc-gt/1"


class FormatError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def frame_record(t: int, frame: Frame, label_set: LabelSet, with_labels: bool = True) -> dict:
    rec = {"t": int(t), "points": frame.points.tolist()}
    if frame.tracklet_ids is None:
        rec["tracklets"] = [None] * frame.n
    else:
        rec["tracklets"] = [None if i < 0 else int(i) for i in frame.tracklet_ids.tolist()]
    if with_labels and frame.labels is not None:
        rec["labels"] = label_set.decode(frame.labels)
    return rec


def write_mpc(path, seq: MoCapSequence, label_set: Optional[LabelSet] = None, with_labels: bool = True,
              config_hash: Optional[str] = None) -> None:
    label_set = label_set or seq.label_set
    if label_set is None:
        raise ValueError("a label set is needed to write an mpc file")
    header = {"format": MPC_FORMAT, "rate_hz": seq.rate_hz, "label_set": list(label_set.names)}
    if config_hash:
        header["config_hash"] = config_hash
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for t, frame in enumerate(seq.frames):
            fh.write(_dumps(frame_record(t, frame, label_set, with_labels)) + "\n")


def _parse_frame(rec: dict, label_set: LabelSet, where: str) -> Frame:
    for key in ("t", "points", "tracklets"):
        if key not in rec:
            raise FormatError(f"{where}: missing field {key!r}")
    pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3) if rec["points"] else np.zeros((0, 3))
    if len(rec["tracklets"]) != len(pts):
        raise FormatError(f"{where}: tracklets length differs from points")
    ids = np.array([-1 if i is None else int(i) for i in rec["tracklets"]], dtype=np.int64)
    labels = None
    if "labels" in rec:
        if len(rec["labels"]) != len(pts):
            raise FormatError(f"{where}: labels length differs from points")
        unknown = [x for x in rec["labels"] if x is not None and x not in label_set.names]
        if unknown:
            raise FormatError(f"{where}: unknown label {unknown[0]!r}")
        labels = label_set.encode(rec["labels"])
    return Frame(pts, ids, labels)


def read_mpc(path) -> MoCapSequence:
    """Parse and validate an mpc-jsonl file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such point-cloud file: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: bad header ({exc})") from None
    if header.get("format") != MPC_FORMAT:
        raise FormatError(f"{path}: expected format {MPC_FORMAT!r}, got {header.get('format')!r}")
    label_set = LabelSet(tuple(header.get("label_set", ())))
    frames = []
    for k, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{k}: {exc}") from None
        frame = _parse_frame(rec, label_set, f"{path}:{k}")
        if rec["t"] != len(frames):
            raise FormatError(f"{path}:{k}: frame index {rec['t']} out of order")
        frames.append(frame)
    meta = {k: v for k, v in header.items() if k not in ("format", "rate_hz", "label_set")}
    return MoCapSequence(tuple(frames), float(header.get("rate_hz", 30.0)), label_set, meta)


def write_gt(path, seq: MoCapSequence, label_set: Optional[LabelSet] = None,
             config_hash: Optional[str] = None) -> None:
    from .train import build_gt_assignment

    label_set = label_set or seq.label_set
    header = {"format": GT_FORMAT, "rate_hz": seq.rate_hz, "label_set": list(label_set.names)}
    if config_hash:
        header["config_hash"] = config_hash
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for t, f in enumerate(seq.frames):
            if f.labels is None:
                raise ValueError("ground truth needs labelled frames")
            gt = build_gt_assignment(f.labels, None, label_set.M)
            rows, cols = np.nonzero(gt)
            trip = [[int(i), int(j), 1] for i, j in zip(rows, cols)]
            fh.write(_dumps({"t": t, "n": f.n, "triplets": trip}) + "\n")


def read_gt(path) -> tuple[LabelSet, list]:
    """Label set and per-frame dense (n_t+1, M+1) ground-truth matrices."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    header = json.loads(lines[0]) if lines else {}
    if header.get("format") != GT_FORMAT:
        raise FormatError(f"{path}: expected format {GT_FORMAT!r}")
    label_set = LabelSet(tuple(header["label_set"]))
    out = []
    for k, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        n = int(rec["n"])
        gt = np.zeros((n + 1, label_set.M + 1))
        for i, j, v in rec["triplets"]:
            if not (0 <= i <= n and 0 <= j <= label_set.M):
                raise FormatError(f"{path}:{k}: triplet ({i}, {j}) out of range")
            gt[i, j] = v
        out.append(gt)
    return label_set, out


def labels_from_gt(gt: np.ndarray) -> np.ndarray:
    """Per-point labels from the real rows of a dense ground-truth matrix."""
    return np.argmax(gt[:-1], axis=1)


def read_labelled(path) -> tuple[LabelSet, list]:
    """Per-frame label arrays from either a labelled mpc file or a gt sidecar."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        fmt = json.loads(first).get("format")
    except (json.JSONDecodeError, AttributeError):
        raise FormatError(f"{path}: bad header") from None
    if fmt == GT_FORMAT:
        label_set, gts = read_gt(path)
        return label_set, [labels_from_gt(g) for g in gts]
    seq = read_mpc(path)
    if any(f.labels is None for f in seq.frames):
        raise FormatError(f"{path}: frames without labels")
    return seq.label_set, [f.labels for f in seq.frames]


def strip_labels(seq: MoCapSequence) -> MoCapSequence:
    frames = tuple(Frame(f.points, f.tracklet_ids) for f in seq.frames)
    return MoCapSequence(frames, seq.rate_hz, seq.label_set, dict(seq.meta))


# --- CSV ---------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path, fields: Sequence[str], rows: Sequence[dict], config_hash: Optional[str] = None) -> None:
    """CSV with an optional leading ``# config_sha256=...`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def read_csv(path) -> tuple[list, dict]:
    """Rows as dicts of strings, plus ``#``-comment key/values."""
    meta, body = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            else:
                body.append(line)
    return list(csv.DictReader(body)), meta


def write_confidence(path, confidences: Sequence[float], flagged: Sequence[int] = (),
                     config_hash: Optional[str] = None) -> None:
    flagged = set(flagged)
    rows = [{"t": t, "confidence": float(c), "flagged": int(t in flagged)} for t, c in enumerate(confidences)]
    write_csv(path, ("t", "confidence", "flagged"), rows, config_hash)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
