"""Stacked multi-head self-attention scorer for unordered marker points.

Pipeline per frame: median-centre, per-point embedding, ``k`` residual
self-attention blocks, a per-point feature head and a score head giving one
row of label scores per point. Frames of different sizes are batched by
padding; padded points are masked out as attention keys.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import Frame, median_center
from .ot import DEFAULT_ITERS

MASK_BIAS = -1e9


@dataclass(frozen=True)
class NetConfig:
    n_labels: int            # M, marker labels without null
    d_model: int = 125
    heads: int = 5
    layers: int = 8
    feature_width: int = 256
    ff_width: int = 0        # 0 -> 2 * d_model
    sinkhorn_iters: int = DEFAULT_ITERS
    head_activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("n_labels", "d_model", "heads", "layers", "feature_width", "sinkhorn_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the number of heads")
        if self.head_activation != "relu":
            raise ValueError("only relu is supported between the feature and score heads")

    @property
    def ff(self) -> int:
        return self.ff_width or 2 * self.d_model

    def to_json(self) -> dict:
        return asdict(self)


def param_shapes(cfg: NetConfig) -> dict:
    d = cfg.d_model
    shapes = {"embed.W": (3, d), "embed.b": (d,)}
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "qkv.W": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "out.W": (d, d), p + "out.b": (d,),
            p + "norm1.g": (d,), p + "norm1.b": (d,),
            p + "ff1.W": (d, cfg.ff), p + "ff1.b": (cfg.ff,),
            p + "ff2.W": (cfg.ff, d), p + "ff2.b": (d,),
            p + "norm2.g": (d,), p + "norm2.b": (d,),
        })
    shapes.update({
        "head.feat.W": (d, cfg.feature_width), "head.feat.b": (cfg.feature_width,),
        "head.score.W": (cfg.feature_width, cfg.n_labels), "head.score.b": (cfg.n_labels,),
        "alpha": (),
    })
    return shapes


def init_params(cfg: NetConfig, seed=None) -> dict:
    """Uniform fan-in init; norm gains 1, norm offsets 0, dustbin score 1."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params = {}
    fan_in = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".W"):
            fan_in[name[:-2]] = shape[0]
    for name, shape in param_shapes(cfg).items():
        stem = name.rsplit(".", 1)[0]
        if name == "alpha":
            val = np.array(1.0)
        elif ".norm" in name:
            val = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in[stem])
            val = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.param(val)
    return params


def prepare_batch(frames: Sequence[Frame]):
    """Median-centred padded points (B, n, 3), validity mask (B, n), counts (B,)."""
    counts = np.array([f.n for f in frames])
    if np.any(counts == 0):
        raise ValueError("empty frame")
    n = counts.max()
    pts = np.zeros((len(frames), n, 3))
    for b, f in enumerate(frames):
        centred, _ = median_center(f)
        pts[b, : f.n] = centred.points
    mask = np.arange(n)[None, :] < counts[:, None]
    return pts, mask, counts


def embed(params: dict, points) -> ad.Tensor:
    return ad.linear(points, params["embed.W"], params["embed.b"])


def attention_block(params: dict, cfg: NetConfig, x, i: int, key_mask=None, keep=None):
    """One residual self-attention block.

    Attention logits are scaled by 1/sqrt(d_model). ``keep`` collects the
    (B, h, n, n) attention weights when given a list.
    """
    p = f"blocks.{i}."
    B, n, d = x.shape
    h = cfg.heads
    dh = d // h
    qkv = ad.linear(x, params[p + "qkv.W"], params[p + "qkv.b"])
    q, k, v = (ad.transpose(ad.reshape(t, (B, n, h, dh)), (0, 2, 1, 3)) for t in ad.split_last(qkv, 3))
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    bias = None if key_mask is None else np.where(key_mask, 0.0, MASK_BIAS)[:, None, None, :]
    att = ad.softmax(logits, bias)
    if keep is not None:
        keep.append(att.value)
    mixed = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
    x = ad.layer_norm(ad.add(x, ad.linear(mixed, params[p + "out.W"], params[p + "out.b"])),
                      params[p + "norm1.g"], params[p + "norm1.b"])
    ff = ad.linear(ad.relu(ad.linear(x, params[p + "ff1.W"], params[p + "ff1.b"])),
                   params[p + "ff2.W"], params[p + "ff2.b"])
    return ad.layer_norm(ad.add(x, ff), params[p + "norm2.g"], params[p + "norm2.b"])


def scores(params: dict, cfg: NetConfig, points, mask=None, keep_attention: bool = False):
    """Raw label scores S (B, n, M) for already centred, padded points."""
    keep = [] if keep_attention else None
    x = embed(params, points)
    for i in range(cfg.layers):
        x = attention_block(params, cfg, x, i, mask, keep)
    feat = ad.relu(ad.linear(x, params["head.feat.W"], params["head.feat.b"]))
    S = ad.linear(feat, params["head.score.W"], params["head.score.b"])
    return S, keep


def forward(params: dict, cfg: NetConfig, frame: Frame, keep_attention: bool = False):
    """Scores (n_t, M) for one frame, plus per-layer attention weights when asked."""
    if frame.n == 0:
        raise ValueError("empty frame")
    pts, _, _ = prepare_batch([frame])
    S, att = scores(params, cfg, pts, None, keep_attention)
    diag = {"attention": [a[0] for a in att]} if keep_attention else {}
    return S.value[0], diag


def forward_batch(params: dict, cfg: NetConfig, frames: Sequence[Frame], keep_attention: bool = False):
    pts, mask, counts = prepare_batch(frames)
    S, att = scores(params, cfg, pts, mask, keep_attention)
    return S, mask, counts, att


def n_parameters(params: dict) -> int:
    return int(sum(p.value.size for p in params.values()))
