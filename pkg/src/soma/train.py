"""Ground truth, weighted loss, optimisation loop and gradient checking."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import Frame, accuracy, f1_frame
from .net import NetConfig, forward_batch, init_params
from .ot import augment, marginals, sinkhorn_log

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_acc", "val_f1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    c_l: float = 1.0
    c_reg: float = 5e-5
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    early_stop_patience: int = 8
    max_epochs: int = 100
    batch_size: int = 32
    weight_cap: float = 100.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    decode: str = "greedy"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.c_l < 0 or self.c_reg < 0 or self.batch_size <= 0:
            raise ValueError("training hyper-parameters must be non-negative")
        if self.weight_cap <= 0:
            raise ValueError("weight_cap must be positive")

    def to_json(self) -> dict:
        return asdict(self)


# --- ground truth and weights ------------------------------------------------

def build_gt_assignment(labels, occluded, M: int) -> np.ndarray:
    """Binary (n+1, M+1) target: point rows hit their label or the null column,
    labels absent from the frame hit the dustbin row. Corner stays 0."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    real = labels[labels != M]
    if len(np.unique(real)) != len(real):
        raise ValueError("duplicate non-null ground-truth label in one frame")
    if np.any((labels < 0) | (labels > M)):
        raise ValueError("label index out of range")
    gt = np.zeros((n + 1, M + 1))
    gt[np.arange(n), labels] = 1.0
    missing = np.setdiff1d(np.arange(M), real)
    if occluded is not None and len(np.setdiff1d(np.asarray(occluded), missing)):
        raise ValueError("a label marked occluded is present in the frame")
    gt[n, missing] = 1.0
    return gt


def class_frequencies(gt_batch: Sequence[np.ndarray]) -> tuple:
    """Fractions of point rows labelled null and of labels sent to the dustbin row."""
    null_hits = sum(g[:-1, -1].sum() for g in gt_batch)
    rows = sum(g.shape[0] - 1 for g in gt_batch)
    dust_hits = sum(g[-1, :-1].sum() for g in gt_batch)
    cols = sum(g.shape[1] - 1 for g in gt_batch)
    return (null_hits / rows if rows else 0.0), (dust_hits / cols if cols else 0.0)


def _reciprocal(freq: float, cap: float) -> float:
    if freq <= 0:
        return 1.0  # no target mass there; weight is immaterial
    return min(1.0 / freq, cap)


def class_weights(gt_batch: Sequence[np.ndarray], cap: float = 100.0) -> list:
    """Per-frame weight matrices: null column and dustbin row get 1/frequency."""
    if len(gt_batch) == 0:
        raise ValueError("empty batch")
    f_null, f_dust = class_frequencies(gt_batch)
    w_null, w_dust = _reciprocal(f_null, cap), _reciprocal(f_dust, cap)
    out = []
    for g in gt_batch:
        w = np.ones_like(g)
        w[:-1, -1] = w_null
        w[-1, :-1] = w_dust
        out.append(w)
    return out


# --- loss --------------------------------------------------------------------

def assignment_nll(A_aug, gt, W) -> ad.Tensor:
    """-sum(W * gt * log A) / sum(gt), log clamped at 1e-12."""
    Av = ad._val(A_aug)
    gt = np.asarray(gt, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if Av.shape != gt.shape or gt.shape != W.shape:
        raise ValueError(f"shape mismatch: {Av.shape}, {gt.shape}, {W.shape}")
    mass = gt.sum()
    if mass <= 0:
        raise ValueError("ground truth carries no mass")
    safe = np.maximum(Av, LOG_FLOOR)
    wg = W * gt
    value = -np.sum(wg * np.log(safe)) / mass

    def back(g):
        return (np.where(Av >= LOG_FLOOR, -g * wg / (safe * mass), 0.0),)
    return ad._make(np.array(value), (A_aug,), back)


def regulariser(params: dict) -> ad.Tensor:
    terms = [ad.sumsq(p) for p in params.values()]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def loss(A_aug, gt, W, params: dict, c_l: float = 1.0, c_reg: float = 5e-5) -> ad.Tensor:
    return ad.add(ad.scale(assignment_nll(A_aug, gt, W), c_l), ad.scale(regulariser(params), c_reg))


def pad_targets(gts: Sequence[np.ndarray], weights: Sequence[np.ndarray], n_max: int):
    """Stack per-frame (n_i+1, M+1) targets into (B, n_max+1, M+1); dustbin row last."""
    B, C = len(gts), gts[0].shape[1]
    G = np.zeros((B, n_max + 1, C))
    Wt = np.ones((B, n_max + 1, C))
    for b, (g, w) in enumerate(zip(gts, weights)):
        n = g.shape[0] - 1
        G[b, :n], G[b, n_max] = g[:n], g[n]
        Wt[b, :n], Wt[b, n_max] = w[:n], w[n]
    return G, Wt


def augmented_assignment(params: dict, cfg: NetConfig, frames: Sequence[Frame], keep_attention=False):
    """Batched forward through scores, dustbin augmentation and Sinkhorn."""
    S, mask, counts, att = forward_batch(params, cfg, frames, keep_attention)
    log_mu, log_nu = marginals(counts, S.shape[1], cfg.n_labels)
    A = sinkhorn_log(augment(S, params["alpha"]), log_mu, log_nu, cfg.sinkhorn_iters)
    return A, counts, att


def batch_loss(params, cfg, frames, gts, tc: TrainConfig) -> ad.Tensor:
    A, counts, _ = augmented_assignment(params, cfg, frames)
    G, Wt = pad_targets(gts, class_weights(gts, tc.weight_cap), int(counts.max()))
    return loss(A, G, Wt, params, tc.c_l, tc.c_reg)


def loss_and_grads(params, cfg, frames, gts, tc: TrainConfig):
    names = list(params)
    with ad.Tape() as tape:
        L = batch_loss(params, cfg, frames, gts, tc)
    grads = tape.backward(L, [params[k] for k in names])
    return float(L.value), dict(zip(names, grads))


# --- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.value) for k, p in params.items()},
                   {k: np.zeros_like(p.value) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.value = p.value - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)


# --- evaluation ------------------------------------------------------------------

def predict_assignments(params, cfg, frames: Sequence[Frame], batch_size: int = 256) -> list:
    """Point-to-label assignment A (n_t, M+1) for every frame."""
    out = []
    for s in range(0, len(frames), batch_size):
        chunk = frames[s: s + batch_size]
        A, counts, _ = augmented_assignment(params, cfg, chunk)
        for b, n in enumerate(counts):
            out.append(A.value[b, :n])
    return out


def evaluate(params, cfg, frames: Sequence[Frame], mode: str = "greedy") -> tuple:
    """Mean per-frame accuracy and F1 on labelled frames."""
    from .labeler import decode_frame

    accs, f1s = [], []
    for f, A in zip(frames, predict_assignments(params, cfg, frames)):
        pred = decode_frame(A, mode)
        accs.append(accuracy(pred, f.labels))
        f1s.append(f1_frame(pred, f.labels, cfg.n_labels))
    return float(np.mean(accs)), float(np.mean(f1s))


# --- training loop -----------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    opt: AdamState
    epoch: int = 0
    lr: float = 1e-3
    best_acc: float = -1.0
    best_epoch: int = -1
    plateau_bad: int = 0
    stop_bad: int = 0
    history: list = field(default_factory=list)
    best_params: Optional[dict] = None


@dataclass
class TrainResult:
    best_params: dict
    last: TrainState
    history: list


def _copy_params(params: dict) -> dict:
    return {k: ad.param(p.value.copy()) for k, p in params.items()}


def train(cfg: NetConfig, train_set, val_set, tc: TrainConfig, state: Optional[TrainState] = None,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Adam with plateau learning-rate decay and early stopping on validation accuracy.

    ``train_set``/``val_set`` are sequences of (Frame, gt) pairs. Passing a
    ``state`` (from a checkpoint) resumes from its epoch. Batch order for
    epoch ``e`` comes from ``default_rng([seed, e])``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation corpora must be non-empty")
    if state is None:
        params = init_params(cfg)
        state = TrainState(params, AdamState.zeros(params), lr=tc.lr)
    frames = [f for f, _ in train_set]
    gts = [g for _, g in train_set]
    val_frames = [f for f, _ in val_set]

    while state.epoch < tc.max_epochs and state.stop_bad < tc.early_stop_patience:
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, state.epoch]).permutation(len(frames))
        losses = []
        for s in range(0, len(order), tc.batch_size):
            idx = order[s: s + tc.batch_size]
            where = f"epoch {state.epoch}, batch {s // tc.batch_size}, lr {state.lr:g}"
            try:
                value, grads = loss_and_grads(state.params, cfg, [frames[i] for i in idx],
                                              [gts[i] for i in idx], tc)
            except ValueError as exc:
                if "finite" not in str(exc):
                    raise
                raise TrainingDiverged(f"non-finite values at {where}: {exc}") from exc
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss/gradient at {where}, loss {value}")
            adam_step(state.params, grads, state.opt, state.lr, tc.betas, tc.adam_eps)
            losses.append(value)

        val_acc, val_f1 = evaluate(state.params, cfg, val_frames, tc.decode)
        row = {"epoch": state.epoch, "lr": state.lr, "train_loss": float(np.mean(losses)),
               "val_acc": val_acc, "val_f1": val_f1}
        state.history.append(row)
        log.info("epoch %d lr %.1e loss %.4f val_acc %.4f val_f1 %.4f (%.1fs)", state.epoch, state.lr,
                 row["train_loss"], val_acc, val_f1, time.perf_counter() - t0)

        if val_acc > state.best_acc:
            state.best_acc, state.best_epoch = val_acc, state.epoch
            state.best_params = _copy_params(state.params)
            state.plateau_bad = state.stop_bad = 0
        else:
            state.plateau_bad += 1
            state.stop_bad += 1
            if state.plateau_bad >= tc.plateau_patience:
                state.lr *= tc.plateau_factor
                state.plateau_bad = 0
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)

    best = state.best_params if state.best_params is not None else _copy_params(state.params)
    return TrainResult(best, state, state.history)


# --- gradient verification ----------------------------------------------------------

TINY = dict(d_model=8, heads=2, layers=2, feature_width=16, ff_width=16)


def gradient_check_problem(cfg: NetConfig, n_points: int = 5, seed: int = 0):
    """A random single-frame problem with a real label, a ghost and an occlusion."""
    rng = np.random.default_rng(seed)
    M = cfg.n_labels
    pts = rng.normal(0.0, 0.3, size=(n_points, 3))
    labels = np.full(n_points, M)
    n_real = min(M - 1, n_points - 1)
    labels[:n_real] = rng.permutation(M)[:n_real]
    frame = Frame(pts, labels=labels)
    gt = build_gt_assignment(labels, None, M)
    return frame, gt


def gradient_check(cfg: NetConfig, eps: float = 1e-5, seed: int = 0, tc: Optional[TrainConfig] = None,
                   params: Optional[dict] = None) -> dict:
    """Per-tensor max relative error of tape gradients vs central differences.

    Relative error of a tensor is max|analytic - numeric| / max|numeric|.
    """
    tc = tc or TrainConfig()
    params = params or init_params(cfg, seed)
    frame, gt = gradient_check_problem(cfg, seed=seed)
    _, analytic = loss_and_grads(params, cfg, [frame], [gt], tc)

    def value():
        return float(batch_loss(params, cfg, [frame], [gt], tc).value)

    report = {}
    for name, p in params.items():
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)  # view
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * eps)
        denom = max(np.abs(num).max(), 1e-12)
        report[name] = float(np.abs(analytic[name] - num).max() / denom)
    return report
