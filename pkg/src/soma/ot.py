"""Dustbin-augmented optimal transport normalisation (log-domain Sinkhorn).

Shapes carry optional leading batch axes. Within a padded batch, rows of
absent points get log-mass ``NEG`` so they receive no transport mass.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _make, _val

NEG = -1e30
DEFAULT_ITERS = 35


def augment(S, alpha) -> Tensor:
    """Append one dustbin row and column, both filled with the scalar ``alpha``."""
    Sv, av = _val(S), _val(alpha)
    if av.size != 1 or not np.isfinite(av).all():
        raise ValueError("dustbin score must be a finite scalar")
    if not np.isfinite(Sv).all():
        raise ValueError("scores must be finite")
    n, m = Sv.shape[-2:]
    Z = np.empty(Sv.shape[:-2] + (n + 1, m + 1))
    Z[..., :n, :m] = Sv
    Z[..., n, :] = av.item()
    Z[..., :, m] = av.item()

    def back(g):
        da = g[..., n, :].sum() + g[..., :n, m].sum()
        return g[..., :n, :m], np.reshape(da, av.shape)
    return _make(Z, (S, alpha), back)


def marginals(n_points, n_rows: int, M: int):
    """Log row/column masses.

    Rows: 1 per real point, ``M`` for the dustbin row (last); padded rows 0.
    Columns: 1 per label, ``n_t`` for the null column (last).
    """
    n_points = np.atleast_1d(np.asarray(n_points))
    B = len(n_points)
    log_mu = np.full((B, n_rows + 1), NEG)
    idx = np.arange(n_rows)
    log_mu[:, :n_rows] = np.where(idx[None, :] < n_points[:, None], 0.0, NEG)
    log_mu[:, n_rows] = np.log(M) if M > 0 else NEG
    log_nu = np.zeros((B, M + 1))
    with np.errstate(divide="ignore"):
        log_nu[:, M] = np.where(n_points > 0, np.log(np.maximum(n_points, 1)), NEG)
    return log_mu, log_nu


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sinkhorn_log(Z, log_mu=None, log_nu=None, iters: int = DEFAULT_ITERS) -> Tensor:
    """Alternate row/column log-scaling of exp(Z) toward the target marginals.

    Returns the transport plan (probabilities). Without explicit marginals
    the unpadded dustbin masses are inferred from the shape. Gradients are
    exact for the ``iters``-step operator: backward replays the iterations
    in reverse.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    Zv = _val(Z)
    if not np.isfinite(Zv).all():
        raise ValueError("scores must be finite")
    R, C = Zv.shape[-2:]
    if log_mu is None or log_nu is None:
        lm, ln = marginals([R - 1], R - 1, C - 1)
        log_mu = np.broadcast_to(lm[0], Zv.shape[:-1])
        log_nu = np.broadcast_to(ln[0], Zv.shape[:-2] + (C,))
    log_mu = np.asarray(log_mu, dtype=np.float64)
    log_nu = np.asarray(log_nu, dtype=np.float64)

    u = np.zeros(Zv.shape[:-1])
    v = np.zeros(Zv.shape[:-2] + (C,))
    us, vs = [], []
    for _ in range(iters):
        u = log_mu - _lse(Zv + v[..., None, :], axis=-1)
        v = log_nu - _lse(Zv + u[..., :, None], axis=-2)
        us.append(u)
        vs.append(v)
    P = np.exp(Zv + u[..., :, None] + v[..., None, :])

    def back(g):
        G = g * P
        dZ = G.copy()
        du = G.sum(axis=-1)
        dv = G.sum(axis=-2)
        for k in range(iters - 1, -1, -1):
            pc = _softmax(Zv + us[k][..., :, None], axis=-2)
            dZ -= dv[..., None, :] * pc
            du = du - np.sum(pc * dv[..., None, :], axis=-1)
            vprev = vs[k - 1] if k > 0 else np.zeros_like(v)
            pr = _softmax(Zv + vprev[..., None, :], axis=-1)
            dZ -= du[..., :, None] * pr
            dv = -np.sum(pr * du[..., :, None], axis=-2)
            du = np.zeros_like(du)
        return (dZ,)
    return _make(P, (Z,), back)


def drop_unmatched_row(A_aug):
    """Remove the dustbin row (unmatched labels); the null column stays."""
    return _val(A_aug)[..., :-1, :]


def normalize(S, alpha, iters: int = DEFAULT_ITERS) -> np.ndarray:
    """Scores (n, M) to the point-to-label assignment A (n, M+1)."""
    return drop_unmatched_row(sinkhorn_log(augment(S, alpha), iters=iters))


def marginal_violation(P: np.ndarray, log_mu: np.ndarray, log_nu: np.ndarray) -> float:
    mu = np.where(log_mu <= NEG / 2, 0.0, np.exp(log_mu))
    nu = np.where(log_nu <= NEG / 2, 0.0, np.exp(log_nu))
    return float(max(np.abs(P.sum(-1) - mu).max(), np.abs(P.sum(-2) - nu).max()))
