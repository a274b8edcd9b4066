"""Contrastive losses over two embedding views with analytic gradients.

Variants: NT-Xent (one-directional), symmetric NT-Xent over all 2N views,
and the symmetric loss with an additive cosine margin (AM) or additive
angular margin (AAM) on the positive pair only.  All losses are computed in
log space; gradients flow through the row-wise l2 normalization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

COS_CLAMP = 1.0 - 1e-7


class LossVariant(str, enum.Enum):
    NT_XENT = "ntxent"
    SNT_XENT = "sntxent"
    SNT_XENT_AM = "am"
    SNT_XENT_AAM = "aam"


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    COSINE_RAMP = "cosine"


@dataclass(frozen=True)
class MarginSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    total_steps: int = 1
    final_margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.total_steps <= 0:
            raise ValueError("MarginSchedule.total_steps must be positive")
        if self.final_margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class LossConfig:
    variant: LossVariant = LossVariant.SNT_XENT
    tau: float = 0.02
    margin: float = 0.0
    schedule: MarginSchedule | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.variant is LossVariant.SNT_XENT_AAM:
            top = max(self.margin, self.schedule.final_margin if self.schedule else 0.0)
            if top >= math.pi / 2:
                raise ValueError("additive angular margin must be < pi/2")


@dataclass
class LossOutput:
    loss: float
    grad_Z: np.ndarray
    grad_Zprime: np.ndarray
    mean_pos_cos: float
    mean_neg_cos: float
    grad_maxnorm: float
    margin: float = 0.0
    grad_margin: float = 0.0
    per_anchor: np.ndarray = field(default_factory=lambda: np.zeros(0))


def cosine_similarity(u, v, clamp: bool = False) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    c = float(np.dot(u / nu, v / nv))
    return clamp_cosine(c) if clamp else c


def clamp_cosine(c):
    return np.clip(c, -COS_CLAMP, COS_CLAMP)


def pair_logit(cos_uv, tau: float):
    """Log of exp(cos / tau)."""
    return cos_uv / tau


def positive_logit_am(cos, m: float, tau: float):
    return (cos - m) / tau


def positive_logit_aam(cos, m: float, tau: float):
    # cos(acos(c) + m) expanded; clamp keeps sqrt(1 - c^2) away from 0
    c = clamp_cosine(cos)
    return (c * math.cos(m) - np.sqrt(1.0 - c * c) * math.sin(m)) / tau


def margin_at(step: int, sched: MarginSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if sched.kind is ScheduleKind.CONSTANT:
        return sched.final_margin
    progress = min(2.0 * step / sched.total_steps, 1.0)
    return sched.final_margin * (1.0 - math.cos(math.pi * progress)) / 2.0


def _check_batch(Z, Zp):
    Z = np.asarray(Z, dtype=np.float64)
    Zp = np.asarray(Zp, dtype=np.float64)
    if Z.ndim != 2 or Z.shape != Zp.shape:
        raise ValueError(f"embedding batches must share an N x D shape, got {Z.shape} and {Zp.shape}")
    if Z.shape[0] < 2:
        raise ValueError(f"contrastive loss needs N >= 2 (at least one negative), got N={Z.shape[0]}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Zp))):
        raise ValueError("embedding batch contains non-finite values")
    return Z, Zp


def _normalize_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot l2-normalize a zero embedding row")
    return X / norms, norms


def _normalize_backward(grad_u, u, norms):
    return (grad_u - u * np.sum(u * grad_u, axis=1, keepdims=True)) / norms


def _logsumexp_rows(logits):
    top = np.max(logits, axis=1, keepdims=True)
    return (top + np.log(np.sum(np.exp(logits - top), axis=1, keepdims=True)))[:, 0]


def _maxnorm(*arrays) -> float:
    return float(max(np.max(np.abs(a)) for a in arrays))


def pair_index_sets(n: int):
    """Positive partner ``j(i)`` and negative sets for the 2N symmetric views."""
    idx = np.arange(2 * n)
    partner = (idx + n) % (2 * n)
    negatives = [np.setdiff1d(idx, [i, partner[i]]) for i in idx]
    return partner, negatives


def nt_xent(Z, Zp, cfg: LossConfig) -> LossOutput:
    """Anchors from ``Z``; positive and negatives from ``Zp`` only."""
    Z, Zp = _check_batch(Z, Zp)
    n = Z.shape[0]
    tau = cfg.tau
    U, nz = _normalize_rows(Z)
    Up, nzp = _normalize_rows(Zp)
    S = U @ Up.T
    logits = S / tau
    lse = _logsumexp_rows(logits)
    per_anchor = lse - np.diag(logits)

    P = np.exp(logits - lse[:, None])
    G = (P - np.eye(n)) / (n * tau)
    grad_Z = _normalize_backward(G @ Up, U, nz)
    grad_Zp = _normalize_backward(G.T @ U, Up, nzp)

    off = ~np.eye(n, dtype=bool)
    return LossOutput(
        loss=float(per_anchor.mean()),
        grad_Z=grad_Z,
        grad_Zprime=grad_Zp,
        mean_pos_cos=float(np.mean(np.diag(S))),
        mean_neg_cos=float(np.mean(S[off])),
        grad_maxnorm=_maxnorm(grad_Z, grad_Zp),
        per_anchor=per_anchor,
    )


def snt_xent(Z, Zp, cfg: LossConfig, margin: float | None = None) -> LossOutput:
    """Symmetric loss over all 2N views; the margin (if any) hits positives only."""
    Z, Zp = _check_batch(Z, Zp)
    n = Z.shape[0]
    tau = cfg.tau
    m = cfg.margin if margin is None else float(margin)
    variant = cfg.variant
    if variant is LossVariant.SNT_XENT:
        m = 0.0

    U, nz = _normalize_rows(Z)
    Up, nzp = _normalize_rows(Zp)
    W = np.concatenate([U, Up])
    S = W @ W.T
    idx = np.arange(2 * n)
    partner = (idx + n) % (2 * n)
    pos_cos = S[idx, partner]

    if variant is LossVariant.SNT_XENT_AAM:
        c = clamp_cosine(pos_cos)
        sin_t = np.sqrt(1.0 - c * c)
        pos_logit = (c * math.cos(m) - sin_t * math.sin(m)) / tau
        inside = np.abs(pos_cos) < COS_CLAMP
        dpos_dcos = np.where(inside, (math.cos(m) + c * math.sin(m) / sin_t) / tau, 0.0)
        dpos_dm = -(sin_t * math.cos(m) + c * math.sin(m)) / tau
    elif variant is LossVariant.SNT_XENT_AM:
        pos_logit = (pos_cos - m) / tau
        dpos_dcos = np.full(2 * n, 1.0 / tau)
        dpos_dm = np.full(2 * n, -1.0 / tau)
    else:
        pos_logit = pos_cos / tau
        dpos_dcos = np.full(2 * n, 1.0 / tau)
        dpos_dm = np.zeros(2 * n)

    logits = S / tau
    logits[idx, partner] = pos_logit
    logits[idx, idx] = -np.inf
    lse = _logsumexp_rows(logits)
    per_anchor = lse - pos_logit

    P = np.exp(logits - lse[:, None])
    scale = 1.0 / (2 * n)
    # dL/dlogit: P for negatives, P - 1 for the positive; chain to S
    G = P * (scale / tau)
    p_pos = P[idx, partner]
    G[idx, partner] = (p_pos - 1.0) * dpos_dcos * scale
    grad_W = (G + G.T) @ W
    grad_Z = _normalize_backward(grad_W[:n], U, nz)
    grad_Zp = _normalize_backward(grad_W[n:], Up, nzp)
    grad_m = float(np.sum((p_pos - 1.0) * dpos_dm) * scale)

    neg_mask = np.ones((2 * n, 2 * n), dtype=bool)
    neg_mask[idx, idx] = False
    neg_mask[idx, partner] = False
    return LossOutput(
        loss=float(per_anchor.mean()),
        grad_Z=grad_Z,
        grad_Zprime=grad_Zp,
        mean_pos_cos=float(pos_cos.mean()),
        mean_neg_cos=float(S[neg_mask].mean()),
        grad_maxnorm=_maxnorm(grad_Z, grad_Zp),
        margin=m,
        grad_margin=grad_m if variant is not LossVariant.SNT_XENT else 0.0,
        per_anchor=per_anchor,
    )


def effective_margin(cfg: LossConfig, step: int) -> float:
    if cfg.variant in (LossVariant.NT_XENT, LossVariant.SNT_XENT):
        return 0.0
    if cfg.schedule is None:
        return cfg.margin
    return margin_at(step, cfg.schedule)


def compute_loss(Z, Zp, cfg: LossConfig, step: int = 0, margin: float | None = None) -> LossOutput:
    """Dispatch on ``cfg.variant``; ``margin`` overrides the scheduled value."""
    m = effective_margin(cfg, step) if margin is None else margin
    if cfg.variant is LossVariant.NT_XENT:
        return nt_xent(Z, Zp, cfg)
    return snt_xent(Z, Zp, cfg, margin=m)
