"""Gradient checks and scalar-enumeration oracles for the contrastive losses.

The reference losses here loop over pairs with plain ``math`` calls and
direct exponentials; they share no code with the vectorized path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, LossVariant, compute_loss

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-10
FD_STEP = 1e-5
GRAD_FLOOR = 1e-8


def _unit(v):
    norm = math.sqrt(sum(x * x for x in v))
    return [x / norm for x in v]


def _cos(u, v):
    return sum(a * b for a, b in zip(_unit(u), _unit(v)))


def _positive_logit(c, variant, m, tau):
    if variant == LossVariant.SNT_XENT_AM:
        return (c - m) / tau
    if variant == LossVariant.SNT_XENT_AAM:
        c = min(max(c, -1 + 1e-7), 1 - 1e-7)
        return math.cos(math.acos(c) + m) / tau
    return c / tau


def reference_loss(Z, Zp, variant, tau: float, margin: float = 0.0) -> float:
    """Per-pair enumeration of the one-directional or symmetric loss."""
    Z = [list(map(float, r)) for r in np.asarray(Z)]
    Zp = [list(map(float, r)) for r in np.asarray(Zp)]
    n = len(Z)
    variant = LossVariant(variant)
    if variant == LossVariant.NT_XENT:
        total = 0.0
        for i in range(n):
            num = math.exp(_cos(Z[i], Zp[i]) / tau)
            den = sum(math.exp(_cos(Z[i], Zp[a]) / tau) for a in range(n))
            total -= math.log(num / den)
        return total / n

    views = Z + Zp
    total = 0.0
    for i in range(2 * n):
        j = (i + n) % (2 * n)
        pos = math.exp(_positive_logit(_cos(views[i], views[j]), variant, margin, tau))
        neg = sum(
            math.exp(_cos(views[i], views[a]) / tau)
            for a in range(2 * n)
            if a not in (i, j)
        )
        total -= math.log(pos / (pos + neg))
    return total / (2 * n)


def finite_difference_grads(f, arrays, h: float = FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = f(*arrays)
            arr[idx] = orig - h
            down = f(*arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def fd_roundoff_allowance(value: float, h: float = FD_STEP) -> float:
    """Absolute error a central difference picks up from float64 rounding of ``f``."""
    return 8.0 * np.finfo(np.float64).eps * (1.0 + abs(value)) / h


def max_relative_error(analytic, numeric, floor: float = GRAD_FLOOR, allowance: float = 0.0) -> float:
    """Max of (|a - n| - allowance)+ / max(|a|, |n|) over entries above ``floor``."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64).ravel()
        n = np.asarray(n, dtype=np.float64).ravel()
        big = np.maximum(np.abs(a), np.abs(n))
        mask = big > floor
        if np.any(mask):
            excess = np.maximum(np.abs(a[mask] - n[mask]) - allowance, 0.0)
            worst = max(worst, float(np.max(excess / big[mask])))
    return worst


def random_batch(rng, n: int, d: int):
    return rng.standard_normal((n, d)), rng.standard_normal((n, d))


def loss_gradcheck(Z, Zp, cfg: LossConfig, margin: float | None = None, fault=None, strict: bool = False) -> float:
    """Worst relative gradient error; ``strict`` drops the finite-difference roundoff allowance."""
    out = compute_loss(Z, Zp, cfg, margin=margin)
    grads = [out.grad_Z, out.grad_Zprime]
    if fault is not None:
        grads = fault(cfg, grads)
    Z, Zp = Z.copy(), Zp.copy()
    numeric = finite_difference_grads(lambda a, b: compute_loss(a, b, cfg, margin=margin).loss, [Z, Zp])
    allowance = 0.0 if strict else fd_roundoff_allowance(out.loss)
    return max_relative_error(grads, numeric, allowance=allowance)


def flip_am_gradient(cfg, grads):
    """Fault hook: negate the AM gradient so the check must fail."""
    if cfg.variant is LossVariant.SNT_XENT_AM:
        return [-g for g in grads]
    return grads


FAULTS = {"am-sign-flip": flip_am_gradient}

# (variant, margin) grid exercised by the default check.
DEFAULT_CASES = (
    (LossVariant.NT_XENT, 0.0),
    (LossVariant.SNT_XENT, 0.0),
    (LossVariant.SNT_XENT_AM, 0.1),
    (LossVariant.SNT_XENT_AM, 0.4),
    (LossVariant.SNT_XENT_AAM, 0.05),
    (LossVariant.SNT_XENT_AAM, 0.1),
)


@dataclass
class CheckRow:
    variant: str
    margin: float
    batches: int
    max_grad_rel_err: float
    max_oracle_abs_err: float

    @property
    def passed(self) -> bool:
        return self.max_grad_rel_err < GRAD_TOL and self.max_oracle_abs_err < ORACLE_TOL


def run_losscheck(
    seed: int = 0,
    batches: int = 20,
    batch_size: int | None = None,
    tau: float = 0.02,
    fault: str | None = None,
) -> list[CheckRow]:
    """Gradient check + oracle equivalence for every variant in ``DEFAULT_CASES``.

    With ``batch_size=None`` sizes are drawn from N in {2, 4, 8}, D in {3, 16}.
    """
    if batch_size is not None and batch_size < 2:
        raise ValueError(f"contrastive loss needs N >= 2 (at least one negative), got N={batch_size}")
    fault_fn = FAULTS[fault] if fault else None
    rng = np.random.default_rng(seed)
    rows = []
    for variant, m in DEFAULT_CASES:
        cfg = LossConfig(variant=variant, tau=tau, margin=m)
        grad_err = 0.0
        oracle_err = 0.0
        for _ in range(batches):
            n = batch_size or int(rng.choice([2, 4, 8]))
            d = int(rng.choice([3, 16]))
            Z, Zp = random_batch(rng, n, d)
            grad_err = max(grad_err, loss_gradcheck(Z, Zp, cfg, fault=fault_fn))
            vec = compute_loss(Z, Zp, cfg).loss
            oracle_err = max(oracle_err, abs(vec - reference_loss(Z, Zp, variant, tau, m)))
        rows.append(CheckRow(variant.value, m, batches, grad_err, oracle_err))
    return rows


def format_report(rows: list[CheckRow]) -> str:
    lines = [f"{'variant':<9} {'margin':>6} {'batches':>7} {'grad_rel_err':>13} {'oracle_err':>11}  status"]
    for r in rows:
        lines.append(
            f"{r.variant:<9} {r.margin:>6.2f} {r.batches:>7d} {r.max_grad_rel_err:>13.3e}"
            f" {r.max_oracle_abs_err:>11.3e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
