"""Frame-level MLP encoder with temporal pooling and an MLP projector.

Forward passes record a tape of intermediates; ``backward`` replays it with
hand-written chain rule.  Inputs are batched as ``(B, T, F)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Pooling(str, enum.Enum):
    MEAN = "mean"
    ATTENTIVE = "attentive"


class StaleTapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 40
    hidden: int = 64
    rep_dim: int = 128
    proj_hidden: int = 256
    proj_dim: int = 128
    pooling: Pooling = Pooling.MEAN
    projector: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        for name in ("n_mels", "hidden", "rep_dim", "proj_hidden", "proj_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def embed_dim(self) -> int:
        return self.proj_dim if self.projector else self.rep_dim


def _he(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h = cfg.hidden
    p = {
        "enc.w1": _he(rng, cfg.n_mels, (cfg.n_mels, h)),
        "enc.b1": np.zeros(h),
        "enc.w2": _he(rng, h, (h, h)),
        "enc.b2": np.zeros(h),
    }
    if cfg.pooling is Pooling.ATTENTIVE:
        p["att.w"] = rng.standard_normal((h, h)) / np.sqrt(h)
        p["att.b"] = np.zeros(h)
        p["att.v"] = rng.standard_normal(h) / np.sqrt(h)
    p["enc.w3"] = rng.standard_normal((h, cfg.rep_dim)) / np.sqrt(h)
    p["enc.b3"] = np.zeros(cfg.rep_dim)
    if cfg.projector:
        p["proj.w1"] = _he(rng, cfg.rep_dim, (cfg.rep_dim, cfg.proj_hidden)) / np.sqrt(2.0)
        p["proj.b1"] = np.zeros(cfg.proj_hidden)
        p["proj.w2"] = rng.standard_normal((cfg.proj_hidden, cfg.proj_dim)) / np.sqrt(cfg.proj_hidden)
        p["proj.b2"] = np.zeros(cfg.proj_dim)
    return p


def config_from_params(params: dict[str, np.ndarray]) -> ModelConfig:
    """Recover layer sizes from parameter shapes (checkpoints are self-describing)."""
    n_mels, hidden = params["enc.w1"].shape
    rep_dim = params["enc.w3"].shape[1]
    projector = "proj.w1" in params
    return ModelConfig(
        n_mels=n_mels,
        hidden=hidden,
        rep_dim=rep_dim,
        proj_hidden=params["proj.w1"].shape[1] if projector else 256,
        proj_dim=params["proj.w2"].shape[1] if projector else 128,
        pooling=Pooling.ATTENTIVE if "att.w" in params else Pooling.MEAN,
        projector=projector,
    )


@dataclass
class Tape:
    version: int
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    pooled: np.ndarray
    y: np.ndarray
    att_u: np.ndarray | None = None
    att_alpha: np.ndarray | None = None
    proj_q: np.ndarray | None = None


class EmbeddingNet:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        self.version = 0
        self._check_shapes()

    def _check_shapes(self):
        expected = init_params(self.cfg, np.random.default_rng(0))
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config")
        for k, v in expected.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {v.shape}")

    def mark_updated(self) -> None:
        self.version += 1

    def forward(self, x: np.ndarray, train_mode: bool = True):
        """``x``: ``(B, T, F)`` or ``(T, F)``.  Returns ``(y, z, tape)``."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.cfg.n_mels:
            raise ValueError(f"expected input (B, T, {self.cfg.n_mels}), got {x.shape}")
        a1 = x @ p["enc.w1"] + p["enc.b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["enc.w2"] + p["enc.b2"]
        h2 = np.maximum(a2, 0.0)
        att_u = att_alpha = None
        if self.cfg.pooling is Pooling.ATTENTIVE:
            att_u = np.tanh(h2 @ p["att.w"] + p["att.b"])
            e = att_u @ p["att.v"]
            e = e - e.max(axis=1, keepdims=True)
            att_alpha = np.exp(e)
            att_alpha /= att_alpha.sum(axis=1, keepdims=True)
            pooled = np.einsum("bt,bth->bh", att_alpha, h2)
        else:
            pooled = h2.mean(axis=1)
        y = pooled @ p["enc.w3"] + p["enc.b3"]
        q = None
        if self.cfg.projector:
            q = np.maximum(y @ p["proj.w1"] + p["proj.b1"], 0.0)
            z = q @ p["proj.w2"] + p["proj.b2"]
        else:
            z = y
        tape = Tape(self.version, x, a1, h1, a2, h2, pooled, y, att_u, att_alpha, q)
        if single:
            return y[0], z[0], tape
        return y, z, tape

    def backward(self, tape: Tape, grad_z: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(grad_z * z)`` for the taped forward pass."""
        if tape.version != self.version:
            raise StaleTapeError("tape was recorded before the last parameter update")
        p = self.params
        g = {}
        gz = np.asarray(grad_z, dtype=np.float64).reshape(tape.y.shape[0], -1)
        if self.cfg.projector:
            q = tape.proj_q
            g["proj.w2"] = q.T @ gz
            g["proj.b2"] = gz.sum(axis=0)
            dq = (gz @ p["proj.w2"].T) * (q > 0)
            g["proj.w1"] = tape.y.T @ dq
            g["proj.b1"] = dq.sum(axis=0)
            dy = dq @ p["proj.w1"].T
        else:
            dy = gz
        g["enc.w3"] = tape.pooled.T @ dy
        g["enc.b3"] = dy.sum(axis=0)
        dpool = dy @ p["enc.w3"].T
        h2 = tape.h2
        if self.cfg.pooling is Pooling.ATTENTIVE:
            alpha, u = tape.att_alpha, tape.att_u
            dh2 = alpha[:, :, None] * dpool[:, None, :]
            dalpha = np.einsum("bth,bh->bt", h2, dpool)
            de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
            g["att.v"] = np.einsum("bt,bta->a", de, u)
            dpre = de[:, :, None] * p["att.v"] * (1.0 - u * u)
            g["att.w"] = np.einsum("bth,bta->ha", h2, dpre)
            g["att.b"] = dpre.sum(axis=(0, 1))
            dh2 = dh2 + dpre @ p["att.w"].T
        else:
            dh2 = np.broadcast_to(dpool[:, None, :] / h2.shape[1], h2.shape)
        da2 = dh2 * (tape.a2 > 0)
        g["enc.w2"] = np.einsum("btk,bth->kh", tape.h1, da2)
        g["enc.b2"] = da2.sum(axis=(0, 1))
        da1 = (da2 @ p["enc.w2"].T) * (tape.a1 > 0)
        g["enc.w1"] = np.einsum("btf,bth->fh", tape.x, da1)
        g["enc.b1"] = da1.sum(axis=(0, 1))
        return g

    def represent(self, x: np.ndarray) -> np.ndarray:
        """Encoder output ``y`` only (the projector is skipped)."""
        return self.forward(x, train_mode=False)[0]
