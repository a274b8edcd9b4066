from __future__ import annotations

import numpy as np


def step_decay_lr(epoch: int, base_lr: float = 1e-3, decay: float = 0.95, every: int = 10) -> float:
    """``base_lr * decay ** (epoch // every)``: 5 % off at epochs 10, 20, ..."""
    return base_lr * decay ** (epoch // every)


class Adam:
    """Adam without weight decay; moments are keyed like the parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """In-place update of every parameter that has a gradient."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if params[k].shape != g.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {params[k].shape}")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        out.update({f"adam.m/{k}": v for k, v in self.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["adam.t"])
        for k in self.m:
            self.m[k] = tensors[f"adam.m/{k}"].copy()
            self.v[k] = tensors[f"adam.v/{k}"].copy()
