"""Self-supervised training loop: two crops per utterance, augment, embed, contrast.

Every source of randomness is derived from ``(seed, epoch, step, slot)`` so a
run is reproducible bit for bit, independent of how many data workers
prepare batches and of whether it was resumed from a checkpoint.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentPolicy, UtteranceStore, augment, sample_view_pair
from .features import batch_features
from .losses import LossConfig, LossVariant, MarginSchedule, ScheduleKind, compute_loss
from .model import EmbeddingNet, ModelConfig
from .optim import Adam, step_decay_lr

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "loss", "mean_pos_cos", "mean_neg_cos", "grad_maxnorm", "margin")
LEARNABLE_MARGIN_INIT = 0.1
LEARNABLE_MARGIN_MAX = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    crop_len: float = 2.0
    lr: float = 1e-3
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    seed: int = 0
    margin_schedule: ScheduleKind = ScheduleKind.COSINE_RAMP
    learnable_margin: bool = False
    workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "margin_schedule", ScheduleKind(self.margin_schedule))
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.workers < 0:
            raise ValueError("workers must be non-negative")


@dataclass
class TrainState:
    net: EmbeddingNet
    opt: Adam
    epoch: int = 0
    global_step: int = 0
    margin_param: float | None = None
    metrics: list[dict] = field(default_factory=list)


def run_config_dict(model: ModelConfig, loss: LossConfig, policy: AugmentPolicy, train: TrainConfig) -> dict:
    def plain(obj):
        d = dataclasses.asdict(obj)
        return {k: (v.value if hasattr(v, "value") else v) for k, v in d.items()}

    loss_d = {"variant": loss.variant.value, "tau": loss.tau, "margin": loss.margin}
    return {
        "model": plain(model),
        "loss": loss_d,
        "augment": {
            "enabled": policy.enabled,
            "noise_snr_db": {k: list(v) for k, v in sorted(policy.noise_snr_db.items())},
            "reverb_prob": policy.reverb_prob,
            "seed": policy.seed,
        },
        "train": {k: v for k, v in plain(train).items() if k != "workers"},
    }


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return _stream(seed, epoch, 0).permutation(n)


def prepare_batch(store: UtteranceStore, indices, policy: AugmentPolicy, crop_len: float,
                  seed: int, epoch: int, step: int):
    """Features of both views for one mini-batch, ``((N, T, F), (N, T, F))``."""
    views_a, views_b = [], []
    for slot, idx in enumerate(indices):
        rng = _stream(seed, epoch, step + 1, slot)
        pair = sample_view_pair(store.waveform(int(idx)), crop_len, rng, store.ids[int(idx)])
        pair = augment(pair, policy, rng)
        views_a.append(pair.view_a.samples)
        views_b.append(pair.view_b.samples)
    feats = batch_features(np.stack(views_a + views_b))
    n = len(indices)
    return feats[:n], feats[n:]


def build_state(model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig) -> TrainState:
    net = EmbeddingNet(model_cfg, seed=train_cfg.seed)
    opt_params = dict(net.params)
    margin_param = None
    if train_cfg.learnable_margin and loss_cfg.variant in (LossVariant.SNT_XENT_AM, LossVariant.SNT_XENT_AAM):
        margin_param = LEARNABLE_MARGIN_INIT
        opt_params["loss.margin"] = np.zeros(())
    return TrainState(net, Adam(opt_params, lr=train_cfg.lr), margin_param=margin_param)


def state_tensors(state: TrainState, seed: int) -> dict[str, np.ndarray]:
    t = {f"param/{k}": v for k, v in state.net.params.items()}
    t.update(state.opt.state_tensors())
    t["state/epoch"] = np.array(float(state.epoch))
    t["state/global_step"] = np.array(float(state.global_step))
    t["state/seed"] = np.array(float(seed))
    if state.margin_param is not None:
        t["state/margin"] = np.array(state.margin_param)
    return t


def restore_state(state: TrainState, tensors: dict[str, np.ndarray]) -> None:
    for k in state.net.params:
        state.net.params[k] = tensors[f"param/{k}"].copy()
    state.net.mark_updated()
    state.opt.load_state(tensors)
    state.epoch = int(tensors["state/epoch"])
    state.global_step = int(tensors["state/global_step"])
    if "state/margin" in tensors:
        state.margin_param = float(tensors["state/margin"])


def write_metrics(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()} for r in rows]


def train(
    store: UtteranceStore,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    policy: AugmentPolicy,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    checkpoint_every: int = 0,
    epoch_callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Train for ``train_cfg.epochs`` epochs (counting epochs already in ``resume``).

    Writes ``checkpoint.mckp`` and ``metrics.csv`` to ``out_dir`` when given.
    """
    if not isinstance(store, UtteranceStore):
        raise TypeError("train() consumes an UtteranceStore (unlabeled audio only)")
    n_utts = len(store)
    batch = train_cfg.batch_size
    if n_utts < batch:
        raise ValueError(f"dataset has {n_utts} utterances, fewer than the batch size {batch}")
    steps_per_epoch = n_utts // batch
    total_steps = max(train_cfg.epochs * steps_per_epoch, 1)
    schedule = MarginSchedule(train_cfg.margin_schedule, total_steps, loss_cfg.margin)
    loss_cfg = dataclasses.replace(loss_cfg, schedule=schedule)

    digest = ckpt.config_digest(run_config_dict(model_cfg, loss_cfg, policy, train_cfg))
    state = build_state(model_cfg, train_cfg, loss_cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        tensors, saved = ckpt.load(resume)
        if saved != digest:
            raise ckpt.CheckpointError("checkpoint was written under a different configuration")
        restore_state(state, tensors)
        if out is not None and (out / "metrics.csv").exists():
            state.metrics = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] < state.epoch]

    seed = train_cfg.seed
    pool = ThreadPoolExecutor(train_cfg.workers) if train_cfg.workers > 0 else None
    try:
        while state.epoch < train_cfg.epochs:
            epoch = state.epoch
            order = epoch_order(n_utts, seed, epoch)
            batches = [order[k * batch:(k + 1) * batch] for k in range(steps_per_epoch)]
            jobs = [(store, idx, policy, train_cfg.crop_len, seed, epoch, k) for k, idx in enumerate(batches)]
            if pool is not None:
                prepared = pool.map(lambda a: prepare_batch(*a), jobs)
            else:
                prepared = (prepare_batch(*a) for a in jobs)
            lr = step_decay_lr(epoch, train_cfg.lr, train_cfg.lr_decay, train_cfg.lr_decay_every)
            sums = {"loss": 0.0, "mean_pos_cos": 0.0, "mean_neg_cos": 0.0}
            grad_max = 0.0
            first_margin = None
            for fa, fb in prepared:
                m_override = state.margin_param
                _, z, tape = state.net.forward(np.concatenate([fa, fb]))
                res = compute_loss(z[:batch], z[batch:], loss_cfg, step=state.global_step, margin=m_override)
                grads = state.net.backward(tape, np.concatenate([res.grad_Z, res.grad_Zprime]))
                if state.margin_param is not None:
                    grads["loss.margin"] = np.array(res.grad_margin)
                    params = dict(state.net.params)
                    params["loss.margin"] = np.array(state.margin_param)
                    state.opt.step(params, grads, lr)
                    state.margin_param = float(np.clip(params["loss.margin"], 0.0, LEARNABLE_MARGIN_MAX))
                else:
                    state.opt.step(state.net.params, grads, lr)
                state.net.mark_updated()
                if first_margin is None:
                    first_margin = res.margin
                sums["loss"] += res.loss
                sums["mean_pos_cos"] += res.mean_pos_cos
                sums["mean_neg_cos"] += res.mean_neg_cos
                grad_max = max(grad_max, max(float(np.max(np.abs(g))) for g in grads.values()))
                state.global_step += 1
            state.epoch += 1
            row = {"epoch": epoch, "step": state.global_step}
            row.update({k: v / steps_per_epoch for k, v in sums.items()})
            row["grad_maxnorm"] = grad_max
            row["margin"] = float(first_margin)
            state.metrics.append(row)
            log.info("epoch %d loss %.4f pos %.3f neg %.3f margin %.3f", epoch, row["loss"],
                     row["mean_pos_cos"], row["mean_neg_cos"], row["margin"])
            if out is not None:
                write_metrics(out / "metrics.csv", state.metrics)
                if checkpoint_every and state.epoch % checkpoint_every == 0:
                    ckpt.save(out / f"checkpoint_epoch{state.epoch:04d}.mckp", state_tensors(state, seed), digest)
            if epoch_callback is not None:
                epoch_callback(state, row)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        ckpt.save(out / "checkpoint.mckp", state_tensors(state, seed), digest)
    return state


def load_network(path: str | Path) -> EmbeddingNet:
    """Rebuild the trained network from a checkpoint (shapes define the layout)."""
    from .model import config_from_params

    tensors, _ = ckpt.load(path)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    if not params:
        raise ckpt.CheckpointError(f"{path} holds no network parameters")
    return EmbeddingNet(config_from_params(params), params=params)
