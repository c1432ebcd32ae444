"""Noise-prediction pretraining of the toy denoiser."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamWState, Tape, adamw_step, backward, mse
from .data import Dataset
from .model import DenoiserModel
from .schedule import NoiseSchedule, forward_sample

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    steps: int = 8000
    batch: int = 128
    lr: float = 2e-3
    min_lr: float = 1e-4
    weight_decay: float = 0.0
    label_drop: float = 0.1
    warmup: int = 200
    seed: int = 0


def lr_at(cfg: PretrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * min(frac, 1.0)))


def eps_loss(model: DenoiserModel, schedule: NoiseSchedule, x0, y, t, noise, params=None):
    xt = forward_sample(schedule, x0, t, noise)
    eps, _ = model.forward(xt, t, y, params=params)
    return mse(eps, noise)


def pretrain(model: DenoiserModel, dataset: Dataset, schedule: NoiseSchedule,
             cfg: PretrainConfig) -> tuple[DenoiserModel, list[float]]:
    """Train a copy of ``model``; returns it with the per-step loss curve."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    names = sorted(model.params)
    state = AdamWState()
    curve: list[float] = []
    for step in range(cfg.steps):
        x0, y = dataset.batch(rng, cfg.batch)
        y = np.where(rng.random(cfg.batch) < cfg.label_drop, model.config.null_class, y)
        t = rng.integers(1, schedule.T_train + 1, cfg.batch)
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        tape = Tape()
        leaves = {k: tape.leaf(model.params[k]) for k in names}
        loss = eps_loss(model, schedule, x0, y, t, noise, params=leaves)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        grads = backward(tape, loss)
        new, state = adamw_step([model.params[k] for k in names],
                                [grads[leaves[k].node] for k in names], state,
                                lr=lr_at(cfg, step), weight_decay=cfg.weight_decay)
        model.params.update(zip(names, new))
        curve.append(value)
        if step % 1000 == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    return model, curve


def eval_loss(model: DenoiserModel, dataset: Dataset, schedule: NoiseSchedule,
              n: int = 2048, seed: int = 1234) -> float:
    """Average eps-MSE over random timesteps (conditional labels)."""
    rng = np.random.default_rng(seed)
    x0, y = dataset.batch(rng, n)
    t = rng.integers(1, schedule.T_train + 1, n)
    noise = rng.standard_normal(x0.shape).astype(np.float32)
    return eps_loss(model, schedule, x0, y, t, noise).item()
