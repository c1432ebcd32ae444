"""Learning the cache router (and the layer-drop ablation) on a frozen model."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, Tape, adamw_step, backward
from .cache import DEFAULT_ALPHA, PAPER_LITERAL, CacheStore, Router, cache_pairs
from .data import Dataset
from .model import DenoiserModel
from .schedule import NoiseSchedule, TimeGrid, ddim_step, forward_sample
from .sampling import designations_for, eval_times

log = logging.getLogger(__name__)


class RouterTrainingError(RuntimeError):
    pass


@dataclass
class RouterTrainConfig:
    lam: float = 1e-3
    lr: float = 0.01
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 1
    iters_per_epoch: int | None = None  # default: len(dataset) // batch
    batch: int = 64
    label_drop: float = 0.1
    mode: str = PAPER_LITERAL
    skip_policy: str = "coupled"
    cost_cap: int | None = None  # documented budget; enforced afterwards via threshold
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class LogRow:
    step: int
    loss: float
    recon_term: float
    penalty_term: float
    mean_sigmoid_beta: float


def loss_fn(eps_tilde, eps_target, betas, lam: float):
    """Per-sample squared error (batch mean) plus lam * sum(betas).

    Returns (loss, recon, penalty) tensors.
    """
    eps_tilde, eps_target = ad.as_tensor(eps_tilde), ad.as_tensor(eps_target)
    if eps_tilde.shape != eps_target.shape:
        raise ValueError(f"eps shapes differ: {eps_tilde.shape} vs {eps_target.shape}")
    d = ad.add(eps_tilde, ad.scale(eps_target, -1.0))
    batch = d.shape[0] if d.data.ndim > 1 else 1
    recon = ad.scale(ad.sum_(ad.mul(d, d)), 1.0 / batch)
    penalty = ad.scale(ad.sum_(betas), lam)
    return ad.add(recon, penalty), recon, penalty


def step_pairs(schedule: NoiseSchedule, grid: TimeGrid, solver: str = "ddim",
               shifted: bool = True) -> list[tuple[float, float]]:
    """(s, m) times for every router row, in sampling order."""
    times = eval_times(schedule, grid, solver)
    return [(times[a], times[b]) for a, b in cache_pairs(designations_for(grid, solver, shifted))]


def pair_inputs(model: DenoiserModel, schedule: NoiseSchedule, x0, y, noise, s: float, m: float):
    """x_s from the forward process, the full step at s, and x_m by one solver step."""
    x_s = forward_sample(schedule, x0, s, noise)
    eps_s, trace = model.forward(x_s, s, y, record=True)
    x_m = ddim_step(schedule, x_s, eps_s.data, s, m)
    return x_s, CacheStore.from_trace(trace), x_m


def row_loss(model: DenoiserModel, logits_row, cache: CacheStore, x_m, m: float, y, target,
             lam: float, alpha: float = DEFAULT_ALPHA, mode: str = PAPER_LITERAL,
             skip_policy: str = "coupled", drop: bool = False, tape: Tape | None = None):
    """Loss for one router row. Returns (loss, recon, penalty, betas, leaf)."""
    tape = tape or Tape()
    leaf = tape.leaf(logits_row, dtype=model.dtype)
    betas = ad.sigmoid(leaf)
    eps_tilde, _ = model.forward(x_m, m, y, betas=betas, cache=None if drop else cache,
                                 alpha=alpha, mode=mode, skip_policy=skip_policy, drop=drop)
    loss, recon, pen = loss_fn(eps_tilde, target, betas, lam)
    return loss, recon, pen, betas, leaf


def _iterations(cfg: RouterTrainConfig, dataset: Dataset) -> int:
    per = cfg.iters_per_epoch or max(1, len(dataset) // cfg.batch)
    return cfg.epochs * per


def train_router(model: DenoiserModel, router: Router, pairs: Sequence[tuple[float, float]],
                 schedule: NoiseSchedule, dataset: Dataset, cfg: RouterTrainConfig,
                 drop: bool = False) -> tuple[Router, list[LogRow]]:
    """Optimize router logits against the frozen ``model``; returns a new router.

    Each iteration draws one router row, builds its (s, m) pair from data and
    updates only that row.
    """
    if router.cache_steps != len(pairs):
        raise ValueError(f"router has {router.cache_steps} rows but {len(pairs)} cache steps")
    if router.sublayers != model.config.sublayers:
        raise ValueError("router width does not match the model's sublayer count")
    rng = np.random.default_rng(cfg.seed)
    logits = router.logits.copy()
    states = [AdamWState() for _ in range(router.cache_steps)]
    rows: list[LogRow] = []
    null = model.config.null_class
    for step in range(_iterations(cfg, dataset)):
        x0, y = dataset.batch(rng, cfg.batch)
        y = np.where(rng.random(cfg.batch) < cfg.label_drop, null, y)
        r = int(rng.integers(0, router.cache_steps))
        s, m = pairs[r]
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        _, cache, x_m = pair_inputs(model, schedule, x0, y, noise, s, m)
        target = model(x_m, m, y)
        tape = Tape()
        loss, recon, pen, betas, leaf = row_loss(model, logits[r], cache, x_m, m, y, target,
                                                 cfg.lam, router.alpha, cfg.mode,
                                                 cfg.skip_policy, drop, tape)
        value = loss.item()
        if not math.isfinite(value):
            raise RouterTrainingError(f"router loss became {value} at step {step}")
        g = backward(tape, loss)[leaf.node]
        (new_row,), states[r] = adamw_step([logits[r]], [g.astype(logits.dtype)], states[r],
                                           lr=cfg.lr, weight_decay=cfg.weight_decay,
                                           betas=cfg.betas)
        logits[r] = new_row
        rows.append(LogRow(step, value, recon.item(), pen.item(), float(betas.data.mean())))
        if step % 500 == 0:
            log.info("router step %d loss %.5f", step, value)
    out = Router(logits, router.alpha, router.threshold, router.cache_above)
    return out, rows


def train_drop(model, router, pairs, schedule, dataset, cfg):
    """Learning-to-drop: same loop, but a 0 removes the sublayer outright."""
    return train_router(model, router, pairs, schedule, dataset, cfg, drop=True)


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "recon_term", "penalty_term", "mean_sigmoid_beta"])
        for r in rows:
            w.writerow([r.step, r.loss, r.recon_term, r.penalty_term, r.mean_sigmoid_beta])
