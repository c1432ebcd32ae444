"""Uncached and cached ODE sampling, guidance and heuristic cache masks."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import (CACHE, DEFAULT_ALPHA, FULL, PAPER_LITERAL, CacheStore, cache_pairs, cache_ratio,
                    shift_cache_schedule)
from .model import Counter, DenoiserModel
from .schedule import NoiseSchedule, TimeGrid, ddim_step, dpm2_midpoint

SOLVERS = ("ddim", "dpm2")


@dataclass
class SampleResult:
    seeds: np.ndarray
    labels: np.ndarray
    samples: np.ndarray
    nfe: int
    designations: list[str]
    counter: Counter
    trajectory: list[np.ndarray] | None = None
    eval_times: list[float] = field(default_factory=list)


def initial_noise(seeds: Sequence[int], num_classes: int, dtype=np.float32):
    """x_T and a class label per seed, each from its own generator."""
    xs, ys = [], []
    for s in seeds:
        rng = np.random.default_rng(int(s))
        xs.append(rng.standard_normal(2))
        ys.append(rng.integers(num_classes))
    return np.asarray(xs, dtype=dtype), np.asarray(ys, dtype=np.int64)


def eval_times(schedule: NoiseSchedule, grid: TimeGrid, solver: str) -> list[float]:
    if solver == "ddim":
        return list(grid.points[:-1])
    if solver == "dpm2":
        out = []
        for s, t in zip(grid.points[:-1], grid.points[1:]):
            out += [s, dpm2_midpoint(schedule, s, t)]
        return out
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def nfe_of(grid: TimeGrid, solver: str) -> int:
    return grid.T * (2 if solver == "dpm2" else 1)


class _Evaluator:
    """Runs model evaluations along a designation plan, keeping the caches."""

    def __init__(self, model, y, w, designations, mask, mode, alpha, skip_policy, drop, counter):
        self.model, self.y, self.w = model, y, w
        self.designations = designations
        self.mask = mask
        self.mode, self.alpha, self.skip_policy, self.drop = mode, alpha, skip_policy, drop
        self.counter = counter
        self.caches: dict[str, CacheStore] = {}
        self.row_of = {}
        if designations is not None:
            for r, (_, m) in enumerate(cache_pairs(designations)):
                self.row_of[m] = r
        self.k = 0

    def _branch(self, name, x, t, y):
        k = self.k
        d = FULL if self.designations is None else self.designations[k]
        if d == FULL or self.mask is None:
            record = self.mask is not None and not self.drop
            eps, trace = self.model.forward(x, t, y, record=record, counter=self.counter)
            if record:
                self.caches[name] = CacheStore.from_trace(trace, k)
            return eps.data
        betas = [float(b) for b in self.mask[self.row_of[k]]]
        cache = None
        if not self.drop:
            cache = self.caches.get(name)
            if cache is None or cache.eval_index != k - 1:
                raise RuntimeError(f"evaluation {k}: cache not filled by the preceding full step")
        eps, _ = self.model.forward(x, t, y, betas=betas, cache=cache, alpha=self.alpha,
                                    mode=self.mode, skip_policy=self.skip_policy,
                                    drop=self.drop, counter=self.counter)
        return eps.data

    def __call__(self, x, t):
        if self.w is None:
            out = self._branch("cond", x, t, self.y)
        elif self.w == 0:
            out = self._branch("uncond", x, t, np.full_like(self.y, self.model.config.null_class))
        else:
            null = np.full_like(self.y, self.model.config.null_class)
            cond = self._branch("cond", x, t, self.y)
            unc = self._branch("uncond", x, t, null)
            out = unc + self.w * (cond - unc)
        self.k += 1
        return out


def _solve(model, schedule, grid, solver, seeds, w, *, designations=None, mask=None,
           mode=PAPER_LITERAL, alpha=DEFAULT_ALPHA, skip_policy="coupled", drop=False,
           log_trajectory=False, labels=None) -> SampleResult:
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    seeds = np.asarray(list(seeds), dtype=np.int64)
    x, y = initial_noise(seeds, model.config.num_classes, model.dtype)
    if labels is not None:
        y = np.broadcast_to(np.asarray(labels, dtype=np.int64), y.shape).copy()
    counter = Counter()
    ev = _Evaluator(model, y, w, designations, mask, mode, alpha, skip_policy, drop, counter)
    traj = [x.copy()] if log_trajectory else None
    pts = grid.points
    for i in range(grid.T):
        s, t = pts[i], pts[i + 1]
        if solver == "ddim":
            x = ddim_step(schedule, x, ev(x, s), s, t)
        else:
            u = dpm2_midpoint(schedule, s, t)
            x_u = ddim_step(schedule, x, ev(x, s), s, u)
            x = ddim_step(schedule, x, ev(x_u, u), s, t)
        if traj is not None:
            traj.append(x.copy())
    nfe = nfe_of(grid, solver)
    des = designations if designations is not None else [FULL] * nfe
    return SampleResult(seeds, y, x, nfe, list(des), counter, traj,
                        eval_times(schedule, grid, solver))


def sample_full(model: DenoiserModel, schedule: NoiseSchedule, grid: TimeGrid,
                solver: str = "ddim", w: float | None = 1.5, seeds: Sequence[int] = range(64),
                log_trajectory: bool = False, labels=None) -> SampleResult:
    """Plain sampling: every evaluation runs all sublayers."""
    return _solve(model, schedule, grid, solver, seeds, w, log_trajectory=log_trajectory,
                  labels=labels)


def designations_for(grid: TimeGrid, solver: str, shifted: bool = True) -> list[str]:
    return shift_cache_schedule(nfe_of(grid, solver), solver, shifted)


def sample_cached(model: DenoiserModel, schedule: NoiseSchedule, grid: TimeGrid, mask,
                  solver: str = "ddim", w: float | None = 1.5, seeds: Sequence[int] = range(64),
                  mode: str = PAPER_LITERAL, alpha: float = DEFAULT_ALPHA, skip_policy: str = "coupled",
                  shifted: bool = True, drop: bool = False, designations=None,
                  log_trajectory: bool = False, labels=None) -> SampleResult:
    """Sampling with a binary (cache steps x 2D) mask; 0 entries reuse the cache.

    With ``drop`` the 0 entries remove the sublayer instead.
    """
    if designations is None:
        designations = designations_for(grid, solver, shifted)
    if len(designations) != nfe_of(grid, solver):
        raise ValueError("designations do not match the number of evaluations")
    rows = sum(d == CACHE for d in designations)
    mask = np.asarray(mask)
    if mask.shape != (rows, model.config.sublayers):
        raise ValueError(f"mask shape {mask.shape} does not match "
                         f"({rows} cache steps, {model.config.sublayers} sublayers)")
    return _solve(model, schedule, grid, solver, seeds, w, designations=designations,
                  mask=mask, mode=mode, alpha=alpha, skip_policy=skip_policy, drop=drop,
                  log_trajectory=log_trajectory, labels=labels)


def predicted_invocations(mask, designations, sublayers: int, branches: int = 1) -> int:
    mask = np.asarray(mask)
    n_full = sum(d == FULL for d in designations)
    return branches * (n_full * sublayers + int(mask.sum()))


# ---------------------------------------------------------------- heuristics

HEURISTICS = ("top-down", "bottom-up", "random", "metric")


def heuristic_mask(kind: str, k: int, shape: tuple[int, int], scores=None,
                   seed: int = 0) -> np.ndarray:
    """Rule-based mask with exactly ``k`` cached entries."""
    rows, cols = shape
    total = rows * cols
    if not 0 <= k <= total:
        raise ValueError(f"budget {k} outside [0, {total}]")
    r_idx, c_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r_idx, c_idx = r_idx.ravel(), c_idx.ravel()
    if kind == "top-down":
        order = np.lexsort((r_idx, c_idx))
    elif kind == "bottom-up":
        order = np.lexsort((r_idx, -c_idx))
    elif kind == "random":
        order = np.random.default_rng(seed).permutation(total)
    elif kind == "metric":
        if scores is None:
            raise ValueError("metric mask needs per-entry scores")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != shape:
            raise ValueError(f"scores shape {scores.shape} != mask shape {shape}")
        order = np.argsort(scores.ravel(), kind="stable")
    else:
        raise ValueError(f"unknown heuristic {kind!r}; expected one of {HEURISTICS}")
    mask = np.ones(total, dtype=np.int8)
    mask[order[:k]] = 0
    return mask.reshape(shape)


def calibration_scores(model: DenoiserModel, schedule: NoiseSchedule, grid: TimeGrid,
                       solver: str = "ddim", seeds: Sequence[int] = range(1000, 1064),
                       w: float | None = 1.5, shifted: bool = True) -> np.ndarray:
    """Local error scores per (cache step, sublayer) along full trajectories."""
    from .cache import local_error_metric

    designations = designations_for(grid, solver, shifted)
    seeds = np.asarray(list(seeds), dtype=np.int64)
    x, y = initial_noise(seeds, model.config.num_classes, model.dtype)
    if w == 0:
        y = np.full_like(y, model.config.null_class)
    times = eval_times(schedule, grid, solver)
    inputs: list[np.ndarray] = []

    def model_fn(xx, tt):
        inputs.append(xx)
        if w is None or w == 0:
            return model(xx, tt, y)
        null = np.full_like(y, model.config.null_class)
        c, u = model(xx, tt, y), model(xx, tt, null)
        return u + w * (c - u)

    pts = grid.points
    for i in range(grid.T):
        s, t = pts[i], pts[i + 1]
        if solver == "ddim":
            x = ddim_step(schedule, x, model_fn(x, s), s, t)
        else:
            u = dpm2_midpoint(schedule, s, t)
            x_u = ddim_step(schedule, x, model_fn(x, s), s, u)
            x = ddim_step(schedule, x, model_fn(x_u, u), s, t)
    pairs = cache_pairs(designations)
    out = np.zeros((len(pairs), model.config.sublayers))
    for r, (a, b) in enumerate(pairs):
        out[r] = local_error_metric(model, inputs[a], inputs[b], times[a], times[b], y)
    return out


# ---------------------------------------------------------------- outputs

def write_samples_csv(res: SampleResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "class", "x", "y"])
        for s, c, (px, py) in zip(res.seeds, res.labels, res.samples):
            w.writerow([int(s), int(c), repr(float(px)), repr(float(py))])


def run_manifest(res: SampleResult, solver: str, steps: int, mask_source: str,
                 mask=None) -> dict:
    ratio = cache_ratio(mask)["overall"] if mask is not None and np.size(mask) else 0.0
    return {
        "solver": solver, "steps": steps, "nfe": res.nfe, "mask_source": mask_source,
        "cache_ratio": ratio,
        "counters": {"mhsa": res.counter.mhsa, "ffn": res.counter.ffn,
                     "total": res.counter.total},
    }


def write_manifest(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
