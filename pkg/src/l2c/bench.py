"""MAC accounting, sample-quality metrics, tradeoff sweeps and router export."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cache import FULL, Router, cache_pairs, cache_ratio
from .model import MHSA, Counter, ModelConfig


@dataclass(frozen=True)
class MacModel:
    """Multiply-accumulate counts for one evaluation of the toy model."""

    mhsa: int
    ffn: int
    overhead: int

    @classmethod
    def of(cls, cfg: ModelConfig) -> "MacModel":
        T, w, e = cfg.tokens, cfg.width, cfg.time_embed_dim
        mhsa = 4 * T * w * w + 2 * T * T * w
        ffn = 2 * T * w * cfg.ffn_dim
        overhead = (
            T * cfg.in_dim * w  # input embedding
            + 2 * e * e  # time MLP
            + e * cfg.sublayers * cfg.mod_width()  # fused adaLN modulation
            + 2 * T * w * cfg.in_dim  # layer-normed and linear readouts
        )
        overhead += sum(T * 2 * w * w for b in range(cfg.depth) if cfg.skip_source(b) is not None)
        return cls(mhsa, ffn, overhead)

    def sublayer(self, cfg: ModelConfig, j: int) -> int:
        return self.mhsa if cfg.kind(j) == MHSA else self.ffn

    def full_eval(self, cfg: ModelConfig) -> int:
        return self.overhead + sum(self.sublayer(cfg, j) for j in range(cfg.sublayers))

    def from_counter(self, counter: Counter, evals: int) -> int:
        """MACs implied by instrumented sublayer invocations."""
        return counter.mhsa * self.mhsa + counter.ffn * self.ffn + evals * self.overhead


@dataclass
class MacCount:
    total: int
    sublayer: int
    per_eval: list[int]
    speedup: float  # unmasked total / masked total


def count_macs(cfg: ModelConfig, mask, designations: Sequence[str],
               branches: int = 1) -> MacCount:
    """Analytic MACs of a cached run; ``branches`` is 2 under guidance."""
    mm = MacModel.of(cfg)
    pairs = cache_pairs(designations)
    mask = np.asarray(mask) if mask is not None else np.ones((len(pairs), cfg.sublayers))
    if mask.shape != (len(pairs), cfg.sublayers):
        raise ValueError(f"mask shape {mask.shape} does not match "
                         f"({len(pairs)}, {cfg.sublayers})")
    row_of = {m: r for r, (_, m) in enumerate(pairs)}
    costs = np.array([mm.sublayer(cfg, j) for j in range(cfg.sublayers)])
    per_eval, sub = [], 0
    for k, d in enumerate(designations):
        s = int(costs.sum()) if d == FULL else int(costs @ mask[row_of[k]])
        sub += s
        per_eval.append(branches * (s + mm.overhead))
    total = sum(per_eval)
    unmasked = branches * len(designations) * mm.full_eval(cfg)
    return MacCount(total, branches * sub, per_eval, unmasked / total)


def uncached_macs(cfg: ModelConfig, nfe: int, branches: int = 1) -> int:
    return branches * nfe * MacModel.of(cfg).full_eval(cfg)


# ---------------------------------------------------------------- metrics

def trajectory_mse(samples, reference) -> float:
    """Mean over seeds of the squared distance between final samples."""
    a, b = np.asarray(samples, np.float64), np.asarray(reference, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"sample shapes differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(axis=1).mean())


def mmd(x, y, bandwidth: float = 0.5) -> float:
    """sqrt of the biased MMD^2 estimate under an RBF kernel."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)

    def k(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2.0 * bandwidth ** 2))

    val = k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean()
    return float(np.sqrt(max(val, 0.0)))


# ---------------------------------------------------------------- sweeps

CURVE_COLUMNS = ("config_id", "lambda", "theta", "cache_ratio", "ffn_ratio", "mhsa_ratio",
                 "macs", "speedup", "traj_mse", "mmd", "seed_count")


@dataclass
class CurveRecord:
    config_id: str
    lam: float
    theta: float
    cache_ratio: float
    ffn_ratio: float
    mhsa_ratio: float
    macs: int
    speedup: float
    traj_mse: float
    mmd: float
    seed_count: int

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def tradeoff_sweep(model, schedule, grid, routers: Mapping[float, Router],
                   thetas: Sequence[float], *, solver: str = "ddim", w: float | None = 1.5,
                   seeds: Sequence[int] = range(256), reference_points=None,
                   workers: int = 1, **sample_kw) -> list[CurveRecord]:
    """One record per (lambda, theta).

    ``routers`` maps lambda to a trained router; pass a single entry to sweep
    theta alone. Sample MSE is against the uncached run on the same seeds and
    MMD against ``reference_points`` (the uncached samples if omitted).
    """
    from .sampling import designations_for, sample_cached, sample_full

    seeds = list(seeds)
    full = sample_full(model, schedule, grid, solver, w, seeds)
    ref = full.samples if reference_points is None else np.asarray(reference_points)
    designations = designations_for(grid, solver, sample_kw.get("shifted", True))
    branches = 1 if w is None or w == 0 else 2
    jobs = [(lam, th) for lam in sorted(routers) for th in thetas]

    def run(job):
        lam, th = job
        router = routers[lam]
        mask = router.mask(th)
        res = sample_cached(model, schedule, grid, mask, solver, w, seeds,
                            alpha=router.alpha, designations=designations, **sample_kw)
        ratio = cache_ratio(mask)
        macs = count_macs(model.config, mask, designations, branches)
        return CurveRecord(f"lam={lam:g},theta={th:g}", float(lam), float(th), ratio["overall"],
                           ratio["ffn"], ratio["mhsa"], macs.total, macs.speedup,
                           trajectory_mse(res.samples, full.samples), mmd(res.samples, ref),
                           len(seeds))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(run, jobs))
    return [run(j) for j in jobs]


def write_curve(records: Sequence[CurveRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_COLUMNS)
        for r in records:
            wr.writerow(r.row())


def read_curve(path: str | Path) -> list[CurveRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CurveRecord(row["config_id"], float(row["lambda"]), float(row["theta"]),
                                   float(row["cache_ratio"]), float(row["ffn_ratio"]),
                                   float(row["mhsa_ratio"]), int(row["macs"]),
                                   float(row["speedup"]), float(row["traj_mse"]),
                                   float(row["mmd"]), int(row["seed_count"])))
    return out


# ---------------------------------------------------------------- export

def export_router_heatmap(router: Router, path: str | Path, config: ModelConfig | None = None,
                          step_times: Sequence[float] | None = None) -> tuple[Path, Path]:
    """Write sigmoid values and the mask as CSV, axis labels as a JSON sidecar."""
    path = Path(path)
    probs, mask = router.probs(), router.mask()
    rows, cols = probs.shape
    labels = [f"{'mhsa' if j % 2 == 0 else 'ffn'}{j // 2}" for j in range(cols)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cache_step", "quantity"] + labels)
        for i in range(rows):
            wr.writerow([i, "sigmoid"] + [f"{v:.6f}" for v in probs[i]])
            wr.writerow([i, "mask"] + [int(v) for v in mask[i]])
    side = path.with_suffix(".json")
    doc = {
        "rows": rows, "cols": cols, "row_axis": "cache step (sampling order)",
        "col_axis": "sublayer", "col_labels": labels, "threshold": router.threshold,
        "cache_above": router.cache_above, "mask_legend": {"0": "cached", "1": "computed"},
    }
    if step_times is not None:
        doc["step_times"] = [float(t) for t in step_times]
    if config is not None:
        doc["model"] = asdict(config)
    side.write_text(json.dumps(doc, indent=2))
    return path, side


def read_router_heatmap(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    probs, mask = [], []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for row in rd:
            (probs if row[1] == "sigmoid" else mask).append([float(v) for v in row[2:]])
    return np.asarray(probs), np.asarray(mask, dtype=np.int8)


def middle_cache_density(mask) -> dict[str, float]:
    """Cached fraction in the first, middle and last thirds of the sublayers."""
    cached = np.asarray(mask) == 0
    cols = cached.shape[1]
    a, b = cols // 3, cols - cols // 3
    return {"first": float(cached[:, :a].mean()), "middle": float(cached[:, a:b].mean()),
            "last": float(cached[:, b:].mean())}

