"""Layer caching: the interpolated cache layer, cache store, router and masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, add, as_tensor, mul, scale

PAPER_LITERAL = "paper-literal"
EXACT_ENDPOINT = "exact-endpoint"

# Skip path for cached sublayers: 1 keeps the current stream and reuses only the
# residual branch; 0 restarts from the cached input h^s.
DEFAULT_ALPHA = 1.0


class CacheMode(str, Enum):
    PAPER_LITERAL = PAPER_LITERAL
    EXACT_ENDPOINT = EXACT_ENDPOINT


class CacheMissError(LookupError):
    pass


@dataclass
class CacheEntry:
    """What one sublayer leaves behind at a full step."""

    h: np.ndarray  # sublayer input h^s
    f: np.ndarray  # non-residual output f(h^s, s)
    g: np.ndarray  # gate g(s), shape (B, 1, 1)

    @property
    def gated(self) -> np.ndarray:
        return self.g * self.f


@dataclass
class CacheStore:
    entries: list[CacheEntry | None] = field(default_factory=list)
    provenance: float | None = None  # time of the full step that filled it
    eval_index: int | None = None

    def get(self, j: int) -> CacheEntry:
        if j >= len(self.entries) or self.entries[j] is None:
            raise CacheMissError(f"no cached entry for sublayer {j}")
        return self.entries[j]

    @classmethod
    def from_trace(cls, trace, eval_index: int | None = None) -> "CacheStore":
        return cls(list(trace.entries), trace.time, eval_index)


def _is_num(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def interp_layer(h_m: Tensor, f_fn: Callable[[Tensor], Tensor], g_m, entry: CacheEntry | None,
                 alpha, beta, mode: str = PAPER_LITERAL) -> Tensor:
    """Interpolated cache layer.

    h_m - (1 - alpha)(h_m - h^s) + mix, where mix is
      paper-literal:  g(m) (beta f(h_m) + (1 - beta) f(h^s))
      exact-endpoint: beta g(m) f(h_m) + (1 - beta) g(s) f(h^s)

    ``alpha``/``beta`` are floats or scalar tensors. ``f_fn`` is only called
    when beta is not exactly 0. With alpha == beta == 1 this is the plain
    residual layer, op for op.
    """
    h_m = as_tensor(h_m)
    g_m = as_tensor(g_m)
    beta_zero = _is_num(beta) and float(beta) == 0.0
    beta_one = _is_num(beta) and float(beta) == 1.0
    alpha_one = _is_num(alpha) and float(alpha) == 1.0
    if entry is None and not (beta_one and alpha_one):
        raise CacheMissError("interp_layer needs a cache entry unless alpha == beta == 1")

    if alpha_one:
        skip = h_m
    elif _is_num(alpha) and float(alpha) == 0.0:
        skip = as_tensor(entry.h)
    else:
        # h_m - (1 - alpha)(h_m - h^s) = h^s + alpha (h_m - h^s)
        diff = add(h_m, scale(as_tensor(entry.h), -1.0))
        skip = add(as_tensor(entry.h), _times(alpha, diff))

    if beta_one:
        return add(skip, mul(g_m, f_fn(h_m)))

    if mode == EXACT_ENDPOINT:
        cached = as_tensor(entry.gated)
        if beta_zero:
            return add(skip, cached)
        fresh = mul(g_m, f_fn(h_m))
        mix = add(_times(beta, fresh), _times(_one_minus(beta), cached))
        return add(skip, mix)

    f_s = as_tensor(entry.f)
    if beta_zero:
        return add(skip, mul(g_m, f_s))
    mix = add(_times(beta, f_fn(h_m)), _times(_one_minus(beta), f_s))
    return add(skip, mul(g_m, mix))


def _times(c, t: Tensor) -> Tensor:
    return scale(t, float(c)) if _is_num(c) else mul(c, t)


def _one_minus(c):
    if _is_num(c):
        return 1.0 - float(c)
    return add(scale(c, -1.0), 1.0)


def drop_layer(h: Tensor, f_fn: Callable[[Tensor], Tensor], g, beta) -> Tensor:
    """h + beta g f(h); beta == 0 removes the sublayer without computing f."""
    if _is_num(beta):
        if float(beta) == 0.0:
            return h
        if float(beta) == 1.0:
            return add(h, mul(g, f_fn(h)))
    return add(h, _times(beta, mul(g, f_fn(h))))


# ---------------------------------------------------------------- router

@dataclass
class Router:
    """One logit per (cache step, sublayer). Low sigmoid means cacheable.

    ``cache_above`` flips discretization to the literal "sigmoid > theta means
    cache" reading.
    """

    logits: np.ndarray
    alpha: float = DEFAULT_ALPHA
    threshold: float = 0.5
    cache_above: bool = False

    @property
    def cache_steps(self) -> int:
        return self.logits.shape[0]

    @property
    def sublayers(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def init(cls, cache_steps: int, sublayers: int, rng: np.random.Generator, **kw) -> "Router":
        return cls(rng.standard_normal((cache_steps, sublayers)).astype(np.float32), **kw)

    def probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.astype(np.float64)))

    def mask(self, threshold: float | None = None) -> np.ndarray:
        return discretize(self, threshold)

    def to_json(self) -> str:
        return json.dumps({
            "cache_steps": int(self.cache_steps),
            "sublayers": int(self.sublayers),
            "alpha": float(self.alpha),
            "threshold": float(self.threshold),
            "cache_above": bool(self.cache_above),
            "logits": [float(v) for v in self.logits.ravel()],
            "mask": [int(v) for v in self.mask().ravel()],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Router":
        doc = json.loads(text)
        shape = (int(doc["cache_steps"]), int(doc["sublayers"]))
        logits = np.asarray(doc["logits"], dtype=np.float32)
        if logits.size != shape[0] * shape[1]:
            raise ValueError(f"router logits length {logits.size} does not match {shape}")
        router = cls(logits.reshape(shape), float(doc["alpha"]), float(doc["threshold"]),
                     bool(doc.get("cache_above", False)))
        if "mask" in doc:
            mask = np.asarray(doc["mask"], dtype=np.int8).reshape(shape)
            if not np.array_equal(mask, router.mask()):
                raise ValueError("router mask does not match logits and threshold")
        return router


def discretize(router: Router, threshold: float | None = None) -> np.ndarray:
    """Binary mask: 1 = compute, 0 = use cache."""
    theta = router.threshold if threshold is None else threshold
    if not 0.0 < theta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {theta}")
    p = router.probs()
    cached = p > theta if router.cache_above else p <= theta
    return np.where(cached, 0, 1).astype(np.int8)


def mask_at_budget(router: Router, k: int) -> np.ndarray:
    """Cache exactly the ``k`` most cacheable entries (ties broken by position).

    Equivalent to picking a threshold between consecutive sigmoid values.
    """
    p = router.probs().ravel()
    total = p.size
    if not 0 <= k <= total:
        raise ValueError(f"budget {k} outside [0, {total}]")
    order = np.argsort(-p if router.cache_above else p, kind="stable")
    mask = np.ones(total, dtype=np.int8)
    mask[order[:k]] = 0
    return mask.reshape(router.logits.shape)


def cache_ratio(mask: np.ndarray) -> dict[str, float]:
    """Cached fraction overall and per sublayer kind (even columns MHSA, odd FFN)."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[1] % 2:
        raise ValueError(f"mask must be (cache_steps, 2D), got {mask.shape}")
    cached = mask == 0
    return {
        "overall": float(cached.mean()) if cached.size else 0.0,
        "mhsa": float(cached[:, 0::2].mean()) if cached.size else 0.0,
        "ffn": float(cached[:, 1::2].mean()) if cached.size else 0.0,
    }


def all_compute(cache_steps: int, sublayers: int) -> np.ndarray:
    return np.ones((cache_steps, sublayers), dtype=np.int8)


def all_cached(cache_steps: int, sublayers: int) -> np.ndarray:
    return np.zeros((cache_steps, sublayers), dtype=np.int8)


# ---------------------------------------------------------------- cadence

FULL, CACHE = "F", "C"


def shift_cache_schedule(n_evals: int, solver: str = "ddim", shifted: bool = True) -> list[str]:
    """Full/cache designation for each model evaluation, in sampling order.

    ddim pairs (full, cache). dpm2 unshifted caches evaluations 2, 4, ...
    (each step's midpoint reuses its own start); shifted caches 3, 5, ...,
    n-1 so every midpoint is computed fresh.
    """
    if n_evals % 2:
        raise ValueError(f"caching cadence needs an even evaluation count, got {n_evals}")
    if solver == "ddim" or (solver == "dpm2" and not shifted):
        return [FULL if k % 2 == 0 else CACHE for k in range(n_evals)]
    if solver == "dpm2":
        return [CACHE if (k % 2 == 0 and 0 < k < n_evals - 1) else FULL for k in range(n_evals)]
    raise ValueError(f"unknown solver {solver!r}")


def cache_pairs(designations: Sequence[str]) -> list[tuple[int, int]]:
    """(full eval index, cache eval index) for every cache evaluation."""
    pairs = []
    for k, d in enumerate(designations):
        if d == CACHE:
            if k == 0 or designations[k - 1] != FULL:
                raise ValueError(f"cache evaluation {k} is not preceded by a full evaluation")
            pairs.append((k - 1, k))
    return pairs


def local_error_metric(model, x_s, x_m, s, m, y) -> np.ndarray:
    """|g_j(m)| * ||f_j(h_j^m) - f_j(h_j^s)||^2 per sublayer, batch-averaged."""
    x_s, x_m = np.asarray(x_s), np.asarray(x_m)
    if x_s.shape != x_m.shape:
        raise ValueError(f"x_s {x_s.shape} and x_m {x_m.shape} differ")
    _, tr_s = model.forward(x_s, s, y, record=True)
    _, tr_m = model.forward(x_m, m, y, record=True)
    scores = []
    for es, em in zip(tr_s.entries, tr_m.entries):
        d = (em.f.astype(np.float64) - es.f) ** 2
        per = np.abs(em.g.reshape(-1)) * d.reshape(d.shape[0], -1).sum(axis=1)
        scores.append(per.mean())
    return np.asarray(scores)
