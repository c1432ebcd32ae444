"""Variance-preserving noise schedules, time grids and ODE solver steps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor

SCHEDULE_KINDS = ("vp-linear", "vp-cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha(t), sigma(t), lambda(t) on continuous t in [0, T_train].

    ``alpha_bar`` holds the discrete table for t = 0..T_train (t = 0 is clean
    data). Integer t reads the table directly; between integers log(alpha_bar)
    is linear, which makes ``inverse_lambda`` exact.
    """

    kind: str
    T_train: int
    alpha_bar: np.ndarray

    def _log_abar(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T_train):
            raise ValueError(f"t outside schedule domain [0, {self.T_train}]")
        return np.interp(t, np.arange(self.T_train + 1), np.log(self.alpha_bar))

    def alpha(self, t):
        return np.exp(0.5 * self._log_abar(t))

    def sigma(self, t):
        return np.sqrt(-np.expm1(self._log_abar(t)))

    def lam(self, t):
        la = self._log_abar(t)
        return 0.5 * la - 0.5 * np.log(-np.expm1(la))

    def inverse_lambda(self, lam):
        # alpha_bar = sigmoid(2 lambda) for a VP schedule
        lam = np.asarray(lam, dtype=np.float64)
        log_abar = -np.logaddexp(0.0, -2.0 * lam)
        knots = np.log(self.alpha_bar)[::-1]
        ts = np.arange(self.T_train + 1, dtype=np.float64)[::-1]
        return np.interp(log_abar, knots, ts)


def make_schedule(kind: str = "vp-linear", T_train: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 2:
        raise ValueError(f"T_train must be >= 2, got {T_train}")
    if kind == "vp-linear":
        betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    elif kind == "vp-cosine":
        s = 0.008
        f = lambda u: math.cos((u / T_train + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(i) / f(i - 1), 0.999) for i in range(1, T_train + 1)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, T_train, abar)


@dataclass(frozen=True)
class TimeGrid:
    """Sampling times t_T > ... > t_0; the sampler evaluates at t_T..t_1.

    ``points[k]`` is t_{T-k}, so evaluation k (0-based) happens at ``points[k]``
    and steps to ``points[k + 1]``.
    """

    points: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.points)
        if len(p) < 2 or np.any(np.diff(p) >= 0):
            raise ValueError("time grid must be strictly decreasing with >= 2 points")

    @property
    def T(self) -> int:
        return len(self.points) - 1

    def t(self, i: int) -> float:
        """t_i in the 1-based notation (t_T first, t_0 last)."""
        return self.points[self.T - i]

    def every_other(self) -> "TimeGrid":
        return TimeGrid(tuple(self.points[::2]))


def make_grid(schedule: NoiseSchedule, T: int, kind: str = "uniform-t",
              t_start: float | None = None, t_end: float = 1.0) -> TimeGrid:
    """T solver steps from ``t_start`` (default T_train) down to ``t_end``."""
    if T < 1:
        raise ValueError("need at least one step")
    t_start = float(schedule.T_train if t_start is None else t_start)
    if kind == "uniform-t":
        pts = np.linspace(t_start, t_end, T + 1)
    elif kind == "uniform-lambda":
        lams = np.linspace(float(schedule.lam(t_start)), float(schedule.lam(t_end)), T + 1)
        pts = schedule.inverse_lambda(lams)
        pts[0], pts[-1] = t_start, t_end
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    return TimeGrid(tuple(float(v) for v in pts))


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def forward_sample(schedule: NoiseSchedule, x0, t, noise):
    """x_t = alpha(t) x0 + sigma(t) noise. ``t`` may be per-sample."""
    x0, noise = _arr(x0), _arr(noise)
    if x0.shape != noise.shape:
        raise ValueError(f"forward_sample: x0 {x0.shape} and noise {noise.shape} differ")
    a = np.asarray(schedule.alpha(t))
    s = np.asarray(schedule.sigma(t))
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (x0.ndim - a.ndim))
        s = s.reshape(a.shape)
    return (a * x0 + s * noise).astype(x0.dtype)


def ddim_coeffs(schedule: NoiseSchedule, s: float, t: float) -> tuple[float, float]:
    """(c_x, c_eps) such that x_t = c_x x_s - c_eps eps."""
    a_s, a_t = float(schedule.alpha(s)), float(schedule.alpha(t))
    sig_t = float(schedule.sigma(t))
    h = float(schedule.lam(t)) - float(schedule.lam(s))
    return a_t / a_s, sig_t * math.expm1(h)


def ddim_step(schedule: NoiseSchedule, x_s, eps, s: float, t: float):
    """First-order exponential-integrator step from s down to t."""
    x_s, eps = _arr(x_s), _arr(eps)
    if t > s:
        raise ValueError(f"ddim_step needs t <= s, got s={s}, t={t}")
    if x_s.shape != eps.shape:
        raise ValueError(f"ddim_step: x {x_s.shape} and eps {eps.shape} differ")
    if t == s:
        return x_s.copy()
    cx, ce = ddim_coeffs(schedule, s, t)
    # coefficients stay 64-bit; only the state is stored at the input precision
    return (cx * x_s.astype(np.float64) - ce * eps.astype(np.float64)).astype(x_s.dtype)


def dpm2_midpoint(schedule: NoiseSchedule, s: float, t: float) -> float:
    return float(schedule.inverse_lambda(0.5 * (schedule.lam(s) + schedule.lam(t))))


def dpm_solver2_step(schedule: NoiseSchedule, x_s, model_fn: Callable, s: float, t: float):
    """Second-order midpoint step; two model evaluations.

    ``model_fn(x, time)`` returns eps. Returns (x_t, (s, u)) with u the
    midpoint in log-SNR.
    """
    x_s = _arr(x_s)
    if t > s:
        raise ValueError(f"dpm_solver2_step needs t <= s, got s={s}, t={t}")
    if t == s:
        return x_s.copy(), (s, s)
    u = dpm2_midpoint(schedule, s, t)
    eps_s = _arr(model_fn(x_s, s))
    x_u = ddim_step(schedule, x_s, eps_s, s, u)
    eps_u = _arr(model_fn(x_u, u))
    return ddim_step(schedule, x_s, eps_u, s, t), (s, u)
