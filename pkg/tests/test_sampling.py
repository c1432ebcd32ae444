import numpy as np
import pytest

from l2c.bench import trajectory_mse
from l2c.cache import (EXACT_ENDPOINT, PAPER_LITERAL, CacheStore, all_cached, all_compute,
                       mask_at_budget)
from l2c.data import MixtureSpec
from l2c.model import DenoiserModel, ModelConfig
from l2c.sampling import (calibration_scores, designations_for, eval_times, heuristic_mask,
                          initial_noise, predicted_invocations, sample_cached, sample_full)
from l2c.schedule import make_grid

from conftest import random_model

SMALL = ModelConfig(depth=4, width=16, heads=2, ffn_dim=32, time_embed_dim=8)


def _rows(grid, solver="ddim", shifted=True):
    return designations_for(grid, solver, shifted).count("C")


# ---------------------------------------------------------------- plain sampling

def test_one_step_with_zero_eps_rescales_the_noise(schedule):
    model = DenoiserModel.create(SMALL, 0)
    for name in ("out.w", "out.b", "out.lin"):
        model.params[name] = np.zeros_like(model.params[name])
    grid = make_grid(schedule, 1)
    res = sample_full(model, schedule, grid, w=None, seeds=range(5))
    x_T, _ = initial_noise(range(5), SMALL.num_classes)
    ratio = float(schedule.alpha(grid.points[-1]) / schedule.alpha(grid.points[0]))
    np.testing.assert_allclose(res.samples, ratio * x_T.astype(np.float64), rtol=1e-6)


@pytest.mark.parametrize("solver", ("ddim", "dpm2"))
def test_same_seeds_give_identical_samples(schedule, grid, solver):
    model = random_model(SMALL)
    a = sample_full(model, schedule, grid, solver, seeds=range(8))
    b = sample_full(model, schedule, grid, solver, seeds=range(8))
    assert a.samples.tobytes() == b.samples.tobytes()
    # seeds are independent streams: a subset reproduces its rows
    c = sample_full(model, schedule, grid, solver, seeds=[3, 5])
    assert c.samples.tobytes() == a.samples[[3, 5]].tobytes()


def test_zero_guidance_is_the_unconditional_model(schedule, grid):
    model = random_model(SMALL)
    a = sample_full(model, schedule, grid, w=0.0, seeds=range(6))
    b = sample_full(model, schedule, grid, w=None, seeds=range(6), labels=SMALL.null_class)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_dpm2_evaluates_twice_per_step(schedule, grid):
    res = sample_full(random_model(SMALL), schedule, grid, "dpm2", w=None, seeds=range(2))
    assert res.nfe == 40 and len(res.eval_times) == 40
    assert res.counter.total == 40 * SMALL.sublayers


def test_unknown_solver_is_rejected(schedule, grid):
    with pytest.raises(ValueError, match="unknown solver"):
        sample_full(random_model(SMALL), schedule, grid, "euler")


# ---------------------------------------------------------------- cached sampling

@pytest.mark.parametrize("solver", ("ddim", "dpm2"))
@pytest.mark.parametrize("w", (None, 1.5))
def test_all_compute_mask_is_bit_identical(schedule, grid, solver, w):
    model = random_model(SMALL)
    full = sample_full(model, schedule, grid, solver, w, seeds=range(8))
    mask = all_compute(_rows(grid, solver), SMALL.sublayers)
    cached = sample_cached(model, schedule, grid, mask, solver, w, seeds=range(8))
    assert cached.samples.tobytes() == full.samples.tobytes()


@pytest.mark.parametrize("w", (None, 1.5))
def test_all_cached_exact_endpoint_equals_half_the_steps(schedule, grid, w):
    model = random_model(SMALL)
    mask = all_cached(_rows(grid), SMALL.sublayers)
    cached = sample_cached(model, schedule, grid, mask, "ddim", w, seeds=range(16),
                           mode=EXACT_ENDPOINT, alpha=0.0)
    half = sample_full(model, schedule, grid.every_other(), "ddim", w, seeds=range(16))
    np.testing.assert_allclose(cached.samples, half.samples, atol=1e-4)
    assert cached.counter.total == half.counter.total


def test_mask_shape_must_match_grid(schedule, grid):
    model = random_model(SMALL)
    with pytest.raises(ValueError, match="mask shape"):
        sample_cached(model, schedule, grid, all_cached(3, SMALL.sublayers))
    with pytest.raises(ValueError, match="mask shape"):
        sample_cached(model, schedule, grid, all_cached(_rows(grid), 4))


def test_invocations_match_the_prediction(schedule, grid):
    model = random_model(SMALL)
    rng = np.random.default_rng(0)
    for solver, w in (("ddim", None), ("ddim", 1.5), ("dpm2", 1.5)):
        des = designations_for(grid, solver)
        mask = rng.integers(0, 2, (des.count("C"), SMALL.sublayers))
        res = sample_cached(model, schedule, grid, mask, solver, w, seeds=range(2))
        branches = 1 if w is None else 2
        assert res.counter.total == predicted_invocations(mask, des, SMALL.sublayers, branches)


def test_drop_mode_skips_cache_bookkeeping(schedule, grid):
    model = random_model(SMALL)
    mask = all_compute(_rows(grid), SMALL.sublayers)
    mask[:, 3] = 0
    res = sample_cached(model, schedule, grid, mask, w=None, seeds=range(3), drop=True)
    assert res.counter.total == 10 * SMALL.sublayers + int(mask.sum())


# ---------------------------------------------------------------- heuristics

def test_heuristic_extremes():
    for kind in ("top-down", "bottom-up", "random"):
        np.testing.assert_array_equal(heuristic_mask(kind, 0, (3, 4)), all_compute(3, 4))
        np.testing.assert_array_equal(heuristic_mask(kind, 12, (3, 4)), all_cached(3, 4))
    scores = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(heuristic_mask("metric", 12, (3, 4), scores), all_cached(3, 4))


def test_heuristic_orders():
    td = heuristic_mask("top-down", 3, (2, 4))
    bu = heuristic_mask("bottom-up", 3, (2, 4))
    np.testing.assert_array_equal(td, [[0, 0, 1, 1], [0, 1, 1, 1]])
    np.testing.assert_array_equal(bu, [[1, 1, 0, 0], [1, 1, 1, 0]])
    assert (heuristic_mask("random", 5, (3, 4), seed=1) == 0).sum() == 5


def test_heuristic_rejects_bad_budgets():
    for k in (-1, 13):
        with pytest.raises(ValueError):
            heuristic_mask("top-down", k, (3, 4))
    with pytest.raises(ValueError, match="scores"):
        heuristic_mask("metric", 1, (3, 4))
    with pytest.raises(ValueError, match="unknown heuristic"):
        heuristic_mask("sideways", 1, (3, 4))


def test_metric_mask_picks_the_brute_force_minimum(schedule):
    """Cache each (step, sublayer) alone and measure what it changes.

    With paper-literal caching at alpha=1, caching sublayer j alone shifts its
    output by g(m) (f(h^s) - f(h^m)), so ||shift||^2 / |g(m)| is the score.
    """
    model = random_model(SMALL, seed=4, dtype=np.float64)
    grid = make_grid(schedule, 10)
    seeds = range(1000, 1008)
    scores = calibration_scores(model, schedule, grid, seeds=seeds, w=None)
    traj = sample_full(model, schedule, grid, w=None, seeds=seeds, log_trajectory=True)
    times = eval_times(schedule, grid, "ddim")
    y = traj.labels
    brute = np.zeros_like(scores)
    for r in range(scores.shape[0]):
        a, b = 2 * r, 2 * r + 1
        _, tr_s = model.forward(traj.trajectory[a], times[a], y, record=True)
        _, tr_m = model.forward(traj.trajectory[b], times[b], y, record=True)
        for j in range(SMALL.sublayers):
            betas = [1.0] * SMALL.sublayers
            betas[j] = 0.0
            _, tr_c = model.forward(traj.trajectory[b], times[b], y, betas=betas,
                                    cache=CacheStore.from_trace(tr_s), alpha=1.0,
                                    mode=PAPER_LITERAL, record=True)
            shift = ((tr_c.outputs[j] - tr_m.outputs[j]) ** 2).reshape(len(y), -1).sum(1)
            brute[r, j] = (shift / np.abs(tr_m.entries[j].g.reshape(-1))).mean()
    np.testing.assert_allclose(scores, brute, rtol=1e-6)
    best = np.unravel_index(np.argmin(brute), brute.shape)
    mask = heuristic_mask("metric", 1, scores.shape, scores)
    assert list(zip(*np.nonzero(mask == 0))) == [best]


# ---------------------------------------------------------------- trained model

@pytest.mark.slow
def test_samples_cover_the_mixture(pipeline, schedule):
    cfg = pipeline.cfg
    res = sample_full(pipeline.model, schedule, make_grid(schedule, 50), w=cfg.guidance,
                      seeds=range(512))
    means = MixtureSpec(cfg.modes, cfg.radius, cfg.std).means()
    d = np.linalg.norm(res.samples[:, None, :] - means[None], axis=-1).min(axis=1)
    assert (d <= 3 * cfg.std).mean() >= 0.95


@pytest.mark.slow
def test_learned_router_at_forty_percent_beats_all_cached(pipeline, schedule, grid):
    model, router, cfg = pipeline.model, pipeline.router, pipeline.cfg
    seeds = range(256)
    full = sample_full(model, schedule, grid, w=cfg.guidance, seeds=seeds)
    k = round(0.4 * router.logits.size)
    learned = sample_cached(model, schedule, grid, mask_at_budget(router, k), w=cfg.guidance,
                            seeds=seeds, alpha=router.alpha)
    cached = sample_cached(model, schedule, grid, all_cached(*router.logits.shape),
                           w=cfg.guidance, seeds=seeds, alpha=router.alpha)
    assert trajectory_mse(learned.samples, full.samples) < trajectory_mse(cached.samples,
                                                                          full.samples)
