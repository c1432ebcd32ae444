"""``l2c`` command line: data, pretraining, router training, sampling and benches.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (MacModel, count_macs, export_router_heatmap, mmd, tradeoff_sweep,
                    trajectory_mse, uncached_macs, write_curve)
from .cache import Router, all_cached, all_compute, cache_ratio
from .checkpoint import CheckpointError
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import gaussian_mixture, read_csv, write_csv
from .model import DenoiserModel
from .pretrain import DivergenceError, pretrain
from .router_training import (RouterTrainingError, step_pairs, train_drop, train_router,
                              write_log)
from .sampling import (HEURISTICS, calibration_scores, designations_for, heuristic_mask,
                       predicted_invocations, run_manifest, sample_cached, sample_full,
                       write_manifest, write_samples_csv)
from .schedule import make_grid, make_schedule

log = logging.getLogger("l2c")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------- helpers

def version_string() -> str:
    """git-describe style when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = v
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.updated(overrides)


def _write_outputs_meta(cfg: ExperimentConfig, args, out: Path, inputs: dict[str, str],
                        extra: dict | None = None) -> None:
    cfg.save(out.with_name(out.name + ".config"))
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "inputs": {k: {"path": v, "sha256": file_digest(v)} for k, v in inputs.items() if v},
        "output": str(out),
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "version": version_string(),
        "seed": cfg.seed,
    }
    if extra:
        doc.update(extra)
    write_manifest(doc, out.with_name(out.name + ".manifest.json"))


def _require(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"missing --{what}")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _load_router(path: str) -> Router:
    try:
        return Router.from_json(Path(path).read_text())
    except (KeyError, json.JSONDecodeError, TypeError) as exc:
        raise ValueError(f"{path}: malformed router file ({exc})") from None


def _setup(cfg: ExperimentConfig):
    sch = make_schedule(cfg.schedule, cfg.T_train)
    grid = make_grid(sch, cfg.grid_steps, cfg.grid_kind)
    return sch, grid


def _check_model(model: DenoiserModel, cfg: ExperimentConfig) -> None:
    if model.config != cfg.model_config():
        log.info("model architecture from checkpoint overrides config fields")


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args) -> dict:
    out = Path(args.out or "data.csv")
    ds = gaussian_mixture(cfg.mixture(), cfg.n_data, cfg.seed)
    write_csv(ds, out)
    _write_outputs_meta(cfg, args, out, {}, {"rows": len(ds)})
    return {"rows": len(ds), "out": str(out)}


def cmd_pretrain(cfg, args) -> dict:
    data = _require(args.data, "data")
    out = Path(args.out or "model.l2c")
    ds = read_csv(data)
    if ds.labels.max() >= cfg.modes:
        raise ValueError(f"dataset has label {ds.labels.max()} but config says {cfg.modes} modes")
    sch, _ = _setup(cfg)
    model = DenoiserModel.create(cfg.model_config(), cfg.seed)
    t0 = time.time()
    model, curve = pretrain(model, ds, sch, cfg.pretrain_config())
    save_checkpoint(model, out)
    with open(out.with_name(out.name + ".loss.csv"), "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(curve))
    tail = float(np.mean(curve[-100:])) if curve else float("nan")
    _write_outputs_meta(cfg, args, out, {"data": data},
                        {"final_loss": tail, "seconds": time.time() - t0,
                         "param_hash": model.param_hash()})
    return {"final_loss": tail, "out": str(out)}


def _train(cfg, args, drop: bool) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    data = _require(args.data, "data")
    out = Path(args.out or ("drop.json" if drop else "router.json"))
    model = load_checkpoint(ckpt)
    _check_model(model, cfg)
    ds = read_csv(data)
    sch, grid = _setup(cfg)
    pairs = step_pairs(sch, grid, cfg.solver, cfg.shifted)
    init = Router.init(len(pairs), model.config.sublayers, np.random.default_rng(cfg.seed),
                       alpha=cfg.alpha, threshold=cfg.theta, cache_above=cfg.cache_above)
    before = model.param_hash()
    fn = train_drop if drop else train_router
    router, rows = fn(model, init, pairs, sch, ds, cfg.router_config())
    if model.param_hash() != before:
        raise RuntimeError("model parameters changed during router training")
    out.write_text(router.to_json())
    write_log(rows, out.with_name(out.name + ".log.csv"))
    ratio = cache_ratio(router.mask())
    _write_outputs_meta(cfg, args, out, {"checkpoint": ckpt, "data": data},
                        {"kind": "drop" if drop else "cache", "cache_ratio": ratio,
                         "iterations": len(rows), "param_hash": before})
    return {"cache_ratio": ratio["overall"], "out": str(out)}


def _mask_for(cfg, args, model, sch, grid):
    """(mask or None, source label, alpha) from --router / --mask."""
    designations = designations_for(grid, cfg.solver, cfg.shifted)
    rows = designations.count("C")
    shape = (rows, model.config.sublayers)
    if args.router:
        router = _load_router(_require(args.router, "router"))
        if (router.cache_steps, router.sublayers) != shape:
            raise ValueError(f"router shape {(router.cache_steps, router.sublayers)} does not "
                             f"match this grid/model {shape}")
        return router.mask(cfg.theta), f"router:{args.router}", router.alpha
    kind = args.mask or "none"
    if kind == "none":
        return None, "none", cfg.alpha
    if kind == "all-cached":
        return all_cached(*shape), kind, cfg.alpha
    if kind == "all-compute":
        return all_compute(*shape), kind, cfg.alpha
    if kind in HEURISTICS:
        if args.budget is None:
            raise UsageError(f"--mask {kind} needs --budget")
        scores = None
        if kind == "metric":
            scores = calibration_scores(model, sch, grid, cfg.solver, w=cfg.guidance,
                                        shifted=cfg.shifted)
        return heuristic_mask(kind, args.budget, shape, scores, cfg.seed), kind, cfg.alpha
    raise UsageError(f"unknown mask source {kind!r}")


def _run_sampler(cfg, model, sch, grid, mask, alpha, drop, seeds):
    if mask is None:
        return sample_full(model, sch, grid, cfg.solver, cfg.guidance, seeds)
    return sample_cached(model, sch, grid, mask, cfg.solver, cfg.guidance, seeds,
                         mode=cfg.cache_mode, alpha=alpha, skip_policy=cfg.skip_policy,
                         shifted=cfg.shifted, drop=drop)


def cmd_sample(cfg, args) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    out = Path(args.out or "samples.csv")
    model = load_checkpoint(ckpt)
    sch, grid = _setup(cfg)
    mask, source, alpha = _mask_for(cfg, args, model, sch, grid)
    res = _run_sampler(cfg, model, sch, grid, mask, alpha, args.drop, cfg.seeds())
    write_samples_csv(res, out)
    extra = run_manifest(res, cfg.solver, cfg.grid_steps, source, mask)
    _write_outputs_meta(cfg, args, out, {"checkpoint": ckpt, "router": args.router}, extra)
    return {"out": str(out), "nfe": res.nfe}


def cmd_bench(cfg, args) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    out = Path(args.out or "bench.json")
    model = load_checkpoint(ckpt)
    sch, grid = _setup(cfg)
    mask, source, alpha = _mask_for(cfg, args, model, sch, grid)
    seeds = cfg.seeds()
    t0 = time.perf_counter()
    full = sample_full(model, sch, grid, cfg.solver, cfg.guidance, seeds)
    t_full = time.perf_counter() - t0
    designations = designations_for(grid, cfg.solver, cfg.shifted)
    run_mask = mask if mask is not None else all_compute(designations.count("C"),
                                                         model.config.sublayers)
    t0 = time.perf_counter()
    res = _run_sampler(cfg, model, sch, grid, run_mask, alpha, args.drop, seeds)
    t_cached = time.perf_counter() - t0
    branches = 1 if cfg.guidance is None or cfg.guidance == 0 else 2
    macs = count_macs(model.config, run_mask, designations, branches)
    mm = MacModel.of(model.config)
    ref = read_csv(args.data).points if args.data else full.samples
    doc = {
        "mask_source": source,
        "cache_ratio": cache_ratio(run_mask),
        "macs": macs.total, "macs_uncached": uncached_macs(model.config, res.nfe, branches),
        "speedup": macs.speedup,
        "invocations_predicted": predicted_invocations(run_mask, designations,
                                                       model.config.sublayers, branches),
        "invocations_instrumented": res.counter.total,
        "macs_instrumented": mm.from_counter(res.counter, branches * res.nfe),
        "traj_mse": trajectory_mse(res.samples, full.samples),
        "mmd": mmd(res.samples[:2048], np.asarray(ref)[:2048]),
        "mmd_uncached": mmd(full.samples[:2048], np.asarray(ref)[:2048]),
        "seed_count": len(seeds),
        "latency_seconds": {"uncached": t_full, "cached": t_cached},
    }
    out.write_text(json.dumps(doc, indent=2))
    _write_outputs_meta(cfg, args, out, {"checkpoint": ckpt, "router": args.router,
                                         "data": args.data})
    return doc


def cmd_sweep(cfg, args) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    out = Path(args.out or "curve.csv")
    model = load_checkpoint(ckpt)
    sch, grid = _setup(cfg)
    routers, inputs = {}, {"checkpoint": ckpt}
    for item in args.router_at or []:
        lam, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--router-at expects LAMBDA=PATH, got {item!r}")
        routers[float(lam)] = _load_router(_require(path, "router"))
        inputs[f"router[{lam}]"] = path
    if args.router:
        routers[cfg.lam] = _load_router(_require(args.router, "router"))
        inputs["router"] = args.router
    if not routers:
        raise UsageError("sweep needs --router or --router-at")
    thetas = [float(v) for v in (args.thetas or str(cfg.theta)).split(",")]
    ref = read_csv(args.data).points[:2048] if args.data else None
    records = tradeoff_sweep(model, sch, grid, routers, thetas, solver=cfg.solver,
                             w=cfg.guidance, seeds=cfg.seeds(), reference_points=ref,
                             workers=args.threads or 1, mode=cfg.cache_mode,
                             skip_policy=cfg.skip_policy, shifted=cfg.shifted)
    write_curve(records, out)
    _write_outputs_meta(cfg, args, out, inputs, {"records": len(records)})
    return {"records": len(records), "out": str(out)}


def cmd_export_router(cfg, args) -> dict:
    path = _require(args.router, "router")
    out = Path(args.out or "router_heatmap.csv")
    router = _load_router(path)
    sch, grid = _setup(cfg)
    times = None
    if router.cache_steps == designations_for(grid, cfg.solver, cfg.shifted).count("C"):
        times = [m for _, m in step_pairs(sch, grid, cfg.solver, cfg.shifted)]
    csv_path, side = export_router_heatmap(router, out, step_times=times)
    _write_outputs_meta(cfg, args, out, {"router": path}, {"sidecar": str(side)})
    return {"out": str(csv_path), "sidecar": str(side)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-router": lambda c, a: _train(c, a, drop=False),
    "train-drop": lambda c, a: _train(c, a, drop=True),
    "sample": cmd_sample,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "export-router": cmd_export_router,
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="l2c", description="Learning-to-Cache toy lab")
    p.add_argument("--version", action="version", version=f"l2c {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: all cores)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name != "gen-data":
            sp.add_argument("--data", help="dataset CSV")
        if name not in ("gen-data", "pretrain", "export-router"):
            sp.add_argument("--checkpoint", help="model checkpoint (.l2c)")
        if name in ("sample", "bench", "sweep", "export-router"):
            sp.add_argument("--router", help="router JSON")
        if name in ("sample", "bench"):
            sp.add_argument("--mask", choices=("none", "all-cached", "all-compute") + HEURISTICS)
            sp.add_argument("--budget", type=int, help="cached entries for heuristic masks")
            sp.add_argument("--drop", action="store_true",
                            help="treat 0 entries as dropped sublayers")
        if name == "sweep":
            sp.add_argument("--router-at", action="append", metavar="LAMBDA=PATH")
            sp.add_argument("--thetas", help="comma-separated thresholds")
        for f in fields(ExperimentConfig):
            flag = "--" + f.name.replace("_", "-")
            sp.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                            help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads or os.cpu_count()):
            result = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"l2c {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, RouterTrainingError, FloatingPointError) as exc:
        print(f"l2c {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"l2c {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"l2c {args.command}: cannot write output: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
