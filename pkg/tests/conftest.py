import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from l2c import checkpoint
from l2c.cli import main as cli_main
from l2c.config import ExperimentConfig
from l2c.data import read_csv
from l2c.model import DenoiserModel, ModelConfig
from l2c.schedule import make_grid, make_schedule


def random_model(cfg: ModelConfig | None = None, seed: int = 0, gate_scale: float = 0.3,
                 dtype=np.float32) -> DenoiserModel:
    """Untrained model with non-zero adaLN heads, so every gate g(t) is live."""
    cfg = cfg or ModelConfig()
    model = DenoiserModel.create(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    model.params["mod.w"] = rng.normal(0, gate_scale, model.params["mod.w"].shape).astype(np.float32)
    model.params["mod.b"] = rng.normal(0, gate_scale, model.params["mod.b"].shape).astype(np.float32)
    return model.astype(dtype)


@pytest.fixture
def model():
    return random_model()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule("vp-linear", 1000)


@pytest.fixture(scope="session")
def grid(schedule):
    return make_grid(schedule, 20)


class Pipeline:
    """Artifacts of gen-data -> pretrain -> train-router, produced through the CLI."""

    def __init__(self, root: Path):
        self.root = root
        self.data_path = root / "data.csv"
        self.ckpt_path = root / "model.l2c"
        self.router_path = root / "router.json"
        self.cfg = ExperimentConfig()
        self.built: set[str] = set()

    def build(self):
        steps = [
            ["gen-data", "--out", str(self.data_path)],
            ["pretrain", "--data", str(self.data_path), "--out", str(self.ckpt_path)],
            ["train-router", "--checkpoint", str(self.ckpt_path), "--data", str(self.data_path),
             "--out", str(self.router_path)],
        ]
        for argv in steps:
            target = Path(argv[argv.index("--out") + 1])
            if target.exists():
                continue
            self._timed(argv)
        return self

    def _timed(self, argv):
        t0 = time.perf_counter()
        code = cli_main(argv)
        assert code == 0, f"pipeline step {argv[0]} exited with {code}"
        name = Path(argv[argv.index("--out") + 1]).name
        self.built.add(name)
        timings = self.timings()
        timings[name] = time.perf_counter() - t0
        (self.root / "timings.json").write_text(json.dumps(timings, indent=2))

    def timings(self) -> dict[str, float]:
        """Seconds spent producing each artifact, whenever it was produced."""
        path = self.root / "timings.json"
        return json.loads(path.read_text()) if path.exists() else {}

    @property
    def model(self) -> DenoiserModel:
        return checkpoint.load(self.ckpt_path)

    @property
    def dataset(self):
        return read_csv(self.data_path)

    @property
    def router(self):
        from l2c.cache import Router
        return Router.from_json(self.router_path.read_text())

    def extra_router(self, lam: float, drop: bool = False):
        """Router trained at another lambda (or the layer-drop router), cached on disk."""
        from l2c.cache import Router
        if lam == self.cfg.lam and not drop:
            return self.router
        path = self.root / f"{'drop' if drop else 'router'}_{lam:g}.json"
        if not path.exists():
            argv = ["train-drop" if drop else "train-router", "--checkpoint", str(self.ckpt_path),
                    "--data", str(self.data_path), "--out", str(path), "--set", f"lam={lam!r}"]
            self._timed(argv)
        return Router.from_json(path.read_text())


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Runs the CLI pipeline once per session.

    Set L2C_ARTIFACTS to a directory to keep and reuse the artifacts between
    sessions during development.
    """
    keep = os.environ.get("L2C_ARTIFACTS")
    root = Path(keep) if keep else tmp_path_factory.mktemp("pipeline")
    root.mkdir(parents=True, exist_ok=True)
    return Pipeline(root).build()


LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1)


@pytest.fixture(scope="session")
def lambda_routers(pipeline):
    return {lam: pipeline.extra_router(lam) for lam in LAMBDAS}


@pytest.fixture(scope="session")
def drop_router(pipeline):
    return pipeline.extra_router(pipeline.cfg.lam, drop=True)


# ---------------------------------------------------------------- acceptance reporting

SESSION = {"start": time.perf_counter(), "reused_seconds": 0.0}
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_sessionstart(session):
    SESSION["start"] = time.perf_counter()


def pytest_collection_modifyitems(items):
    """The pipeline-budget criterion times the whole session, so it runs last."""
    last = [it for it in items if it.get_closest_marker("session_last")]
    items[:] = [it for it in items if it not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "session_last: run after every other test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
