"""Shared fixtures.

``benchmark_system`` trains the full-size pipeline once per session on the
default synthetic composition; every slow test reuses it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pytest

from pmufusion.data import SyntheticConfig, generate_synthetic
from pmufusion.system import SystemConfig, _stack, fit_system, scene_outputs, split_training_scenes
from pmufusion.vaegan import TrainConfig
from pmufusion.windows import compute_errors

BENCHMARK_SEED = 1
BENCHMARK_EPOCHS = 80


@dataclass
class Benchmark:
    dataset: object
    config: SystemConfig
    system: object
    fit_seconds: float
    _outputs: dict = field(default_factory=dict)

    @cached_property
    def n_vae_windows(self) -> int:
        split = split_training_scenes(self.dataset, self.config)
        x, _ = _stack(split.vae, self.dataset, self.system.window)
        return x.shape[0]

    @cached_property
    def eval_windows(self):
        return _stack(self.dataset.split("eval"), self.dataset, self.system.window)

    @cached_property
    def eval_errors(self) -> np.ndarray:
        x, _ = self.eval_windows
        return compute_errors(self.system.model, x[None])[0]

    def outputs(self, rule: str = "hull"):
        if rule not in self._outputs:
            self._outputs[rule] = scene_outputs(self.system, self.dataset, self.dataset.split("eval"), rule)
        return self._outputs[rule]


@pytest.fixture(scope="session")
def benchmark_system() -> Benchmark:
    ds = generate_synthetic(SyntheticConfig(seed=BENCHMARK_SEED))
    cfg = SystemConfig(train=TrainConfig(max_epochs=BENCHMARK_EPOCHS, patience=30))
    t0 = time.perf_counter()
    system = fit_system(ds, cfg)
    return Benchmark(ds, cfg, system, time.perf_counter() - t0)


# -- small end-to-end CLI runs ----------------------------------------------

CLI_CONFIG = """\
[synthetic]
n_pmus = 2
seed = 4
counts = { 0 = 6, 1 = 2, 2 = 2, 3 = 2, 4 = 2, 5 = 2 }

[model]
hidden = [32]
latent_dim = 4
disc_hidden = [32]

[train]
max_epochs = 4
batch_size = 64

[classifier]
epochs = 20

[identification]
eta = 5
"""


def run_cli_pipeline(root: Path, threads: int = 1) -> Path:
    """generate -> train -> tune -> detect/run/ablate/evaluate under ``root``."""
    from pmufusion.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.toml"
    cfg.write_text(CLI_CONFIG)
    data, models = root / "data", root / "models"
    common = ["--config", str(cfg), "--threads", str(threads)]
    trained = ["--data", str(data), "--model", str(models / "vaegan.ckpt")]
    steps = [
        ["generate", "--out", str(data)],
        ["train-vaegan", "--data", str(data), "--out", str(models)],
        ["train-classifier", *trained, "--out", str(models)],
        ["tune", *trained, "--out", str(models)],
        ["detect", *trained, "--out", str(root / "detect")],
        ["run", *trained, "--classifier", str(models / "classifier.ckpt"), "--out", str(root / "run")],
        ["run", *trained, "--classifier", str(models / "classifier.ckpt"), "--rule", "threshold",
         "--out", str(root / "run_threshold")],
        ["ablate", *trained, "--classifier", str(models / "classifier.ckpt"), "--out", str(root / "ablate")],
        ["evaluate", *trained, "--classifier", str(models / "classifier.ckpt"), "--out", str(root / "evaluate")],
    ]
    for argv in steps:
        code = main([argv[0], *common, *argv[1:]])
        assert code == 0, f"{argv[0]} exited {code}"
    return root


@dataclass
class CliRuns:
    first: Path
    second: Path
    threaded: Path


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory) -> CliRuns:
    base = tmp_path_factory.mktemp("cli")
    return CliRuns(run_cli_pipeline(base / "a"), run_cli_pipeline(base / "b"),
                   run_cli_pipeline(base / "c", threads=3))


def tree_files(root: Path) -> dict[str, bytes]:
    """Relative path -> contents for every output file (the config is identical by construction)."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pytest_collection_modifyitems(items):
    for item in items:
        if {"benchmark_system", "cli_runs"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """``acceptance(criterion, ok, detail)`` records a summary line, then asserts."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
