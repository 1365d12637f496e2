import os
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from affordpose.camera import Camera
from affordpose.dataset import read_dataset, select_split
from affordpose.denoiser import TrainConfig
from affordpose.diffusion import make_schedule
from affordpose.hand_model import make_toy_hand
from affordpose.refinement import RefinementConfig
from affordpose import pipeline
from affordpose.synthetic import make_synthetic_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BENCH_N = 500
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
BENCH_SEED = 7


@pytest.fixture(scope="session")
def toy():
    return make_toy_hand(0, 180.0)


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture
def cam():
    return Camera(220.0, 220.0, 64.0, 64.0, image_size=(128, 128))


@dataclass
class Benchmark:
    root: object
    records: list
    train: list
    test: list
    weights: object
    losses: np.ndarray
    refined: list
    model: object
    sched: object
    seconds: dict


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory, toy, sched):
    """500-record synthetic set, s1-like split, 5k-step prior, refined test split."""
    import time
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    make_synthetic_dataset(root, BENCH_N, BENCH_SEED, toy)
    records = read_dataset(root / "data.jsonl")
    train = select_split(records, "s1-like", "train")
    test = select_split(records, "s1-like", "test")
    t1 = time.perf_counter()
    weights, losses = pipeline.train_prior(train, TrainConfig(steps=5000), sched)
    t2 = time.perf_counter()
    refined = pipeline.refine_records(test, toy, weights, sched, RefinementConfig(seed=0), root)
    t3 = time.perf_counter()
    return Benchmark(root, records, train, test, weights, losses, refined, toy, sched,
                     {"data": t1 - t0, "train": t2 - t1, "refine": t3 - t2})


def run_cli_pipeline(root, seed=3):
    """make-data -> train -> refine -> evaluate through the CLI entry point."""
    from affordpose.cli import main
    data = root / "data"
    steps = [
        ["make-data", "--out", str(data), "--n", "40", "--seed", str(seed)],
        ["train", "--data", str(data / "data.jsonl"), "--out", str(data / "prior.bin"), "--steps", "150",
         "--seed", str(seed)],
        ["refine", "--in", str(data / "data.jsonl"), "--weights", str(data / "prior.bin"),
         "--out", str(data / "refined.jsonl"), "--every", "5", "--seed", str(seed)],
        ["evaluate", "--gt", str(data / "data.jsonl"), "--pred", str(data / "refined.jsonl"),
         "--pred-field", "initial_pose", "refined_pose", "--out", str(data / "report.json")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"{argv[0]} exited with {code}")
    return data


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    return [run_cli_pipeline(tmp_path_factory.mktemp(f"run{i}")) for i in range(2)]
