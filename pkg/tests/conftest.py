import time
from dataclasses import dataclass

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fcbfuse.metrics import evaluate_split
from fcbfuse.models import Model, preset
from fcbfuse.synthetic import blob_dataset, write_dataset
from fcbfuse.train import FitResult, TrainConfig, fit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dataset(tmp_path):
    """Four circle pairs on disk, the size used by the CLI smoke runs."""
    return write_dataset(tmp_path / "toy", blob_dataset(4, (64, 64), "circle", seed=3))


@pytest.fixture
def split_dataset_dir(tmp_path):
    """Twenty pairs, enough for a seeded 80/10/10 split."""
    return write_dataset(tmp_path / "split", blob_dataset(20, (64, 64), "circle", seed=5))


@dataclass
class OverfitRun:
    cfg: TrainConfig
    model: Model
    result: FitResult
    samples: list
    mdice: float
    mdice_without_fcb: float
    seconds: float


@pytest.fixture(scope="session")
def overfit_run():
    """Toy-64 model fitted to four circle pairs for at most 300 steps (shared, several minutes)."""
    samples = blob_dataset(4, (64, 64), "circle", seed=3)
    cfg = TrainConfig(epochs=300, batch_size=4, seed=0, max_steps=300, augment=False)
    model = Model.create(preset("toy-64"), seed=0)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        result = fit(model, samples, samples, cfg)
        with_fcb = evaluate_split(model.predict_proba, samples, (64, 64), "overfit")
        without = evaluate_split(lambda x: model.predict_proba(x, ablate_fcb=True), samples,
                                 (64, 64), "overfit-without-fcb")
    seconds = time.perf_counter() - t0
    return OverfitRun(cfg, model, result, samples, with_fcb.means["mDice"],
                      without.means["mDice"], seconds)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run."""
    import sys

    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(results.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
