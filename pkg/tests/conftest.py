import time
from dataclasses import dataclass

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from evidseg.losses import AnnealSchedule, LossWeights
from evidseg.nn_engine import SegNet, SegNetConfig, TrainConfig, train
from evidseg.synthetic_data import DatasetConfig, Splits, generate_dataset, stack

# the two loss configurations compared by the directional experiment
EXPERIMENT_WEIGHTS = {
    "full": LossWeights(1.0, 0.75, 0.15, 0.45),
    "mse": LossWeights(0.0, 0.0, 0.0, 1.0),
}
DESK_RAMP = (1000, 1200)


@dataclass
class Run:
    splits: Splits
    net: SegNet
    log: list
    seconds: float


class RunCache:
    """Desk-scale training runs, each trained at most once per session."""

    def __init__(self):
        self._data: dict[int, Splits] = {}
        self._runs: dict[tuple[str, int], Run] = {}

    def data(self, seed: int) -> Splits:
        if seed not in self._data:
            self._data[seed] = generate_dataset(DatasetConfig(seed=seed))
        return self._data[seed]

    def run(self, name: str, seed: int) -> Run:
        key = (name, seed)
        if key not in self._runs:
            splits = self.data(seed)
            images, labels, masks = stack(splits.train)
            w = EXPERIMENT_WEIGHTS[name]
            cfg = TrainConfig(seed=seed, loss_weights=w, anneal=AnnealSchedule(*DESK_RAMP, w.w_kl))
            t0 = time.process_time()
            with threadpool_limits(limits=1):
                res = train(images, labels, cfg, SegNetConfig(num_classes=splits.num_classes), ood_masks=masks)
            self._runs[key] = Run(splits, res.net, res.log, time.process_time() - t0)
        return self._runs[key]


_CACHE = RunCache()


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return _CACHE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
