import numpy as np
import pandas as pd
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_dataset(readings, start="2012-03-05", interval=5):
    from dstf.data import TrafficDataset

    readings = np.asarray(readings, dtype=np.float64)
    ts = pd.date_range(start, periods=readings.shape[0], freq=f"{interval}min")
    return TrafficDataset(readings, ts, interval)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
