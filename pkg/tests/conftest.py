import numpy as np
import pytest

from cslkit import csl
from cslkit.simkit.dataset import gen_dataset, load_split

MICRO_SETTINGS = dict(batch_size=4, lr=1e-3, hidden=(64, 32), max_bins=512, phase_ref="mic1")


@pytest.fixture(scope="session")
def micro_root(tmp_path_factory):
    """24 short anechoic sessions, 20 train / 4 val."""
    root = tmp_path_factory.mktemp("micro")
    gen_dataset("anechoic", 24, root, seed=5, split_fractions=(0.8, 0.2, 0.0), duration_range=(1.0, 1.5))
    return root


@pytest.fixture(scope="session")
def micro_sessions(micro_root):
    return {split: load_split(micro_root, split) for split in ("train", "val")}


@pytest.fixture(scope="session")
def micro_intervals(micro_sessions):
    return {split: [csl.prepare_interval(s, phase_ref="mic1", keep_stft=True) for s in ss]
            for split, ss in micro_sessions.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE: dict = {}


def record(key: str, passed: bool, detail: str):
    ACCEPTANCE[key] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>3} {'PASS' if ok else 'FAIL'}  {detail}")
