import warnings

import pytest

from olora.config import RunConfig, TaskSuiteConfig
from olora.model import BlockConfig


def tiny_config(**kw) -> RunConfig:
    """A few-second version of the benchmark for protocol tests."""
    base = dict(
        model=BlockConfig(model_dim=16, ff_dim=32, output_dim=2),
        tasks=TaskSuiteConfig(n_train_first=64, n_train=16, n_eval=32),
        seeds=(0,),
        rank=4, rank_init=3, rank_target=2,
        steps_first=30, steps_later=20,
        batch_size=8,
        lr_first=1e-2, lr_later=1e-2, lr_full_ft=1e-3,
        log_every=5,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(autouse=True)
def _quiet_rank_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="rank .* is not small")
        yield


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
