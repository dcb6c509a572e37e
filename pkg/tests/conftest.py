import pytest

from novelty_es.config import RunConfig

SMALL_TABLE = 200_000


def small_config(**kw):
    base = dict(algorithm="nsr-es", iterations=5, pop_pairs=8, metapop_size=3, eval_episodes=2,
                noise_table_size=SMALL_TABLE, checkpoint_every=2, seed=1)
    base.update(kw)
    return RunConfig.from_dict(base)


@pytest.fixture
def make_config():
    return small_config


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
