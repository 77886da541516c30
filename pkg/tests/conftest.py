import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rpcbf.cli import resolve_config  # noqa: E402
from rpcbf.config import ExperimentConfig  # noqa: E402
from rpcbf.design import build_spec, synthesize  # noqa: E402

warnings.filterwarnings("ignore", message="Solution may be inaccurate")

# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def load(name: str) -> ExperimentConfig:
    return ExperimentConfig.load(resolve_config(name))


@pytest.fixture(scope="session")
def toy():
    cfg = load("toy1d")
    bundle = synthesize(cfg, cfg.horizon())
    return cfg, bundle, build_spec(cfg, bundle)


@pytest.fixture(scope="session")
def cwh_ci():
    cfg = load("cwh")
    bundle = synthesize(cfg, cfg.horizon("ci"))
    return cfg, bundle, build_spec(cfg, bundle)


@pytest.fixture(scope="session")
def lane():
    cfg = load("lane")
    bundle = synthesize(cfg, cfg.horizon())
    return cfg, bundle, build_spec(cfg, bundle)
