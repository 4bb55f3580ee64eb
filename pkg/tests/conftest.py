from pathlib import Path

import pytest

from sentinel.evaluation import ExperimentConfig, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def smoke_config() -> ExperimentConfig:
    return ExperimentConfig.load(CONFIGS / "smoke.toml")


@pytest.fixture(scope="session")
def smoke_run(smoke_config, tmp_path_factory):
    """One small end-to-end experiment shared by evaluation and CLI tests."""
    out = tmp_path_factory.mktemp("smoke")
    summary = run_experiment(smoke_config, out)
    return out, summary


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("AC")[1].split()[0])):
            terminalreporter.write_line(line)
