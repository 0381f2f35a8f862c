import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gonscreen import cli  # noqa: E402

# small enough for a test run, large enough that every dataset supports a bootstrap CI
SMALL_CONFIG = {
    "seed": 7,
    "synth": {"n_domains": 7, "scale": 0.1},
    "train": {"epochs": 40},
    "eval": {"iterations": 200},
}
STAGES = (["synth"], ["gate"], ["split"], ["train", "--mode", "ssd"], ["train", "--mode", "msd"],
          ["eval"], ["compare"], ["report"])


def run_pipeline(out, config_path, stages=STAGES):
    for stage in stages:
        code = cli.main([*stage, "--config", str(config_path), "--out", str(out)])
        assert code == 0, f"{stage} exited with {code}"
    return out


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, small_config):
    """One complete CLI run on the small benchmark, shared by several test modules."""
    return run_pipeline(tmp_path_factory.mktemp("run") / "a", small_config)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
