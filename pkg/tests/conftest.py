import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def published_fixture():
    return json.loads((FIXTURES / "published_tpr5.json").read_text())


@pytest.fixture(scope="session")
def golden_rounds():
    return json.loads((FIXTURES / "golden_round.json").read_text())


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory):
    """Synthetic suite with a short run (E=2, R=6) for harness and CLI tests."""
    from dcv_rood.synth import write_synthetic_suite

    root = tmp_path_factory.mktemp("suite")
    return write_synthetic_suite(root, seed=3, n_id_per_class=20, n_ood_per_class=10,
                                 e_runs=2, r_truth=6)
