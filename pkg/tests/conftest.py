import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS_DIR))  # makes mock_model / mock_server importable

from ctiforge.gateway import GatewaySettings, ModelGateway  # noqa: E402
from ctiforge.knowledge import VectorStore  # noqa: E402
from ctiforge.pipeline import PipelineConfig, run_pipeline  # noqa: E402

CORPUS_DIR = TESTS_DIR / "corpus"
FIXTURES_DIR = TESTS_DIR / "fixtures"
STORE_PATH = TESTS_DIR / "data" / "store.bin"
REPORT_PATHS = [
    CORPUS_DIR / "operation-glasshouse.txt",
    CORPUS_DIR / "nsc-dropper.md",
    CORPUS_DIR / "shadow-vault.html",
]

# Acceptance tests append one "ACn PASS/FAIL: ..." line each; the
# terminal summary prints them so the criterion verdicts survive
# pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def store() -> VectorStore:
    return VectorStore.load(STORE_PATH)


@pytest.fixture()
def mock_gateway():
    from mock_model import MockGateway

    return MockGateway()


@pytest.fixture(scope="session")
def replay_gateway() -> ModelGateway:
    return ModelGateway(GatewaySettings(mode="replay", fixtures_dir=FIXTURES_DIR))


@pytest.fixture(scope="session")
def replay_out(tmp_path_factory) -> Path:
    """One shared replay run over the corpus; figures skipped for speed."""
    out_dir = tmp_path_factory.mktemp("replay_artifacts")
    config = PipelineConfig(
        store_path=STORE_PATH,
        out_dir=out_dir,
        mode="replay",
        fixtures_dir=FIXTURES_DIR,
        render_figures=False,
    )
    code = run_pipeline(config, [str(p) for p in REPORT_PATHS])
    assert code == 0, f"shared replay run failed with exit code {code}"
    return out_dir
