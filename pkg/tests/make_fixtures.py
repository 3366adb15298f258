"""Regenerate the committed test fixtures from the mock provider.

Run from the repository root:

    python tests/make_fixtures.py

Starts the local mock provider, records the knowledge store build and a
full pipeline pass over the bundled corpus, and leaves the results in
tests/data/store.bin and tests/fixtures/. Outputs are deterministic, so
a regeneration on an unchanged tree is a no-op for git.
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

TESTS_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS_DIR))

from mock_server import MockModelServer  # noqa: E402

from ctiforge import knowledge  # noqa: E402
from ctiforge.gateway import GatewaySettings, ModelGateway  # noqa: E402
from ctiforge.pipeline import PipelineConfig, run_pipeline  # noqa: E402

SEED_PATH = TESTS_DIR.parent / "src" / "ctiforge" / "data" / "knowledge.jsonl"
FIXTURES_DIR = TESTS_DIR / "fixtures"
STORE_PATH = TESTS_DIR / "data" / "store.bin"
CORPUS = sorted((TESTS_DIR / "corpus").glob("*.txt")) + sorted(
    (TESTS_DIR / "corpus").glob("*.md")
) + sorted((TESTS_DIR / "corpus").glob("*.html"))


def main() -> int:
    if FIXTURES_DIR.exists():
        shutil.rmtree(FIXTURES_DIR)
    STORE_PATH.parent.mkdir(parents=True, exist_ok=True)

    with MockModelServer() as server:
        gateway = ModelGateway(
            GatewaySettings(
                mode="record",
                fixtures_dir=FIXTURES_DIR,
                api_base=server.base_url,
                rate_per_sec=500.0,
                max_inflight=8,
            )
        )
        entries = knowledge.load_seed_entries(SEED_PATH)
        store = knowledge.build_store(entries, gateway, out_path=STORE_PATH)
        print(f"knowledge store: {len(store)} entries -> {STORE_PATH}")

        with tempfile.TemporaryDirectory() as tmp:
            config = PipelineConfig(
                store_path=STORE_PATH,
                out_dir=tmp,
                mode="record",
                fixtures_dir=FIXTURES_DIR,
                api_base=server.base_url,
                rate_per_sec=500.0,
                max_inflight=8,
                render_figures=False,
            )
            code = run_pipeline(config, [str(p) for p in CORPUS])
            if code != 0:
                print(f"pipeline record run failed with exit code {code}")
                return code
            manifest = json.loads((Path(tmp) / "run_manifest.json").read_text())
            print("record-run counts:", json.dumps(manifest["counts"], indent=2))
            for line in manifest["diagnostics"]:
                print("diagnostic:", line)

    for sub in sorted(FIXTURES_DIR.iterdir()):
        count = sum(1 for _ in sub.glob("*.json"))
        print(f"fixtures/{sub.name}: {count} files")
    print(f"mock requests served: {server.request_count}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
