import json
from pathlib import Path

import pytest

from vprefine.clients import MockClient, MockScript
from vprefine.orchestrator import Clients
from vprefine.runtime import load_scene
from vprefine.suite import DATA_DIR

HERE = Path(__file__).parent
CORPUS = sorted((HERE / "corpus").glob("*.vp"))
DEFECTS = sorted((HERE / "defects").glob("*.vp"))
DEFECT_MANIFEST = json.loads((HERE / "defects" / "manifest.json").read_text())
SUITE_TASKS = DATA_DIR / "tasks.jsonl"
SUITE_SCRIPT = DATA_DIR / "mock_script.json"


def suite_clients() -> Clients:
    return Clients(MockClient(MockScript.load(SUITE_SCRIPT)))


def scripted(rules: dict) -> MockClient:
    """Mock client from ``{match: [responses...]}``."""
    return MockClient(MockScript.from_dict({"rules": [{"match": k, "responses": list(v)} for k, v in rules.items()]}))


@pytest.fixture
def muffin_scene():
    return load_scene(HERE / "scenes" / "muffins.json")


CRITERIA = {
    "c01": "parser round-trip",
    "c02": "masking properties",
    "c03": "static-analysis recall",
    "c04": "oracle equivalence",
    "c05": "retrieval correctness",
    "c06": "bootstrap arithmetic and filtering",
    "c07": "refinement convergence",
    "c08": "lint direction",
    "c09": "feedback ablation",
    "c10": "determinism",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            cid = nodeid.split("::test_")[1][:3]
            if key != "passed" or cid not in outcomes:
                outcomes[cid] = "PASS" if key == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title in CRITERIA.items():
        if cid in outcomes:
            terminalreporter.write_line(f"criterion {int(cid[1:]):2d} {title}: {outcomes[cid]}")
