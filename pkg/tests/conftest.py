"""Shared pytest plumbing: the acceptance result table and the trained-model cache."""

import json
import os
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
CACHE_ENV = "VQARCH_ACCEPTANCE_CACHE"

# criterion number -> (passed, message); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, message: str) -> None:
    ACCEPTANCE[number] = (bool(passed), message)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {message}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, message = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {message}")


class ModelCache:
    """Directory of trained artifacts keyed by name, each with a JSON sidecar."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def get(self, name: str, build, load):
        """Load ``name`` if cached, else call ``build(path) -> meta`` and store its meta."""
        path, meta_path = self.path(name), self.path(name + ".json")
        if not (path.exists() and meta_path.exists()):
            start = time.time()
            meta = build(path)
            meta["build_seconds"] = round(time.time() - start, 1)
            meta_path.write_text(json.dumps(meta, indent=2))
        return load(path), json.loads(meta_path.read_text())


@pytest.fixture(scope="session")
def model_cache():
    return ModelCache(Path(os.environ.get(CACHE_ENV) or ROOT / ".acceptance_cache"))
