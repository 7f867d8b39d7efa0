from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import pandas as pd
import pytest

from rrfda.simgen import StudyGrid, run_study, summarize_study

CACHE_DIR = Path(os.environ.get("RRFDA_TEST_CACHE", Path(__file__).parent / ".cache"))


def study_replicates(grid: StudyGrid, workers: int | None = None) -> pd.DataFrame:
    """Replicate table for ``grid``, computed once and cached on disk by config digest."""
    key = hashlib.sha256(json.dumps(grid.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = CACHE_DIR / f"study_{key}.csv"
    if path.is_file():
        return pd.read_csv(path)
    workers = workers or int(os.environ.get("RRFDA_TEST_WORKERS", os.cpu_count() or 1))
    _, reps = run_study(grid, workers=workers)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    reps.to_csv(path, index=False)
    (CACHE_DIR / f"study_{key}.json").write_text(json.dumps(grid.to_dict(), indent=2, sort_keys=True))
    return reps


@pytest.fixture(scope="session")
def desk_study():
    reps = study_replicates(StudyGrid())
    return summarize_study(reps), reps


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Store ``(passed, detail)`` for an acceptance criterion; printed in the terminal summary."""

    def record(number, title, passed, detail=""):
        request.config.stash[ACCEPTANCE][number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"{'PASS' if passed else 'FAIL'}  {number}. {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
