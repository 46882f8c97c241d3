import json

import numpy as np
import pytest
import torch

from sfxembed.ingest import Dataset, ManifestEntry


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(records, name="manifest.jsonl"):
        path = tmp_path / name
        with path.open("w") as fh:
            for r in records:
                fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
        return path
    return _write


def make_dataset(counts, dataset_id="A", fine=None):
    """Dataset with ``counts[label]`` entries per class; optional fine labels by index."""
    entries = []
    for label, n in counts.items():
        for i in range(n):
            fine_label = fine(label, i) if fine else None
            entries.append(ManifestEntry(dataset_id, f"{label}/{i:04d}.wav", label, fine_label))
    return Dataset(dataset_id, entries)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request, capsys):
    """Record one pass/fail line per acceptance criterion (echoed in the terminal summary)."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def _report(number, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number:>2}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return _report


_CRITERIA = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
