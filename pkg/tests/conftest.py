import numpy as np
import pytest

from sjreuse.datasets import ingest, write_points

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


class AcceptanceRecorder:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, key: str, title: str):
        self.key = key
        self.title = title
        self.details: list[str] = []

    def note(self, msg: str) -> None:
        self.details.append(msg)

    def check(self, ok: bool, msg: str) -> None:
        self.details.append(("ok   " if ok else "FAIL ") + msg)
        if not ok:
            _ACCEPTANCE[self.key] = (False, self.title)
            raise AssertionError(msg)

    def finish(self) -> None:
        _ACCEPTANCE.setdefault(self.key, (True, self.title))


@pytest.fixture
def acceptance(request):
    recs = []

    def make(key: str, title: str) -> AcceptanceRecorder:
        rec = AcceptanceRecorder(key, title)
        recs.append(rec)
        return rec

    yield make
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
    for rec in recs:
        if failed:
            _ACCEPTANCE[rec.key] = (False, rec.title)
        else:
            rec.finish()
        for line in rec.details:
            print(f"  [{rec.key}] {line}")


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, title = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if ok else 'FAIL'}  {title}")


# -- shared data helpers -------------------------------------------------------

@pytest.fixture
def make_dataset(tmp_path):
    """Write points to CSV under tmp_path and ingest them."""
    def make(pts, id, sample_cap=10_000, seed=0):
        path = tmp_path / f"{id}.csv"
        write_points(path, np.asarray(pts, dtype=float))
        return ingest(path, id, sample_cap, seed)
    return make
