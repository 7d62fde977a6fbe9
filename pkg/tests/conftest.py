"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""
import pytest

CRITERIA = {
    1: "linear algebra (Eckart-Young, monotone truncation, < 10 s)",
    2: "layer gradients vs central differences (< 30 s)",
    3: "weight inheritance (aliasing, untouched columns, singleton finetuner)",
    4: "low-rank-aware sampling PMF and empirical frequencies",
    5: "analytic FLOPs vs instrumented counts, breakeven rank",
    6: "precision-cost filtering (exact M, top-k, dominance, frozen blocks)",
    7: "evolutionary search (window, elitism, exhaustive 2-slot check)",
    8: "desk run: searched vs uniform ranks over 3 seeds",
    9: "sampling ablation: half budget vs uniform full budget over 3 seeds",
    10: "pinned-seed pipeline is byte-identical across runs",
}

_RESULTS = pytest.StashKey[dict]()
_NOTES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")
    config.stash[_RESULTS] = {}
    config.stash[_NOTES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        item.config.stash[_RESULTS].setdefault(marker.args[0], []).append(rep.passed)


@pytest.fixture
def note(request):
    """``note(text)`` attaches a measurement to the test's criterion line."""
    marker = request.node.get_closest_marker("criterion")
    notes = request.config.stash[_NOTES]

    def add(text):
        notes.setdefault(marker.args[0], []).append(str(text))
    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    notes = config.stash[_NOTES]
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {title}")
        for text in notes.get(n, []):
            terminalreporter.write_line(f"               {text}")
