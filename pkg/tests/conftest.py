"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line each."""
import pytest

CRITERIA = {
    1: "kernel approximation (D=2048 max error < 0.05, below D=128)",
    2: "phase resampling leaves feature inner products unchanged",
    3: "predict_prob performs one D x d product and one 2D dot product",
    4: "autodiff finite-difference checks, 100 seeds",
    5: "forward-process moments and oracle reconstruction",
    6: "fuzzy truth tables, De Morgan, semantic-loss gradient sign",
    7: "semantic term raises denoised satisfaction by >= 0.05",
    8: "end-to-end teacher AUROC >= 0.90 and label fraction 5% +/- 2",
    9: "student agreement >= 95% and AUROC within 0.05 of teacher",
    10: "explain names the injected channel in >= 90% of violated windows",
    11: "detector p50 < 1 ms and speedup > 50x",
    12: "bitwise-deterministic stages and byte-exact round trips",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(number, []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title in CRITERIA.items():
        runs = _outcomes.get(number)
        if not runs:
            tr.write_line(f"criterion {number:2d}: NOT RUN  {title}")
            continue
        ok = all(o == "passed" for _, o in runs)
        failed = [n for n, o in runs if o != "passed"]
        tail = "" if ok else f"  (failed: {', '.join(failed)})"
        tr.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}{tail}")
