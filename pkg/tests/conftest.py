from collections import defaultdict

import pytest

TITLES = {
    1: "gradient suite",
    2: "stripe-attention oracle",
    3: "closed-form loss values",
    4: "postprocessing oracle",
    5: "metrics oracles",
    6: "desk-scale training",
    7: "ablation hooks",
    8: "reproducibility",
}

_outcomes = defaultdict(list)
_details = defaultdict(list)


@pytest.fixture
def detail(request):
    """Append a short measurement to the acceptance summary line of this test's criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _details[marker.args[0]].append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes[marker.args[0]].append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        runs = _outcomes[n]
        ok = all(p for _, p in runs)
        failed = [name for name, p in runs if not p]
        extra = "; ".join(_details[n])
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {TITLES[n]} ({len(runs) - len(failed)}/{len(runs)} checks)"
        if extra:
            line += f" [{extra}]"
        if failed:
            line += f" failed: {', '.join(failed)}"
        terminalreporter.write_line(line)
