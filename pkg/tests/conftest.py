from collections import OrderedDict

import pytest

from invmark import toy

_criteria: "OrderedDict[int, dict]" = OrderedDict()


@pytest.fixture(scope="session")
def llama_arch():
    return toy.llama_like()


@pytest.fixture(scope="session")
def classic_arch():
    return toy.classic()


@pytest.fixture(scope="session")
def llama_f64(llama_arch):
    return toy.random_checkpoint(llama_arch, seed=0, dtype="F64")


@pytest.fixture(scope="session")
def llama_f32(llama_arch):
    return toy.random_checkpoint(llama_arch, seed=0, dtype="F32")


@pytest.fixture(scope="session")
def classic_f64(classic_arch):
    return toy.random_checkpoint(classic_arch, seed=1, dtype="F64")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, {"title": title, "tests": {}})["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["tests"]:
            prev = entry["tests"][report.nodeid]
            if report.failed:
                entry["tests"][report.nodeid] = "FAIL"
            elif report.when == "call" and report.passed and prev is None:
                entry["tests"][report.nodeid] = "PASS"
            elif report.skipped:
                entry["tests"][report.nodeid] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, entry in sorted(_criteria.items()):
        outcomes = list(entry["tests"].values())
        if any(o == "FAIL" for o in outcomes):
            verdict = "FAIL"
        elif outcomes and all(o == "PASS" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {number} [{verdict}] {entry['title']}")
