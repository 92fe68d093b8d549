import pytest

ACCEPTANCE_TITLES = {
    1: "Kalman-oracle flow equivalence",
    2: "moment-propagation oracle",
    3: "mapping-factor importance weights",
    4: "association vs enumeration",
    5: "OSPA vs permutation oracle",
    6: "noise-floor localization",
    7: "cardinality and clutter pruning",
    8: "method ordering at desk scale",
    9: "determinism across thread counts",
}

_results = {}


class AcceptanceRecorder:
    def record(self, k, passed, detail):
        _results[k] = (bool(passed), detail)
        return passed


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    ran = [k for k in ACCEPTANCE_TITLES if k in _results]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for k, title in ACCEPTANCE_TITLES.items():
        if k in _results:
            ok, detail = _results[k]
            terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'} {title}: {detail}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE {k}: NOT RUN {title}")
